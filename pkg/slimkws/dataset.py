"""Labeled feature datasets and the Speech Commands directory reader."""

from __future__ import annotations

import os
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import FeatureConfig, FeatureMatrix, fit_frames, lfbe, read_wav
from .checkpoint import load_tensors, save_tensors, tensor_to_text, text_to_tensor
from .const import ENV_THREADS, LOGGER
from .exceptions import CheckpointError, DatasetError

VALIDATION_LIST = "validation_list.txt"
TESTING_LIST = "testing_list.txt"
_CACHE_META = "meta.features"


def worker_count() -> int:
    """Return the worker cap from `SLNK_THREADS` (default 1)."""
    raw = os.environ.get(ENV_THREADS, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        LOGGER.warning("Ignoring %s=%r, expected an integer", ENV_THREADS, raw)
        return 1


@dataclass(frozen=True)
class LabeledExample:
    """One clip's features with its class index."""

    features: FeatureMatrix
    label: int
    source: str


@dataclass
class KeywordDataset:
    """Stacked (N, frames, mel_bins) features with integer labels."""

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    sources: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        """Normalize dtypes and check labels against the class list."""
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3 or self.features.shape[0] != self.labels.shape[0]:  # noqa: PLR2004
            msg = f"Features {self.features.shape} and labels {self.labels.shape} do not line up"
            raise DatasetError(msg)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            msg = f"Labels outside [0, {len(self.class_names)})"
            raise DatasetError(msg)
        if not self.sources:
            self.sources = tuple(f"#{index}" for index in range(len(self.labels)))

    @classmethod
    def from_examples(
        cls, examples: Sequence[LabeledExample], class_names: Sequence[str], frames: int, mel_bins: int
    ) -> KeywordDataset:
        """Stack `examples` (which must already be `frames` long)."""
        features = (
            np.stack([e.features for e in examples])
            if examples
            else np.zeros((0, frames, mel_bins), dtype=np.float32)
        )
        return cls(
            features,
            np.array([e.label for e in examples], dtype=np.int64),
            tuple(class_names),
            tuple(e.source for e in examples),
        )

    def __len__(self) -> int:
        """Return the number of examples."""
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[LabeledExample]:
        """Yield examples in stored order."""
        for features, label, source in zip(self.features, self.labels, self.sources, strict=True):
            yield LabeledExample(features, int(label), source)

    @property
    def num_classes(self) -> int:
        """Return the size of the label set."""
        return len(self.class_names)

    def batch(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return the features and labels at `indices`."""
        return self.features[indices], self.labels[indices]

    def subset(self, indices: np.ndarray) -> KeywordDataset:
        """Return a dataset holding only `indices`."""
        return KeywordDataset(
            self.features[indices],
            self.labels[indices],
            self.class_names,
            tuple(self.sources[i] for i in indices),
        )

    def class_counts(self) -> dict[str, int]:
        """Return examples per class name."""
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return dict(zip(self.class_names, (int(c) for c in counts), strict=True))


@dataclass
class DatasetSplits:
    """Train, validation and test partitions."""

    train: KeywordDataset
    validation: KeywordDataset
    test: KeywordDataset
    notes: list[str] = field(default_factory=list)


def split_off(dataset: KeywordDataset, fraction: float, seed: int) -> tuple[KeywordDataset, KeywordDataset]:
    """Move a seeded random `fraction` of `dataset` into a second dataset."""
    count = round(len(dataset) * fraction)
    order = np.random.default_rng(seed).permutation(len(dataset))
    held = np.sort(order[:count])
    kept = np.sort(order[count:])
    return dataset.subset(kept), dataset.subset(held)


def _read_list(path: Path) -> set[str]:
    if not path.is_file():
        return set()
    return {
        line.strip().replace("\\", "/")
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    }


class FeatureCache:
    """Raw LFBE matrices keyed by clip path, stored as one SLNK file."""

    def __init__(self, path: Path | None, config: FeatureConfig) -> None:
        """Load `path` if it exists and was written with the same feature config."""
        self.path = path
        self.fingerprint = repr(sorted(asdict(config).items()))
        self.entries: dict[str, np.ndarray] = {}
        self.dirty = False
        if path is None or not path.exists():
            return
        try:
            stored = load_tensors(path)
        except CheckpointError as exception:
            LOGGER.warning("Ignoring unreadable feature cache: %s", exception)
            return
        meta = stored.pop(_CACHE_META, None)
        if meta is None or tensor_to_text(meta) != self.fingerprint:
            LOGGER.warning("Feature cache %s was built with other settings; rebuilding", path)
            return
        self.entries = stored
        LOGGER.info("Loaded %d cached feature matrices from %s", len(stored), path)

    def get(self, key: str) -> np.ndarray | None:
        """Return the cached matrix for `key`."""
        return self.entries.get(key)

    def put(self, key: str, features: np.ndarray) -> None:
        """Remember a freshly computed matrix."""
        self.entries[key] = features
        self.dirty = True

    def save(self) -> None:
        """Write the cache if anything was added."""
        if self.path is None or not self.dirty:
            return
        ordered = {key: self.entries[key] for key in sorted(self.entries)}
        save_tensors(self.path, {_CACHE_META: text_to_tensor(self.fingerprint), **ordered})
        LOGGER.info("Wrote %d feature matrices to %s", len(self.entries), self.path)
        self.dirty = False


def load_speech_commands(  # noqa: C901, PLR0913
    root: Path,
    classes: Sequence[str] | None = None,
    *,
    features: FeatureConfig,
    frames: int,
    cache: Path | None = None,
    workers: int | None = None,
) -> DatasetSplits:
    """
    Read a `<root>/<label>/<clip>.wav` tree into train/validation/test splits.

    Labels map to indices in alphabetical order. Directories starting with `_`
    and directories not in `classes` are skipped; `validation_list.txt` and
    `testing_list.txt` assign clips to splits when present (testing wins).
    """
    root = Path(root)
    if not root.is_dir():
        msg = f"Dataset root {root} is not a directory"
        raise DatasetError(msg)

    present = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("_"))
    if classes:
        class_names = tuple(sorted(classes))
        missing = [name for name in class_names if name not in present]
        if missing:
            msg = f"Class directories not found under {root}: {', '.join(missing)}"
            raise DatasetError(msg)
        for name in present:
            if name not in class_names:
                LOGGER.warning("Skipping label directory %s (not in the class list)", name)
    else:
        class_names = tuple(present)

    clips = [
        (path.relative_to(root).as_posix(), index)
        for index, name in enumerate(class_names)
        for path in sorted((root / name).glob("*.wav"))
    ]
    if not clips:
        LOGGER.warning("No clips found under %s; the dataset is empty", root)

    feature_cache = FeatureCache(cache, features)

    def featurize(relative: str) -> FeatureMatrix:
        raw = feature_cache.get(relative)
        if raw is None or raw.shape[1:] != (features.mel_bins,):
            raw = lfbe(read_wav(root / relative), features)
            feature_cache.put(relative, raw)
        return fit_frames(raw, frames, features.floor_value)

    with ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        matrices = list(pool.map(featurize, [relative for relative, _ in clips]))
    feature_cache.save()

    validation = _read_list(root / VALIDATION_LIST)
    testing = _read_list(root / TESTING_LIST)
    buckets: dict[str, list[LabeledExample]] = {"train": [], "validation": [], "test": []}
    for (relative, label), matrix in zip(clips, matrices, strict=True):
        bucket = "test" if relative in testing else "validation" if relative in validation else "train"
        buckets[bucket].append(LabeledExample(matrix, label, relative))

    splits = DatasetSplits(
        *(
            KeywordDataset.from_examples(buckets[key], class_names, frames, features.mel_bins)
            for key in ("train", "validation", "test")
        )
    )
    if not validation and not testing:
        splits.notes.append("no split lists found; every clip is in the training split")
    LOGGER.info(
        "Loaded %s: %d train / %d validation / %d test clips over %d classes",
        root,
        len(splits.train),
        len(splits.validation),
        len(splits.test),
        len(class_names),
    )
    return splits
