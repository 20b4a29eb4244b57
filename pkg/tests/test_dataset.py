"""Tests for labeled datasets and the Speech Commands reader."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pytest

from slimkws import dataset as dataset_module
from slimkws.audio import AudioClip, FeatureConfig, write_wav
from slimkws.dataset import (
    FeatureCache,
    KeywordDataset,
    load_speech_commands,
    split_off,
    worker_count,
)
from slimkws.exceptions import DatasetError

FRAMES = 12


def _write_clip(path: Path, seed: int, samples: int = 4000) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    write_wav(path, AudioClip(rng.uniform(-0.5, 0.5, samples)))


@pytest.fixture
def speech_tree(tmp_path: Path) -> Path:
    """Two classes of two clips each, a noise directory and split lists."""
    root = tmp_path / "speech"
    for seed, relative in enumerate(["yes/a.wav", "yes/b.wav", "no/a.wav", "no/b.wav"]):
        _write_clip(root / relative, seed)
    _write_clip(root / "_background_noise_" / "hum.wav", 99)
    (root / "validation_list.txt").write_text("no/b.wav\n", encoding="utf-8")
    (root / "testing_list.txt").write_text("yes\\a.wav\n\n", encoding="utf-8")
    return root


def _dataset(count: int = 10, classes: int = 2) -> KeywordDataset:
    features = np.arange(count * 2 * 3, dtype=np.float32).reshape(count, 2, 3)
    return KeywordDataset(features, np.arange(count) % classes, tuple(f"c{k}" for k in range(classes)))


class TestKeywordDataset:
    """Stacked in-memory datasets."""

    def test_default_sources(self) -> None:
        data = _dataset(3)
        assert data.sources == ("#0", "#1", "#2")
        assert data.features.dtype == np.float32
        assert data.labels.dtype == np.int64

    def test_rejects_misaligned_labels(self) -> None:
        with pytest.raises(DatasetError, match="do not line up"):
            KeywordDataset(np.zeros((3, 2, 2)), np.zeros(2), ("a", "b"))

    def test_rejects_out_of_range_labels(self) -> None:
        with pytest.raises(DatasetError, match=r"\[0, 2\)"):
            KeywordDataset(np.zeros((2, 2, 2)), np.array([0, 2]), ("a", "b"))

    def test_subset_and_batch(self) -> None:
        data = _dataset(6, 3)
        picked = data.subset(np.array([4, 1]))
        assert picked.sources == ("#4", "#1")
        features, labels = data.batch(np.array([4, 1]))
        np.testing.assert_array_equal(features, picked.features)
        np.testing.assert_array_equal(labels, [1, 1])

    def test_class_counts(self) -> None:
        assert _dataset(7, 3).class_counts() == {"c0": 3, "c1": 2, "c2": 2}

    def test_iteration_yields_examples(self) -> None:
        examples = list(_dataset(2))
        assert [e.label for e in examples] == [0, 1]
        assert examples[1].source == "#1"


class TestSplitOff:
    """Seeded held-out partitions."""

    def test_sizes_and_disjointness(self) -> None:
        kept, held = split_off(_dataset(10), 0.3, seed=4)
        assert (len(kept), len(held)) == (7, 3)
        assert set(kept.sources).isdisjoint(held.sources)
        assert set(kept.sources) | set(held.sources) == {f"#{i}" for i in range(10)}

    def test_seed_determines_partition(self) -> None:
        first = split_off(_dataset(20), 0.25, seed=1)[1].sources
        assert split_off(_dataset(20), 0.25, seed=1)[1].sources == first
        assert split_off(_dataset(20), 0.25, seed=2)[1].sources != first

    def test_zero_fraction_keeps_everything(self) -> None:
        kept, held = split_off(_dataset(5), 0.0, seed=0)
        assert len(kept) == 5
        assert len(held) == 0


class TestLoadSpeechCommands:
    """Directory-tree reader."""

    def test_classes_are_alphabetical(self, speech_tree: Path, tiny_features: FeatureConfig) -> None:
        splits = load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES)
        assert splits.train.class_names == ("no", "yes")
        assert splits.train.features.shape == (2, FRAMES, tiny_features.mel_bins)

    def test_split_lists_assign_clips(self, speech_tree: Path, tiny_features: FeatureConfig) -> None:
        splits = load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES)
        assert splits.train.sources == ("no/a.wav", "yes/b.wav")
        assert splits.validation.sources == ("no/b.wav",)
        assert splits.test.sources == ("yes/a.wav",)
        np.testing.assert_array_equal(splits.test.labels, [1])
        assert splits.notes == []

    def test_underscore_directories_are_skipped(
        self, speech_tree: Path, tiny_features: FeatureConfig
    ) -> None:
        splits = load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES)
        every = splits.train.sources + splits.validation.sources + splits.test.sources
        assert not any(source.startswith("_") for source in every)

    def test_class_list_filters_directories(
        self, speech_tree: Path, tiny_features: FeatureConfig, caplog: pytest.LogCaptureFixture
    ) -> None:
        with caplog.at_level(logging.WARNING):
            splits = load_speech_commands(speech_tree, ["yes"], features=tiny_features, frames=FRAMES)
        assert splits.train.class_names == ("yes",)
        assert splits.train.sources == ("yes/b.wav",)
        assert "Skipping label directory no" in caplog.text

    def test_missing_class_directory(self, speech_tree: Path, tiny_features: FeatureConfig) -> None:
        with pytest.raises(DatasetError, match="maybe"):
            load_speech_commands(speech_tree, ["yes", "maybe"], features=tiny_features, frames=FRAMES)

    def test_missing_root(self, tmp_path: Path, tiny_features: FeatureConfig) -> None:
        with pytest.raises(DatasetError, match="not a directory"):
            load_speech_commands(tmp_path / "absent", features=tiny_features, frames=FRAMES)

    def test_without_lists_everything_trains(self, tmp_path: Path, tiny_features: FeatureConfig) -> None:
        _write_clip(tmp_path / "up" / "0.wav", 0)
        _write_clip(tmp_path / "down" / "0.wav", 1)
        splits = load_speech_commands(tmp_path, features=tiny_features, frames=FRAMES)
        assert len(splits.train) == 2
        assert len(splits.validation) == len(splits.test) == 0
        assert splits.notes == ["no split lists found; every clip is in the training split"]

    def test_empty_root_is_reported(
        self, tmp_path: Path, tiny_features: FeatureConfig, caplog: pytest.LogCaptureFixture
    ) -> None:
        (tmp_path / "silence").mkdir()
        with caplog.at_level(logging.WARNING):
            splits = load_speech_commands(tmp_path, features=tiny_features, frames=FRAMES)
        assert len(splits.train) == 0
        assert splits.train.features.shape == (0, FRAMES, tiny_features.mel_bins)
        assert "the dataset is empty" in caplog.text

    def test_short_clips_are_padded(self, tmp_path: Path, tiny_features: FeatureConfig) -> None:
        _write_clip(tmp_path / "a" / "0.wav", 0, samples=400)
        _write_clip(tmp_path / "b" / "0.wav", 1, samples=400)
        features = load_speech_commands(tmp_path, features=tiny_features, frames=FRAMES).train.features
        floor = np.float32(tiny_features.floor_value)
        assert (features[:, :5] == floor).all()
        assert (features[:, 6:] == floor).all()

    def test_workers_do_not_change_results(
        self, speech_tree: Path, tiny_features: FeatureConfig
    ) -> None:
        serial = load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES, workers=1)
        threaded = load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES, workers=4)
        np.testing.assert_array_equal(serial.train.features, threaded.train.features)


class TestFeatureCache:
    """Cached LFBE matrices."""

    def test_second_load_reads_the_cache(
        self, speech_tree: Path, tmp_path: Path, tiny_features: FeatureConfig, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        cache = tmp_path / "features.slnk"
        first = load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES, cache=cache)
        assert cache.is_file()

        def fail(*_: object) -> None:
            pytest.fail("features were recomputed")

        monkeypatch.setattr(dataset_module, "lfbe", fail)
        second = load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES, cache=cache)
        np.testing.assert_array_equal(first.train.features, second.train.features)

    def test_other_settings_invalidate(
        self, speech_tree: Path, tmp_path: Path, tiny_features: FeatureConfig, caplog: pytest.LogCaptureFixture
    ) -> None:
        cache = tmp_path / "features.slnk"
        load_speech_commands(speech_tree, features=tiny_features, frames=FRAMES, cache=cache)
        with caplog.at_level(logging.WARNING):
            reloaded = FeatureCache(cache, FeatureConfig(mel_bins=10))
        assert reloaded.entries == {}
        assert "other settings" in caplog.text

    def test_unreadable_cache_is_ignored(self, tmp_path: Path, tiny_features: FeatureConfig) -> None:
        cache = tmp_path / "features.slnk"
        cache.write_bytes(b"junk")
        assert FeatureCache(cache, tiny_features).entries == {}

    def test_clean_cache_is_not_rewritten(self, tmp_path: Path, tiny_features: FeatureConfig) -> None:
        cache = FeatureCache(tmp_path / "features.slnk", tiny_features)
        cache.save()
        assert not (tmp_path / "features.slnk").exists()


class TestWorkerCount:
    """Thread cap from the environment."""

    def test_default_is_one(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv("SLNK_THREADS", raising=False)
        assert worker_count() == 1

    @pytest.mark.parametrize(("raw", "expected"), [("4", 4), ("0", 1), ("many", 1)])
    def test_environment_override(
        self, monkeypatch: pytest.MonkeyPatch, raw: str, expected: int
    ) -> None:
        monkeypatch.setenv("SLNK_THREADS", raw)
        assert worker_count() == expected
