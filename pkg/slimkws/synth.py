"""Synthetic keyword clips for desk-scale training without a speech corpus."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import librosa
import numpy as np

from .audio import AudioClip, FeatureConfig, fit_frames, lfbe, write_wav
from .const import LOGGER, SAMPLE_RATE
from .dataset import TESTING_LIST, VALIDATION_LIST, KeywordDataset, LabeledExample
from .exceptions import ConfigurationError

# Keyword layout inside each clip
_CLIP_SECONDS = 1.0
_KEYWORD_SECONDS = 0.6
_LOW_HZ = 300.0
_HIGH_HZ = 3500.0
_RISING_SWEEP = 0.25
_FALLING_SWEEP = -0.2
_HARMONIC_GAIN = 0.3
_GAIN_RANGE = (0.5, 1.0)
DEFAULT_SNR_DB = (5.0, 20.0)


def class_name(label: int) -> str:
    """Return the directory name of synthetic class `label`."""
    return f"keyword_{label:02d}"


def keyword_template(label: int, num_classes: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """
    Return the noiseless unit-peak clip of class `label`.

    Each class is a Hann-enveloped chirp with a second harmonic; base
    frequencies are mel-spaced and even/odd classes sweep up/down.
    """
    base = librosa.mel_frequencies(n_mels=num_classes, fmin=_LOW_HZ, fmax=_HIGH_HZ, htk=True)[label]
    sweep = _RISING_SWEEP if label % 2 == 0 else _FALLING_SWEEP
    length = round(_KEYWORD_SECONDS * sample_rate)
    t = np.arange(length) / sample_rate
    phase = 2.0 * np.pi * base * (t + sweep * t**2 / (2.0 * _KEYWORD_SECONDS))
    tone = (np.sin(phase) + _HARMONIC_GAIN * np.sin(2.0 * phase)) * np.hanning(length)

    clip = np.zeros(round(_CLIP_SECONDS * sample_rate))
    start = (clip.size - length) // 2
    clip[start : start + length] = tone
    return clip / np.abs(clip).max()


def synth_clips(
    seed: int,
    num_classes: int,
    examples_per_class: int,
    *,
    snr_db: tuple[float, float] | None = DEFAULT_SNR_DB,
    sample_rate: int = SAMPLE_RATE,
) -> list[tuple[int, AudioClip]]:
    """Return `(label, clip)` pairs ordered by class then index; `snr_db=None` adds no noise."""
    if num_classes < 2:  # noqa: PLR2004
        msg = f"Synthetic data needs at least 2 classes, got {num_classes}"
        raise ConfigurationError(msg)
    if examples_per_class < 1:
        msg = f"Synthetic data needs at least 1 example per class, got {examples_per_class}"
        raise ConfigurationError(msg)
    rng = np.random.default_rng(seed)
    clips: list[tuple[int, AudioClip]] = []
    for label in range(num_classes):
        template = keyword_template(label, num_classes, sample_rate)
        for _ in range(examples_per_class):
            samples = rng.uniform(*_GAIN_RANGE) * template
            if snr_db is not None:
                snr = rng.uniform(*snr_db)
                noise_power = np.mean(samples**2) / 10.0 ** (snr / 10.0)
                samples = samples + rng.normal(0.0, np.sqrt(noise_power), samples.size)
            clips.append((label, AudioClip(np.clip(samples, -1.0, 1.0), sample_rate)))
    return clips


def synth_dataset(  # noqa: PLR0913
    seed: int,
    num_classes: int,
    examples_per_class: int,
    *,
    features: FeatureConfig,
    frames: int,
    snr_db: tuple[float, float] | None = DEFAULT_SNR_DB,
) -> KeywordDataset:
    """Return featurized synthetic clips, deterministic per `seed`."""
    counters = [0] * num_classes
    examples: list[LabeledExample] = []
    for label, clip in synth_clips(
        seed, num_classes, examples_per_class, snr_db=snr_db, sample_rate=features.sample_rate
    ):
        matrix = fit_frames(lfbe(clip, features), frames, features.floor_value)
        source = f"{class_name(label)}/{class_name(label)}_{counters[label]:04d}.wav"
        counters[label] += 1
        examples.append(LabeledExample(matrix, label, source))
    names = [class_name(label) for label in range(num_classes)]
    return KeywordDataset.from_examples(examples, names, frames, features.mel_bins)


def _split_tail(count: int, validation_fraction: float, testing_fraction: float) -> tuple[int, int]:
    testing = round(count * testing_fraction)
    validation = round(count * validation_fraction)
    return min(validation, count - testing), testing


def write_synth_tree(  # noqa: PLR0913
    out_dir: Path,
    seed: int,
    num_classes: int,
    examples_per_class: int,
    *,
    validation_fraction: float = 0.1,
    testing_fraction: float = 0.1,
    snr_db: tuple[float, float] | None = DEFAULT_SNR_DB,
) -> list[Path]:
    """
    Write synthetic WAVs in the Speech Commands layout plus split lists.

    Within every class the last examples go to `testing_list.txt` and the ones
    before them to `validation_list.txt`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_val, n_test = _split_tail(examples_per_class, validation_fraction, testing_fraction)
    written: list[Path] = []
    validation: list[str] = []
    testing: list[str] = []
    counters = [0] * num_classes
    for label, clip in synth_clips(seed, num_classes, examples_per_class, snr_db=snr_db):
        index = counters[label]
        counters[label] += 1
        directory = out_dir / class_name(label)
        directory.mkdir(exist_ok=True)
        relative = f"{class_name(label)}/{class_name(label)}_{index:04d}.wav"
        write_wav(out_dir / relative, clip)
        written.append(out_dir / relative)
        if index >= examples_per_class - n_test:
            testing.append(relative)
        elif index >= examples_per_class - n_test - n_val:
            validation.append(relative)

    _write_list(out_dir / VALIDATION_LIST, validation)
    _write_list(out_dir / TESTING_LIST, testing)
    LOGGER.info(
        "Wrote %d synthetic clips (%d validation, %d testing) to %s",
        len(written),
        len(validation),
        len(testing),
        out_dir,
    )
    return written


def _write_list(path: Path, entries: Sequence[str]) -> None:
    path.write_text("".join(f"{entry}\n" for entry in entries), encoding="utf-8")
