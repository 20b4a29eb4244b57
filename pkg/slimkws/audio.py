"""WAV I/O and log mel filterbank energy (LFBE) features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cache
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .const import HOP_MS, LOG_FLOOR, LOW_HZ, SAMPLE_RATE, WINDOW_MS
from .exceptions import AudioFormatError, AudioInputError

PCM16_SCALE = 32768.0

type FeatureMatrix = np.ndarray


@dataclass(frozen=True)
class AudioClip:
    """Mono samples in [-1, 1] at `sample_rate` Hz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        """Reject empty or multi-channel audio and bad rates."""
        if self.sample_rate <= 0:
            msg = f"Sample rate must be positive, got {self.sample_rate}"
            raise AudioInputError(msg)
        if self.samples.ndim != 1 or self.samples.size == 0:
            msg = f"Expected non-empty mono samples, got shape {self.samples.shape}"
            raise AudioInputError(msg)

    @property
    def duration(self) -> float:
        """Return the length in seconds."""
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    """LFBE front-end parameters."""

    sample_rate: int = SAMPLE_RATE
    mel_bins: int = 64
    window_ms: float = WINDOW_MS
    hop_ms: float = HOP_MS
    low_hz: float = LOW_HZ
    high_hz: float | None = None
    log_floor: float = LOG_FLOOR

    @property
    def window(self) -> int:
        """Return the analysis window in samples."""
        return round(self.sample_rate * self.window_ms / 1000.0)

    @property
    def hop(self) -> int:
        """Return the frame hop in samples."""
        return round(self.sample_rate * self.hop_ms / 1000.0)

    @property
    def n_fft(self) -> int:
        """Return the FFT size: the window rounded up to a power of two."""
        return 1 << (self.window - 1).bit_length()

    @property
    def upper_hz(self) -> float:
        """Return the top edge of the filterbank."""
        return self.high_hz if self.high_hz is not None else self.sample_rate / 2.0

    @property
    def floor_value(self) -> float:
        """Return the feature value of a silent frame."""
        return float(np.float32(math.log(self.log_floor)))

    def frame_count(self, samples: int) -> int:
        """Return how many frames a clip of `samples` samples yields."""
        return (samples - self.window) // self.hop + 1 if samples >= self.window else 0


def read_wav(path: Path) -> AudioClip:
    """Read a RIFF/WAVE PCM 16-bit mono file."""
    try:
        info = sf.info(str(path))
    except (sf.LibsndfileError, RuntimeError) as exception:
        msg = f"{path}: not a readable audio file ({exception})"
        raise AudioFormatError(msg) from exception
    if info.format != "WAV" or info.subtype != "PCM_16":
        msg = f"{path}: expected WAV PCM_16, found {info.format} {info.subtype}"
        raise AudioFormatError(msg)
    if info.channels != 1:
        msg = f"{path}: expected mono audio, found {info.channels} channels"
        raise AudioFormatError(msg)
    data, sample_rate = sf.read(str(path), dtype="int16", always_2d=False)
    if data.size == 0:
        msg = f"{path}: no samples"
        raise AudioFormatError(msg)
    return AudioClip(data.astype(np.float32) / PCM16_SCALE, sample_rate)


def write_wav(path: Path, clip: AudioClip) -> None:
    """Write `clip` as WAV PCM 16-bit mono, rounding to the nearest code."""
    codes = np.clip(np.round(clip.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    sf.write(str(path), codes, clip.sample_rate, subtype="PCM_16", format="WAV")


@cache
def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Return the (mel_bins, n_fft/2+1) HTK-scale triangular filterbank."""
    return librosa.filters.mel(
        sr=config.sample_rate,
        n_fft=config.n_fft,
        n_mels=config.mel_bins,
        fmin=config.low_hz,
        fmax=config.upper_hz,
        htk=True,
        norm=None,
        dtype=np.float64,
    )


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    """Return the peak frequency (Hz) of every filter."""
    edges = librosa.mel_frequencies(
        n_mels=config.mel_bins + 2, fmin=config.low_hz, fmax=config.upper_hz, htk=True
    )
    return edges[1:-1]


@cache
def _analysis_window(length: int) -> np.ndarray:
    return get_window("hann", length, fftbins=True).astype(np.float64)


def lfbe(clip: AudioClip, config: FeatureConfig) -> FeatureMatrix:
    """Return the (frames, mel_bins) log mel filterbank energies of `clip`."""
    if clip.sample_rate != config.sample_rate:
        msg = f"Clip is {clip.sample_rate} Hz, features expect {config.sample_rate} Hz"
        raise AudioInputError(msg)
    if clip.samples.size < config.window:
        msg = f"Clip of {clip.samples.size} samples is shorter than one {config.window}-sample window"
        raise AudioInputError(msg)

    frames = sliding_window_view(clip.samples.astype(np.float64), config.window)[:: config.hop]
    spectrum = np.fft.rfft(frames * _analysis_window(config.window), n=config.n_fft)
    power = spectrum.real**2 + spectrum.imag**2
    energies = power @ mel_filterbank(config).T
    return np.log(energies + config.log_floor).astype(np.float32)


def fit_frames(features: FeatureMatrix, target_frames: int, floor_value: float) -> FeatureMatrix:
    """Center-crop or symmetrically pad (with `floor_value`) to `target_frames` rows."""
    if target_frames < 1:
        msg = f"Target frame count must be >= 1, got {target_frames}"
        raise AudioInputError(msg)
    frames = features.shape[0]
    if frames == target_frames:
        return features
    if frames > target_frames:
        start = (frames - target_frames) // 2
        return features[start : start + target_frames]
    total = target_frames - frames
    before = total // 2
    return np.pad(
        features,
        ((before, total - before), (0, 0)),
        constant_values=np.asarray(floor_value, dtype=features.dtype),
    )
