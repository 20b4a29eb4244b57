"""Tests for WAV I/O and LFBE features."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import soundfile as sf

from slimkws.audio import (
    AudioClip,
    FeatureConfig,
    fit_frames,
    lfbe,
    mel_center_frequencies,
    mel_filterbank,
    read_wav,
    write_wav,
)
from slimkws.exceptions import AudioFormatError, AudioInputError


def _tone(hz: float, seconds: float = 1.0, sample_rate: int = 16000) -> AudioClip:
    t = np.arange(round(seconds * sample_rate)) / sample_rate
    return AudioClip(0.5 * np.sin(2.0 * np.pi * hz * t), sample_rate)


class TestFeatureConfig:
    """Derived front-end sizes."""

    def test_defaults(self) -> None:
        config = FeatureConfig()
        assert (config.window, config.hop, config.n_fft) == (400, 160, 512)
        assert config.upper_hz == 8000.0

    @pytest.mark.parametrize(
        ("samples", "frames"), [(16000, 98), (400, 1), (399, 0), (559, 1), (560, 2), (12400, 76)]
    )
    def test_frame_count(self, samples: int, frames: int) -> None:
        assert FeatureConfig().frame_count(samples) == frames


class TestLfbe:
    """Log mel filterbank energies."""

    def test_one_second_gives_98_frames(self) -> None:
        features = lfbe(_tone(440.0), FeatureConfig())
        assert features.shape == (98, 64)
        assert features.dtype == np.float32

    @pytest.mark.parametrize("samples", [400, 401, 1000, 4321, 16000])
    def test_frame_count_matches_extraction(self, samples: int) -> None:
        config = FeatureConfig(mel_bins=20)
        clip = AudioClip(np.random.default_rng(samples).uniform(-1, 1, samples))
        assert lfbe(clip, config).shape == (config.frame_count(samples), 20)

    def test_frame_count_property_over_random_lengths(self) -> None:
        config = FeatureConfig(mel_bins=8)
        lengths = np.random.default_rng(11).integers(config.window, 20000, size=1000)
        for samples in lengths:
            clip = AudioClip(np.full(int(samples), 0.01))
            assert lfbe(clip, config).shape[0] == config.frame_count(int(samples))

    def test_silence_is_the_floor(self) -> None:
        config = FeatureConfig()
        features = lfbe(AudioClip(np.zeros(16000)), config)
        assert np.all(features == np.float32(config.floor_value))

    def test_tone_peaks_at_nearest_filter(self) -> None:
        config = FeatureConfig()
        peak = int(lfbe(_tone(1000.0), config).mean(axis=0).argmax())
        nearest = int(np.abs(mel_center_frequencies(config) - 1000.0).argmin())
        assert peak == nearest == 21

    def test_short_clip(self) -> None:
        with pytest.raises(AudioInputError, match="shorter than one 400-sample window"):
            lfbe(AudioClip(np.zeros(399)), FeatureConfig())

    def test_sample_rate_mismatch(self) -> None:
        with pytest.raises(AudioInputError, match="8000 Hz"):
            lfbe(_tone(440.0, sample_rate=8000), FeatureConfig())


class TestFilterbank:
    """Triangular mel filters."""

    def test_shape_and_sign(self) -> None:
        bank = mel_filterbank(FeatureConfig())
        assert bank.shape == (64, 257)
        assert (bank >= 0).all()
        assert (bank.max(axis=1) > 0).all()

    def test_neighbouring_filters_partition_unity(self) -> None:
        config = FeatureConfig(mel_bins=20)
        bank = mel_filterbank(config)
        centers = mel_center_frequencies(config)
        hz = np.arange(bank.shape[1]) * config.sample_rate / config.n_fft
        inside = (hz >= centers[0]) & (hz <= centers[-1])
        np.testing.assert_allclose(bank[:, inside].sum(axis=0), 1.0, atol=1e-6)

    def test_centers_increase(self) -> None:
        centers = mel_center_frequencies(FeatureConfig())
        assert centers.shape == (64,)
        assert (np.diff(centers) > 0).all()
        assert 20.0 < centers[0] < centers[-1] < 8000.0


class TestFitFrames:
    """Center cropping and floor padding."""

    def test_crop_is_centered(self) -> None:
        features = np.arange(98, dtype=np.float32)[:, None] * np.ones((1, 3), dtype=np.float32)
        cropped = fit_frames(features, 76, -13.8)
        assert cropped.shape == (76, 3)
        assert cropped[0, 0] == 11.0
        assert cropped[-1, 0] == 86.0

    def test_pad_is_symmetric(self) -> None:
        features = np.zeros((50, 2), dtype=np.float32)
        padded = fit_frames(features, 98, -13.8)
        assert padded.shape == (98, 2)
        assert padded.dtype == np.float32
        np.testing.assert_array_equal(padded[:24], np.float32(-13.8))
        np.testing.assert_array_equal(padded[24:74], 0.0)
        np.testing.assert_array_equal(padded[74:], np.float32(-13.8))

    def test_odd_padding_goes_after(self) -> None:
        padded = fit_frames(np.zeros((4, 1), dtype=np.float32), 7, 1.0)
        np.testing.assert_array_equal(padded[:, 0], [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0])

    def test_exact_length_is_unchanged(self) -> None:
        features = np.ones((76, 4), dtype=np.float32)
        assert fit_frames(features, 76, 0.0) is features

    def test_rejects_empty_target(self) -> None:
        with pytest.raises(AudioInputError):
            fit_frames(np.zeros((3, 1)), 0, 0.0)


class TestWav:
    """PCM 16-bit mono files."""

    def test_round_trip_within_one_code(self, tmp_path: Path, rng: np.random.Generator) -> None:
        clip = AudioClip(rng.uniform(-1.0, 1.0, 1600))
        write_wav(tmp_path / "clip.wav", clip)
        loaded = read_wav(tmp_path / "clip.wav")
        assert loaded.sample_rate == 16000
        assert loaded.duration == pytest.approx(0.1)
        np.testing.assert_allclose(loaded.samples, clip.samples, atol=1.0 / 32768.0)

    def test_full_scale_code(self, tmp_path: Path) -> None:
        sf.write(tmp_path / "max.wav", np.array([32767, -32768], dtype=np.int16), 16000, subtype="PCM_16")
        samples = read_wav(tmp_path / "max.wav").samples
        assert samples[0] == pytest.approx(0.99997, abs=1e-5)
        assert samples[1] == -1.0

    def test_rejects_stereo(self, tmp_path: Path) -> None:
        sf.write(tmp_path / "stereo.wav", np.zeros((100, 2), dtype=np.int16), 16000, subtype="PCM_16")
        with pytest.raises(AudioFormatError, match="2 channels"):
            read_wav(tmp_path / "stereo.wav")

    def test_rejects_other_sample_formats(self, tmp_path: Path) -> None:
        sf.write(tmp_path / "deep.wav", np.zeros(100), 16000, subtype="PCM_24")
        with pytest.raises(AudioFormatError, match="PCM_24"):
            read_wav(tmp_path / "deep.wav")

    def test_rejects_non_audio(self, tmp_path: Path) -> None:
        path = tmp_path / "notes.wav"
        path.write_text("not audio", encoding="utf-8")
        with pytest.raises(AudioFormatError, match="notes.wav"):
            read_wav(path)

    @pytest.mark.parametrize("samples", [np.zeros((2, 2)), np.zeros(0)])
    def test_clip_must_be_non_empty_mono(self, samples: np.ndarray) -> None:
        with pytest.raises(AudioInputError):
            AudioClip(samples)
