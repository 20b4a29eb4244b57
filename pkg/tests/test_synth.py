"""Tests for synthetic keyword data."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from slimkws.audio import FeatureConfig
from slimkws.dataset import load_speech_commands
from slimkws.exceptions import ConfigurationError
from slimkws.synth import class_name, keyword_template, synth_clips, synth_dataset, write_synth_tree


class TestClips:
    """Raw synthetic audio."""

    def test_same_seed_same_clips(self) -> None:
        first = synth_clips(3, 3, 2)
        second = synth_clips(3, 3, 2)
        for (label_a, clip_a), (label_b, clip_b) in zip(first, second, strict=True):
            assert label_a == label_b
            np.testing.assert_array_equal(clip_a.samples, clip_b.samples)

    def test_other_seed_other_noise(self) -> None:
        first = synth_clips(3, 2, 1)[0][1].samples
        second = synth_clips(4, 2, 1)[0][1].samples
        assert not np.array_equal(first, second)

    def test_order_and_range(self) -> None:
        clips = synth_clips(0, 3, 4)
        assert [label for label, _ in clips] == [0] * 4 + [1] * 4 + [2] * 4
        for _, clip in clips:
            assert clip.samples.shape == (16000,)
            assert np.abs(clip.samples).max() <= 1.0

    def test_noiseless_clips_match_their_template(self) -> None:
        templates = np.stack([keyword_template(k, 5) for k in range(5)])
        templates /= np.linalg.norm(templates, axis=1, keepdims=True)
        for label, clip in synth_clips(1, 5, 3, snr_db=None):
            cosine = templates @ (clip.samples / np.linalg.norm(clip.samples))
            assert int(cosine.argmax()) == label
            assert cosine[label] == pytest.approx(1.0)

    def test_templates_are_distinct(self) -> None:
        templates = [keyword_template(k, 4) for k in range(4)]
        for k, template in enumerate(templates):
            assert np.abs(template).max() == pytest.approx(1.0)
            for other in templates[k + 1 :]:
                assert not np.allclose(template, other)

    @pytest.mark.parametrize(("classes", "per_class"), [(1, 5), (3, 0)])
    def test_rejects_degenerate_sizes(self, classes: int, per_class: int) -> None:
        with pytest.raises(ConfigurationError):
            synth_clips(0, classes, per_class)


class TestDataset:
    """Featurized synthetic data."""

    def test_shape_and_names(self, tiny_features: FeatureConfig) -> None:
        data = synth_dataset(0, 3, 2, features=tiny_features, frames=12)
        assert data.features.shape == (6, 12, tiny_features.mel_bins)
        assert data.class_names == ("keyword_00", "keyword_01", "keyword_02")
        assert data.sources[3] == "keyword_01/keyword_01_0001.wav"
        assert data.class_counts() == {"keyword_00": 2, "keyword_01": 2, "keyword_02": 2}

    def test_deterministic(self, tiny_features: FeatureConfig) -> None:
        first = synth_dataset(8, 2, 3, features=tiny_features, frames=12)
        second = synth_dataset(8, 2, 3, features=tiny_features, frames=12)
        np.testing.assert_array_equal(first.features, second.features)

    def test_class_name(self) -> None:
        assert class_name(7) == "keyword_07"


class TestTree:
    """Speech Commands layout on disk."""

    def test_files_and_lists(self, tmp_path: Path) -> None:
        written = write_synth_tree(tmp_path, seed=2, num_classes=4, examples_per_class=10)
        assert len(written) == 40
        assert all(path.is_file() for path in written)
        validation = (tmp_path / "validation_list.txt").read_text(encoding="utf-8").split()
        testing = (tmp_path / "testing_list.txt").read_text(encoding="utf-8").split()
        assert validation == [f"keyword_{k:02d}/keyword_{k:02d}_0008.wav" for k in range(4)]
        assert testing == [f"keyword_{k:02d}/keyword_{k:02d}_0009.wav" for k in range(4)]

    def test_regeneration_is_byte_identical(self, tmp_path: Path) -> None:
        first = write_synth_tree(tmp_path / "a", seed=5, num_classes=2, examples_per_class=3)
        second = write_synth_tree(tmp_path / "b", seed=5, num_classes=2, examples_per_class=3)
        for path_a, path_b in zip(first, second, strict=True):
            assert path_a.read_bytes() == path_b.read_bytes()

    def test_tree_loads_as_a_dataset(self, tmp_path: Path, tiny_features: FeatureConfig) -> None:
        write_synth_tree(tmp_path, seed=0, num_classes=4, examples_per_class=10)
        splits = load_speech_commands(tmp_path, features=tiny_features, frames=12)
        assert splits.train.num_classes == 4
        assert (len(splits.train), len(splits.validation), len(splits.test)) == (32, 4, 4)
        assert splits.notes == []
