"""Tests for INI experiment configs."""

from __future__ import annotations

from pathlib import Path

import pytest

from slimkws.config import load_config, parse_config, read_ini, render_config, validate_paths
from slimkws.exceptions import ConfigParseError, ConfigurationError
from slimkws.models import ConvRow, preset

CONFIG_DIR = Path(__file__).parent.parent / "config"


class TestParse:
    """Text to validated dataclasses."""

    def test_tiny_config(self, tiny_config_text: str) -> None:
        config = parse_config(tiny_config_text)
        assert config.model.kind == "cnn"
        assert config.model.conv_rows == (
            ConvRow((3, 3), 8, (1, 1), (2, 2)),
            ConvRow((3, 2), 12, (1, 1), (1, 1)),
        )
        assert tuple(config.model.widths) == (1.0, 0.75, 0.5, 0.25)
        assert config.train.epochs == 2
        assert config.train.optimizer.lr == 0.01
        assert config.data.synth_per_class == 6
        assert config.features.mel_bins == 8

    def test_preset_with_overrides(self) -> None:
        config = parse_config("[model]\npreset = cnn-desk\nwidths = 1, 0.5\nseed = 7\n")
        assert config.model.conv_rows == preset("cnn-desk").conv_rows
        assert tuple(config.model.widths) == (1.0, 0.5)
        assert config.model.seed == 7

    def test_channel_override_keeps_preset_kernels(self) -> None:
        config = parse_config("[model]\npreset = cnn-desk\nchannels = 4, 5, 6\n")
        assert [row.channels for row in config.model.conv_rows] == [4, 5, 6]
        assert [row.kernel for row in config.model.conv_rows] == [(5, 3), (3, 3), (3, 3)]

    def test_transformer_options(self) -> None:
        text = "[model]\npreset = transformer-speech-commands\npooling = mean\nslim_embedding = yes\n"
        model = parse_config(text).model
        assert model.pooling == "mean"
        assert model.slim_embedding
        assert model.layers == 2

    def test_optimizer_keys(self) -> None:
        text = (
            "[model]\npreset = cnn-desk\n\n[train]\noptimizer = sgd-momentum\n"
            "momentum = 0.5\nbeta1 = 0.8\nschedule = cosine\n"
        )
        optimizer = parse_config(text).train.optimizer
        assert optimizer.name == "sgd-momentum"
        assert optimizer.momentum == 0.5
        assert optimizer.betas == (0.8, 0.999)
        assert optimizer.schedule == "cosine"

    def test_comments_and_case(self) -> None:
        config = parse_config("# run\n[MODEL]\n; preset\nPreset = cnn-desk\n")
        assert config.model.num_classes == 4

    def test_positive_label_reaches_training(self) -> None:
        text = "[model]\npreset = cnn-desk\n\n[data]\npositive_label = 3\n"
        assert parse_config(text).train.positive_label == 3


class TestErrors:
    """Every rejection names the offending line."""

    @pytest.mark.parametrize(
        ("text", "line", "fragment"),
        [
            ("[model]\npreset = cnn-desk\nbogus = 1\n", 3, "bogus"),
            ("[model]\npreset = cnn-desk\n[train]\nepochs = zero\n", 4, "epochs"),
            ("[model]\npreset = cnn-desk\npreset = cnn-desk\n", 3, "duplicate key 'preset' (first set on line 2)"),
            ("[model]\npreset = cnn-desk\n[model]\n", 3, "appears twice"),
            ("[extras]\n", 1, "unknown section [extras]"),
            ("seed = 1\n", 1, "outside any section"),
            ("[model]\njust words\n", 2, "key = value"),
            ("[model]\npreset = cnn-desk\nwidths = 0.5, 1\n", 3, "start at 1.0"),
            ("[model]\npreset = cnn-desk\nkernels = 3x3\n", 3, "channels lists 3 rows, kernels lists 1"),
            ("[model]\npreset = cnn-desk\nkernels = 3-3, 3x3, 3x3\n", 3, "kernels"),
            ("[model]\npreset = cnn-desk\n\n[data]\npositive_label = 4\n", 5, "positive_label 4"),
            ("[model]\npreset = cnn-desk\n\n[features]\nmel_bins = 40\n", 5, "model expects 20"),
            ("[model]\nkind = cnn\nframes = 5\nmel_bins = 5\nnum_classes = 2\n", 1, "kernels and channels"),
            ("[model]\nkind = transformer\nframes = 5\n", 1, "mel_bins, num_classes"),
        ],
    )
    def test_line_numbers(self, text: str, line: int, fragment: str) -> None:
        with pytest.raises(ConfigParseError) as caught:
            parse_config(text, "run.ini")
        assert caught.value.line == line
        assert caught.value.source == "run.ini"
        assert fragment in str(caught.value)
        assert str(caught.value).startswith(f"run.ini:{line}: ")

    def test_missing_model_section(self) -> None:
        with pytest.raises(ConfigParseError, match=r"missing \[model\]"):
            parse_config("[train]\nepochs = 1\n")

    def test_speech_commands_needs_a_root(self) -> None:
        with pytest.raises(ConfigParseError, match="root"):
            parse_config("[model]\npreset = cnn-desk\n\n[data]\nsource = speech_commands\n")

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError, match="Cannot read config"):
            load_config(tmp_path / "absent.ini")


class TestRender:
    """Canonical text."""

    def test_round_trip(self, tiny_config_text: str) -> None:
        config = parse_config(tiny_config_text)
        assert parse_config(render_config(config)) == config

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.ini")), ids=lambda p: p.stem)
    def test_shipped_configs(self, path: Path) -> None:
        config = load_config(path)
        assert config.source == str(path)
        assert parse_config(render_config(config)) == config

    def test_render_is_stable(self, tiny_config_text: str) -> None:
        once = render_config(parse_config(tiny_config_text))
        assert render_config(parse_config(once)) == once

    def test_rendered_sections(self, tiny_config_text: str) -> None:
        sections = read_ini(render_config(parse_config(tiny_config_text)))
        assert list(sections) == ["model", "train", "data", "features", "profile"]
        assert sections["model"]["widths"][0] == "1.0,0.75,0.5,0.25"


class TestValidatePaths:
    """Pre-flight path checks."""

    def test_missing_dataset_root(self, tmp_path: Path) -> None:
        text = f"[model]\npreset = cnn-desk\n\n[data]\nsource = speech_commands\nroot = {tmp_path / 'none'}\n"
        config = parse_config(text)
        with pytest.raises(ConfigurationError, match="does not exist"):
            validate_paths(config)
        validate_paths(config, needs_data=False)

    def test_missing_cache_directory(self, tmp_path: Path) -> None:
        text = f"[model]\npreset = cnn-desk\n\n[data]\ncache = {tmp_path / 'a' / 'f.slnk'}\n"
        with pytest.raises(ConfigurationError, match="cache directory"):
            validate_paths(parse_config(text))
