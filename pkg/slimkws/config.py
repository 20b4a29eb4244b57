"""INI experiment configuration: line-tracking reader, voluptuous schemas and canonical rendering."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal

import voluptuous as vol

from .audio import FeatureConfig
from .exceptions import ConfigParseError, ConfigurationError
from .layers import WidthList
from .models import ConvRow, ModelSpec, preset
from .trainer import OptimizerConfig, TrainConfig

type DataSource = Literal["synthetic", "speech_commands"]
type RawSection = dict[str, tuple[str, int]]

SECTIONS = ("model", "train", "data", "features", "profile")


@dataclass(frozen=True)
class DataConfig:
    """Where examples come from."""

    source: DataSource = "synthetic"
    root: Path | None = None
    classes: tuple[str, ...] = ()
    synth_classes: int = 4
    synth_per_class: int = 250
    synth_seed: int = 0
    validation_fraction: float = 0.2
    cache: Path | None = None
    positive_label: int = 1

    def __post_init__(self) -> None:
        """Check the source has what it needs."""
        if self.source == "speech_commands" and self.root is None:
            msg = "[data] source = speech_commands needs a root directory"
            raise ConfigurationError(msg)


@dataclass(frozen=True)
class ProfileConfig:
    """Step-time profiler settings."""

    width_counts: tuple[int, ...] = (1, 2, 3, 4, 5, 10, 20, 40)
    batch_size: int = 32
    warmup_steps: int = 5
    timed_steps: int = 20


@dataclass(frozen=True)
class Config:
    """A complete experiment description."""

    model: ModelSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    source: str = field(default="<string>", compare=False)


def _split(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _float_list(value: str) -> tuple[float, ...]:
    return tuple(float(item) for item in _split(value))


def _int_list(value: str) -> tuple[int, ...]:
    return tuple(int(item) for item in _split(value))


def _pair(value: str) -> tuple[int, int]:
    first, sep, second = value.lower().partition("x")
    if not sep:
        msg = f"expected AxB, got {value!r}"
        raise ValueError(msg)
    return int(first), int(second)


def _pair_list(value: str) -> tuple[tuple[int, int], ...]:
    return tuple(_pair(item) for item in _split(value))


def _name_list(value: str) -> tuple[str, ...]:
    return tuple(_split(value))


def _optional(coerce: Callable[[str], Any]) -> Callable[[str], Any]:
    def convert(value: str) -> Any:
        return None if value.strip().lower() in ("", "none") else coerce(value)

    return convert


_POSITIVE = vol.All(vol.Coerce(int), vol.Range(min=1))
_NON_NEGATIVE = vol.All(vol.Coerce(int), vol.Range(min=0))
_FLOAT = vol.Coerce(float)

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional("preset"): vol.In(
            ("cnn-wakeword", "cnn-desk", "transformer-inhouse", "transformer-speech-commands")
        ),
        vol.Optional("kind"): vol.In(("cnn", "transformer")),
        vol.Optional("frames"): _POSITIVE,
        vol.Optional("mel_bins"): _POSITIVE,
        vol.Optional("num_classes"): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("widths"): vol.Coerce(_float_list),
        vol.Optional("kernels"): vol.Coerce(_pair_list),
        vol.Optional("channels"): vol.Coerce(_int_list),
        vol.Optional("strides"): vol.Coerce(_pair_list),
        vol.Optional("pools"): vol.Coerce(_pair_list),
        vol.Optional("slim_last_conv"): vol.Boolean(),
        vol.Optional("dim"): _POSITIVE,
        vol.Optional("mlp_dim"): _POSITIVE,
        vol.Optional("heads"): _POSITIVE,
        vol.Optional("layers"): _NON_NEGATIVE,
        vol.Optional("embed_dim"): vol.Coerce(_optional(int)),
        vol.Optional("slim_embedding"): vol.Boolean(),
        vol.Optional("pooling"): vol.In(("cls", "mean")),
        vol.Optional("seed"): _NON_NEGATIVE,
    },
    extra=vol.PREVENT_EXTRA,
)

TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional("epochs"): _POSITIVE,
        vol.Optional("batch_size"): _POSITIVE,
        vol.Optional("optimizer"): vol.In(("adam", "sgd-momentum")),
        vol.Optional("lr"): vol.All(_FLOAT, vol.Range(min=0, min_included=False)),
        vol.Optional("beta1"): vol.All(_FLOAT, vol.Range(min=0, max=1, max_included=False)),
        vol.Optional("beta2"): vol.All(_FLOAT, vol.Range(min=0, max=1, max_included=False)),
        vol.Optional("eps"): vol.All(_FLOAT, vol.Range(min=0, min_included=False)),
        vol.Optional("momentum"): vol.All(_FLOAT, vol.Range(min=0, max=1)),
        vol.Optional("weight_decay"): vol.All(_FLOAT, vol.Range(min=0)),
        vol.Optional("schedule"): vol.In(("none", "cosine")),
        vol.Optional("seed"): _NON_NEGATIVE,
        vol.Optional("eval_every"): _NON_NEGATIVE,
        vol.Optional("log_every"): _POSITIVE,
        vol.Optional("target_miss"): vol.All(_FLOAT, vol.Range(min=0, max=1)),
        vol.Optional("prefetch"): _POSITIVE,
    },
    extra=vol.PREVENT_EXTRA,
)

DATA_SCHEMA = vol.Schema(
    {
        vol.Optional("source"): vol.In(("synthetic", "speech_commands")),
        vol.Optional("root"): vol.Coerce(_optional(Path)),
        vol.Optional("classes"): vol.Coerce(_name_list),
        vol.Optional("synth_classes"): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("synth_per_class"): _POSITIVE,
        vol.Optional("synth_seed"): _NON_NEGATIVE,
        vol.Optional("validation_fraction"): vol.All(_FLOAT, vol.Range(min=0, max=1, max_included=False)),
        vol.Optional("cache"): vol.Coerce(_optional(Path)),
        vol.Optional("positive_label"): _NON_NEGATIVE,
    },
    extra=vol.PREVENT_EXTRA,
)

FEATURES_SCHEMA = vol.Schema(
    {
        vol.Optional("sample_rate"): _POSITIVE,
        vol.Optional("mel_bins"): _POSITIVE,
        vol.Optional("window_ms"): vol.All(_FLOAT, vol.Range(min=0, min_included=False)),
        vol.Optional("hop_ms"): vol.All(_FLOAT, vol.Range(min=0, min_included=False)),
        vol.Optional("low_hz"): vol.All(_FLOAT, vol.Range(min=0)),
        vol.Optional("high_hz"): vol.Coerce(_optional(float)),
        vol.Optional("log_floor"): vol.All(_FLOAT, vol.Range(min=0, min_included=False)),
    },
    extra=vol.PREVENT_EXTRA,
)

PROFILE_SCHEMA = vol.Schema(
    {
        vol.Optional("width_counts"): vol.All(vol.Coerce(_int_list), vol.Length(min=1)),
        vol.Optional("batch_size"): _POSITIVE,
        vol.Optional("warmup_steps"): _NON_NEGATIVE,
        vol.Optional("timed_steps"): _POSITIVE,
    },
    extra=vol.PREVENT_EXTRA,
)

SCHEMAS: dict[str, vol.Schema] = {
    "model": MODEL_SCHEMA,
    "train": TRAIN_SCHEMA,
    "data": DATA_SCHEMA,
    "features": FEATURES_SCHEMA,
    "profile": PROFILE_SCHEMA,
}


def read_ini(text: str, source: str = "<string>") -> dict[str, RawSection]:
    """Split INI text into `{section: {key: (value, line)}}`, remembering section header lines."""
    sections: dict[str, RawSection] = {}
    current: RawSection | None = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in SECTIONS:
                msg = f"unknown section [{name}], expected one of {', '.join(SECTIONS)}"
                raise ConfigParseError(msg, source=source, line=number)
            if name in sections:
                msg = f"section [{name}] appears twice"
                raise ConfigParseError(msg, source=source, line=number)
            current = sections[name] = {"__line__": ("", number)}
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            msg = f"expected 'key = value', got {line!r}"
            raise ConfigParseError(msg, source=source, line=number)
        if current is None:
            msg = f"key {key.strip()!r} outside any section"
            raise ConfigParseError(msg, source=source, line=number)
        key = key.strip().lower()
        if key in current:
            msg = f"duplicate key {key!r} (first set on line {current[key][1]})"
            raise ConfigParseError(msg, source=source, line=number)
        current[key] = (value.strip(), number)
    return sections


def _validate(name: str, raw: RawSection, source: str) -> dict[str, Any]:
    values = {key: value for key, (value, _) in raw.items() if key != "__line__"}
    try:
        return SCHEMAS[name](values)
    except vol.MultipleInvalid as exception:
        error = exception.errors[0]
        key = str(error.path[0]) if error.path else ""
        line = raw[key][1] if key in raw else raw["__line__"][1]
        msg = f"[{name}] {key}: {error.msg}" if key else f"[{name}] {error.msg}"
        raise ConfigParseError(msg, source=source, line=line) from exception


def _model_spec(values: Mapping[str, Any], raw: RawSection, source: str) -> ModelSpec:
    base = preset(values["preset"]) if "preset" in values else None
    if base is None:
        missing = [key for key in ("kind", "frames", "mel_bins", "num_classes") if key not in values]
        if missing:
            msg = f"[model] needs a preset or {', '.join(missing)}"
            raise ConfigParseError(msg, source=source, line=raw["__line__"][1])
        if values["kind"] == "cnn" and not {"kernels", "channels"} <= set(values):
            msg = "[model] a cnn without a preset needs kernels and channels"
            raise ConfigParseError(msg, source=source, line=raw["__line__"][1])
        base = ModelSpec(
            kind=values["kind"],
            frames=values["frames"],
            mel_bins=values["mel_bins"],
            num_classes=values["num_classes"],
            conv_rows=(ConvRow((1, 1), 1),) if values["kind"] == "cnn" else (),
        )
    overrides = {
        key: values[key]
        for key in (
            "kind", "frames", "mel_bins", "num_classes", "slim_last_conv", "dim", "mlp_dim",
            "heads", "layers", "embed_dim", "slim_embedding", "pooling", "seed",
        )
        if key in values
    }
    if "widths" in values:
        overrides["widths"] = _guard(lambda: WidthList(values["widths"]), raw, "widths", source)

    row_keys = ("kernels", "channels", "strides", "pools")
    if any(key in values for key in row_keys):
        columns = {
            "kernels": [row.kernel for row in base.conv_rows],
            "channels": [row.channels for row in base.conv_rows],
            "strides": [row.stride for row in base.conv_rows],
            "pools": [row.pool for row in base.conv_rows],
        }
        columns.update({key: list(values[key]) for key in row_keys if key in values})
        depth = len(columns["kernels"])
        for key in ("strides", "pools"):
            if key not in values and len(columns[key]) != depth:
                columns[key] = [(1, 1)] * depth
        for key in row_keys:
            if len(columns[key]) != depth:
                line = raw.get(key, raw.get("kernels", raw["__line__"]))[1]
                msg = f"[model] {key} lists {len(columns[key])} rows, kernels lists {depth}"
                raise ConfigParseError(msg, source=source, line=line)
        overrides["conv_rows"] = tuple(
            ConvRow(kernel, channels, stride, pool)
            for kernel, channels, stride, pool in zip(*(columns[key] for key in row_keys), strict=True)
        )
    return _guard(lambda: replace(base, **overrides), raw, "__line__", source)


def _guard[T](build: Callable[[], T], raw: RawSection, key: str, source: str) -> T:
    try:
        return build()
    except ConfigParseError:
        raise
    except ConfigurationError as exception:
        line = raw[key][1] if key in raw else raw.get("__line__", ("", None))[1]
        raise ConfigParseError(str(exception), source=source, line=line) from exception


def parse_config(text: str, source: str = "<string>") -> Config:
    """Parse and validate INI text."""
    sections = read_ini(text, source)
    if "model" not in sections:
        msg = "missing [model] section"
        raise ConfigParseError(msg, source=source)
    empty: RawSection = {"__line__": ("", 0)}
    raw = {name: sections.get(name, empty) for name in SECTIONS}
    values = {name: _validate(name, raw[name], source) for name in SECTIONS}

    model = _model_spec(values["model"], raw["model"], source)

    data_values = values["data"]
    data = _guard(lambda: DataConfig(**data_values), raw["data"], "source", source)
    if data.positive_label >= model.num_classes:
        line = raw["data"]["positive_label"][1] if "positive_label" in raw["data"] else raw["data"]["__line__"][1]
        msg = f"[data] positive_label {data.positive_label} outside the {model.num_classes} classes"
        raise ConfigParseError(msg, source=source, line=line)

    feature_values = {"mel_bins": model.mel_bins, **values["features"]}
    if feature_values["mel_bins"] != model.mel_bins:
        msg = f"[features] mel_bins = {feature_values['mel_bins']} but the model expects {model.mel_bins}"
        raise ConfigParseError(msg, source=source, line=raw["features"]["mel_bins"][1])
    features = FeatureConfig(**feature_values)

    train_values = dict(values["train"])
    optimizer_keys = {"lr", "eps", "momentum", "weight_decay", "schedule"}
    optimizer_values: dict[str, Any] = {key: train_values.pop(key) for key in optimizer_keys & set(train_values)}
    if "optimizer" in train_values:
        optimizer_values["name"] = train_values.pop("optimizer")
    beta1 = train_values.pop("beta1", OptimizerConfig.betas[0])
    beta2 = train_values.pop("beta2", OptimizerConfig.betas[1])
    optimizer_values["betas"] = (beta1, beta2)
    train = _guard(
        lambda: TrainConfig(
            optimizer=OptimizerConfig(**optimizer_values),
            positive_label=data.positive_label,
            **train_values,
        ),
        raw["train"],
        "__line__",
        source,
    )

    profile = ProfileConfig(**values["profile"])
    return Config(model, train, data, features, profile, source=source)


def load_config(path: Path) -> Config:
    """Read and parse a config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exception:
        msg = f"Cannot read config {path}: {exception.strerror}"
        raise ConfigurationError(msg) from exception
    return parse_config(text, str(path))


def _value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _pairs(values: Any) -> str:
    return ",".join(f"{a}x{b}" for a, b in values)


def _section(name: str, entries: Mapping[str, str]) -> str:
    body = "".join(f"{key} = {value}\n" for key, value in entries.items())
    return f"[{name}]\n{body}"


def render_model_section(spec: ModelSpec) -> str:
    """Return the canonical `[model]` section for `spec`."""
    entries = {
        "kind": spec.kind,
        "frames": _value(spec.frames),
        "mel_bins": _value(spec.mel_bins),
        "num_classes": _value(spec.num_classes),
        "widths": ",".join(repr(w) for w in spec.widths),
    }
    if spec.kind == "cnn":
        entries |= {
            "kernels": _pairs(row.kernel for row in spec.conv_rows),
            "channels": ",".join(str(row.channels) for row in spec.conv_rows),
            "strides": _pairs(row.stride for row in spec.conv_rows),
            "pools": _pairs(row.pool for row in spec.conv_rows),
            "slim_last_conv": _value(spec.slim_last_conv),
        }
    else:
        entries |= {
            key: _value(getattr(spec, key))
            for key in ("dim", "mlp_dim", "heads", "layers", "embed_dim", "slim_embedding", "pooling")
        }
    entries["seed"] = _value(spec.seed)
    return _section("model", entries)


def render_config(config: Config) -> str:
    """Return canonical INI text; `parse_config(render_config(c)) == c`."""
    train, opt = config.train, config.train.optimizer
    train_entries = {
        "epochs": _value(train.epochs),
        "batch_size": _value(train.batch_size),
        "optimizer": opt.name,
        "lr": _value(opt.lr),
        "beta1": _value(opt.betas[0]),
        "beta2": _value(opt.betas[1]),
        "eps": _value(opt.eps),
        "momentum": _value(opt.momentum),
        "weight_decay": _value(opt.weight_decay),
        "schedule": opt.schedule,
        "seed": _value(train.seed),
        "eval_every": _value(train.eval_every),
        "log_every": _value(train.log_every),
        "target_miss": _value(train.target_miss),
        "prefetch": _value(train.prefetch),
    }
    data = config.data
    data_entries = {
        "source": data.source,
        "root": _value(data.root),
        "classes": ",".join(data.classes),
        "synth_classes": _value(data.synth_classes),
        "synth_per_class": _value(data.synth_per_class),
        "synth_seed": _value(data.synth_seed),
        "validation_fraction": _value(data.validation_fraction),
        "cache": _value(data.cache),
        "positive_label": _value(data.positive_label),
    }
    feature_entries = {f.name: _value(getattr(config.features, f.name)) for f in fields(config.features)}
    profile = config.profile
    profile_entries = {
        "width_counts": ",".join(str(n) for n in profile.width_counts),
        "batch_size": _value(profile.batch_size),
        "warmup_steps": _value(profile.warmup_steps),
        "timed_steps": _value(profile.timed_steps),
    }
    return "\n".join(
        [
            render_model_section(config.model),
            _section("train", train_entries),
            _section("data", data_entries),
            _section("features", feature_entries),
            _section("profile", profile_entries),
        ]
    )


def validate_paths(config: Config, *, needs_data: bool = True) -> None:
    """Check every path the run will read or write before any work starts."""
    data = config.data
    if needs_data and data.source == "speech_commands" and (data.root is None or not data.root.is_dir()):
        msg = f"Dataset root {data.root} does not exist or is not a directory"
        raise ConfigurationError(msg)
    if data.cache is not None and not data.cache.parent.is_dir():
        msg = f"Feature cache directory {data.cache.parent} does not exist"
        raise ConfigurationError(msg)
