"""Slimmable CNN and transformer keyword-spotting networks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from . import ops
from .const import DEFAULT_WIDTHS, LOGGER
from .exceptions import BuildError, ConfigurationError, ShapeError
from .layers import (
    LayerCost,
    SlimContext,
    SlimConv2d,
    SlimDense,
    SlimNetwork,
    SlimTransformerBlock,
    SwitchableNorm,
    WidthList,
    ac,
    set_active_width,
    truncated_normal_init,
)
from .tensor import Parameter, Tensor, concat, no_grad

type ModelKind = Literal["cnn", "transformer"]
type Pooling = Literal["cls", "mean"]


@dataclass(frozen=True)
class ConvRow:
    """One convolution row: kernel, output channels, stride and max-pool window."""

    kernel: tuple[int, int]
    channels: int
    stride: tuple[int, int] = (1, 1)
    pool: tuple[int, int] = (1, 1)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a slimmable network."""

    kind: ModelKind
    frames: int
    mel_bins: int
    num_classes: int
    widths: WidthList = field(default_factory=lambda: WidthList(DEFAULT_WIDTHS))
    conv_rows: tuple[ConvRow, ...] = ()
    slim_last_conv: bool = True
    dim: int = 64
    mlp_dim: int = 128
    heads: int = 1
    layers: int = 3
    embed_dim: int | None = None
    slim_embedding: bool = False
    pooling: Pooling = "cls"
    seed: int = 0

    def __post_init__(self) -> None:
        """Reject non-positive extents and unknown options."""
        if self.kind not in ("cnn", "transformer"):
            msg = f"Unknown model kind {self.kind!r}"
            raise ConfigurationError(msg)
        if min(self.frames, self.mel_bins) < 1 or self.num_classes < 2:  # noqa: PLR2004
            msg = (
                f"Model input {self.frames}x{self.mel_bins} and {self.num_classes} classes "
                "must be positive (at least two classes)"
            )
            raise ConfigurationError(msg)
        if self.kind == "cnn":
            if not self.conv_rows:
                msg = "CNN spec needs at least one conv row"
                raise ConfigurationError(msg)
            for index, row in enumerate(self.conv_rows):
                if min(*row.kernel, row.channels, *row.stride, *row.pool) < 1:
                    msg = f"conv{index}: all extents must be positive, got {row}"
                    raise ConfigurationError(msg)
        else:
            if min(self.dim, self.mlp_dim, self.heads) < 1 or self.layers < 0:
                msg = "Transformer dim, mlp_dim and heads must be positive, layers non-negative"
                raise ConfigurationError(msg)
            if self.pooling not in ("cls", "mean"):
                msg = f"Unknown pooling {self.pooling!r}, expected 'cls' or 'mean'"
                raise ConfigurationError(msg)
            if self.slim_embedding and self.embed_dim not in (None, self.dim):
                msg = "A width-sliced embedding must have embed_dim equal to dim"
                raise ConfigurationError(msg)

    @property
    def embedding_dim(self) -> int:
        """Return the token embedding width."""
        return self.embed_dim or self.dim

    @property
    def tokens(self) -> int:
        """Return the sequence length seen by the transformer blocks."""
        return self.frames + (1 if self.pooling == "cls" else 0)

    def conv_channels(self, width: float) -> list[int]:
        """Return the active output channels of every conv row at `width`."""
        last = len(self.conv_rows) - 1
        return [
            row.channels if index == last and not self.slim_last_conv else ac(row.channels, width)
            for index, row in enumerate(self.conv_rows)
        ]

    def for_width(self, width: float) -> ModelSpec:
        """Return the single-width spec of the sub-network extracted at `width`."""
        self.widths.index(width)
        single = WidthList((1.0,))
        if self.kind == "cnn":
            rows = tuple(
                replace(row, channels=channels)
                for row, channels in zip(self.conv_rows, self.conv_channels(width), strict=True)
            )
            return replace(self, widths=single, conv_rows=rows)
        embed = ac(self.dim, width) if self.slim_embedding else self.embedding_dim
        return replace(
            self,
            widths=single,
            dim=ac(self.dim, width),
            mlp_dim=ac(self.mlp_dim, width),
            embed_dim=embed,
        )


WAKEWORD_CNN_ROWS = (
    ConvRow((5, 4), 32, (1, 2), (2, 1)),
    ConvRow((3, 4), 32, (1, 3), (2, 1)),
    ConvRow((4, 4), 40, (1, 2), (2, 1)),
    ConvRow((7, 4), 128, (1, 1), (1, 1)),
    ConvRow((1, 1), 160, (1, 1), (1, 1)),
)

DESK_CNN_ROWS = (
    ConvRow((5, 3), 16, (1, 1), (2, 2)),
    ConvRow((3, 3), 24, (1, 1), (2, 2)),
    ConvRow((3, 3), 32, (1, 1), (1, 1)),
)

PRESETS: dict[str, ModelSpec] = {
    "cnn-wakeword": ModelSpec(
        kind="cnn", frames=76, mel_bins=64, num_classes=2, conv_rows=WAKEWORD_CNN_ROWS
    ),
    "cnn-desk": ModelSpec(kind="cnn", frames=76, mel_bins=20, num_classes=4, conv_rows=DESK_CNN_ROWS),
    "transformer-inhouse": ModelSpec(
        kind="transformer", frames=182, mel_bins=64, num_classes=2, dim=64, mlp_dim=128, heads=1, layers=3
    ),
    "transformer-speech-commands": ModelSpec(
        kind="transformer", frames=98, mel_bins=64, num_classes=35, dim=64, mlp_dim=64, heads=1, layers=2
    ),
}


def preset(name: str) -> ModelSpec:
    """Return a named preset spec."""
    try:
        return PRESETS[name]
    except KeyError as exception:
        msg = f"Unknown model preset {name!r}, expected one of {sorted(PRESETS)}"
        raise ConfigurationError(msg) from exception


class SlimCNN(SlimNetwork):
    """Conv rows with switchable batch norm, global average pooling and a fixed-output classifier."""

    def __init__(self, spec: ModelSpec) -> None:
        """Build the layers, checking every row fits the incoming spatial extent."""
        self.spec = spec
        self.context = SlimContext(spec.widths)
        rng = np.random.default_rng(spec.seed)
        height, width = spec.frames, spec.mel_bins
        in_channels = 1
        last = len(spec.conv_rows) - 1
        self.convs: list[SlimConv2d] = []
        self.norms: list[SwitchableNorm] = []
        for index, row in enumerate(spec.conv_rows):
            name = f"conv{index}"
            if row.kernel[0] > height or row.kernel[1] > width:
                msg = f"{name}: kernel {row.kernel} larger than its {height}x{width} input"
                raise BuildError(msg)
            slim_output = index != last or spec.slim_last_conv
            conv = SlimConv2d(
                in_channels,
                row.channels,
                row.kernel,
                row.stride,
                slim_input=index > 0,
                slim_output=slim_output,
                rng=rng,
                name=name,
            )
            height, width = conv.output_size(height, width)
            if row.pool[0] > height or row.pool[1] > width:
                msg = f"{name}: pool {row.pool} larger than its {height}x{width} output"
                raise BuildError(msg)
            height, width = height // row.pool[0], width // row.pool[1]
            self.convs.append(conv)
            extents = [conv.active_channels(w)[1] for w in spec.widths]
            self.norms.append(SwitchableNorm("batch", extents, name=f"norm{index}"))
            in_channels = row.channels
        self.classifier = SlimDense(
            in_channels,
            spec.num_classes,
            slim_input=spec.slim_last_conv,
            slim_output=False,
            rng=rng,
            name="classifier",
        )

    def __call__(self, x: Tensor) -> Tensor:
        """Return logits for an (N, frames, mel_bins) batch."""
        ctx = self.context
        n, frames, mels = x.shape
        h = x.reshape(n, 1, frames, mels)
        for conv, norm, row in zip(self.convs, self.norms, self.spec.conv_rows, strict=True):
            h = ops.relu(norm(conv(h, ctx), ctx))
            if row.pool != (1, 1):
                h = ops.max_pool2d(h, row.pool)
        return self.classifier(h.mean(axis=(2, 3)), ctx)

    def layer_costs(self, ctx: SlimContext) -> list[LayerCost]:
        """Return per-layer params, multiplies and output shapes for one example at `ctx`."""
        costs: list[LayerCost] = []
        shapes = self.active_parameter_shapes(ctx)
        height, width = self.spec.frames, self.spec.mel_bins
        for index, (conv, row) in enumerate(zip(self.convs, self.spec.conv_rows, strict=True)):
            multiplies = conv.multiplies(ctx.width, height, width)
            height, width = conv.output_size(height, width)
            height, width = height // row.pool[0], width // row.pool[1]
            channels = conv.active_channels(ctx.width)[1]
            costs.append(
                LayerCost(
                    conv.name,
                    _count(shapes, f"convs.{index}.") + _count(shapes, f"norms.{index}."),
                    multiplies,
                    (channels, height, width),
                )
            )
        costs.append(
            LayerCost(
                "classifier",
                _count(shapes, "classifier."),
                self.classifier.multiplies(ctx.width),
                (self.spec.num_classes,),
            )
        )
        return costs


class SlimTransformer(SlimNetwork):
    """Frame-token transformer with a class token (or mean readout) and a fixed-output classifier."""

    def __init__(self, spec: ModelSpec) -> None:
        """Build the stem, blocks, final norm and classifier in that order."""
        self.spec = spec
        self.context = SlimContext(spec.widths)
        rng = np.random.default_rng(spec.seed)
        embed = spec.embedding_dim
        self.token_embed = SlimDense(
            spec.mel_bins,
            embed,
            slim_input=False,
            slim_output=spec.slim_embedding,
            rng=rng,
            name="token_embed",
        )
        if spec.pooling == "cls":
            self.cls_token = Parameter(truncated_normal_init(rng, (1, 1, embed)), name="cls_token")
        self.pos_embed = Parameter(
            truncated_normal_init(rng, (1, spec.tokens, embed)), name="pos_embed"
        )
        self.blocks = [
            SlimTransformerBlock(
                embed if index == 0 else spec.dim,
                spec.dim,
                spec.mlp_dim,
                spec.heads,
                spec.widths,
                slim_input=index > 0 or spec.slim_embedding,
                rng=rng,
                name=f"block{index}",
            )
            for index in range(spec.layers)
        ]
        stream, slim_stream = (spec.dim, True) if spec.layers else (embed, spec.slim_embedding)
        self.norm = SwitchableNorm(
            "layer", [ac(stream, w) if slim_stream else stream for w in spec.widths], name="norm"
        )
        self.classifier = SlimDense(
            stream, spec.num_classes, slim_input=slim_stream, slim_output=False, rng=rng, name="classifier"
        )

    def active_embed(self, width: float) -> int:
        """Return the active token embedding width."""
        return self.token_embed.active_features(width)[1]

    def active_shapes(
        self, ctx: SlimContext, *, all_norm_sets: bool = False
    ) -> dict[str, tuple[int, ...]]:
        """Return extents of the class token and positional table."""
        del all_norm_sets
        embed = self.active_embed(ctx.width)
        shapes = {"pos_embed": (1, self.spec.tokens, embed)}
        if self.spec.pooling == "cls":
            shapes = {"cls_token": (1, 1, embed), **shapes}
        return shapes

    def __call__(self, x: Tensor) -> Tensor:
        """Return logits for an (N, frames, mel_bins) batch."""
        ctx = self.context
        n = x.shape[0]
        embed = self.active_embed(ctx.width)
        h = self.token_embed(x, ctx)
        if self.spec.pooling == "cls":
            cls = self.cls_token.take(1, 1, embed) + Tensor(np.zeros((n, 1, 1)))
            h = concat([cls, h], axis=1)
        h = h + self.pos_embed.take(1, self.spec.tokens, embed)
        for block in self.blocks:
            h = block(h, ctx)
        h = self.norm(h, ctx)
        pooled = h[:, 0, :] if self.spec.pooling == "cls" else h.mean(axis=1)
        return self.classifier(pooled, ctx)

    def layer_costs(self, ctx: SlimContext) -> list[LayerCost]:
        """Return per-layer params, multiplies and output shapes for one example at `ctx`."""
        shapes = self.active_parameter_shapes(ctx)
        tokens = self.spec.tokens
        embed = self.active_embed(ctx.width)
        costs = [
            LayerCost(
                "embedding",
                _count(shapes, "token_embed.")
                + _count(shapes, "cls_token")
                + _count(shapes, "pos_embed"),
                self.token_embed.multiplies(ctx.width, self.spec.frames),
                (tokens, embed),
            )
        ]
        dim = ac(self.spec.dim, ctx.width)
        costs.extend(
            LayerCost(
                block.name,
                _count(shapes, f"blocks.{index}."),
                block.multiplies(ctx.width, tokens),
                (tokens, dim),
            )
            for index, block in enumerate(self.blocks)
        )
        costs.append(
            LayerCost(
                "classifier",
                _count(shapes, "norm.") + _count(shapes, "classifier."),
                self.classifier.multiplies(ctx.width),
                (self.spec.num_classes,),
            )
        )
        return costs


def _count(shapes: dict[str, tuple[int, ...]], prefix: str) -> int:
    return sum(int(np.prod(shape)) for name, shape in shapes.items() if name.startswith(prefix))


type SlimModel = SlimCNN | SlimTransformer


def build_cnn(spec: ModelSpec) -> SlimCNN:
    """Build a slimmable CNN from a `cnn` spec."""
    if spec.kind != "cnn":
        msg = f"build_cnn needs a cnn spec, got {spec.kind!r}"
        raise ConfigurationError(msg)
    return SlimCNN(spec)


def build_transformer(spec: ModelSpec) -> SlimTransformer:
    """Build a slimmable transformer from a `transformer` spec."""
    if spec.kind != "transformer":
        msg = f"build_transformer needs a transformer spec, got {spec.kind!r}"
        raise ConfigurationError(msg)
    return SlimTransformer(spec)


def build_model(spec: ModelSpec) -> SlimModel:
    """Build the network described by `spec`."""
    model = build_cnn(spec) if spec.kind == "cnn" else build_transformer(spec)
    LOGGER.debug(
        "Built %s with %d parameter tensors, widths %s",
        spec.kind,
        len(model.parameters()),
        spec.widths,
    )
    return model


def forward(model: SlimModel, batch: Tensor | np.ndarray, width: float | None = None) -> Tensor:
    """Run `batch` through `model` at `width` (default: the active width), returning logits."""
    if width is not None:
        set_active_width(model, width)
    spec = model.spec
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.ndim != 3 or batch.shape[1:] != (spec.frames, spec.mel_bins):  # noqa: PLR2004
        msg = f"Expected a (N, {spec.frames}, {spec.mel_bins}) batch, got {batch.shape}"
        raise ShapeError(msg)
    return model(batch)


def extract_subnetwork(model: SlimModel, width: float) -> SlimModel:
    """Return a standalone single-width copy of `model` at `width`."""
    ctx = model.context_at(width)
    source_shapes = model.active_parameter_shapes(ctx)
    source_params = dict(model.named_parameters())
    source_buffers = dict(model.named_buffers())

    with no_grad():
        sub = build_model(model.spec.for_width(width))
    sub.context.training = model.context.training

    def source_name(name: str) -> str:
        return name.replace(".sets.0.", f".sets.{ctx.width_index}.")

    for name, param in sub.named_parameters():
        origin = source_name(name)
        extents = source_shapes[origin]
        if param.shape != extents:
            msg = f"{name}: extracted shape {param.shape} differs from active slice {extents}"
            raise BuildError(msg)
        param.data[...] = source_params[origin].data[tuple(slice(0, e) for e in extents)]
    for name, buffer in sub.named_buffers():
        buffer[...] = source_buffers[source_name(name)]

    LOGGER.info("Extracted %s sub-network at width %g", model.spec.kind, width)
    return sub
