"""Slimmable layer primitives: width bookkeeping, prefix slicing, switchable norms, attention."""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import ops
from .const import EMBEDDING_INIT_STD, LOGGER
from .exceptions import BuildError, CheckpointError, ConfigurationError, ContractError, ShapeError
from .tensor import Parameter, Tensor, default_dtype

type NormKind = Literal["batch", "layer"]


def ac(max_extent: int, width: float) -> int:
    """Return the active extent of a `max_extent`-wide axis at `width` (round half up, at least 1)."""
    return max(1, math.floor(max_extent * width + 0.5))


@dataclass(frozen=True)
class WidthList:
    """Ordered width multipliers defining the executable sub-networks."""

    widths: tuple[float, ...]

    def __post_init__(self) -> None:
        """Validate the list."""
        widths = tuple(float(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if not widths:
            msg = "Width list is empty"
            raise ConfigurationError(msg)
        if widths[0] != 1.0:
            msg = f"Width list must start at 1.0, got {widths}"
            raise ConfigurationError(msg)
        if any(not 0.0 < w <= 1.0 for w in widths):
            msg = f"Widths must lie in (0, 1], got {widths}"
            raise ConfigurationError(msg)
        if any(a <= b for a, b in zip(widths, widths[1:], strict=False)):
            msg = f"Widths must be distinct and strictly descending, got {widths}"
            raise ConfigurationError(msg)

    @classmethod
    def evenly_spaced(cls, count: int) -> WidthList:
        """Return `[1, (n-1)/n, ..., 1/n]`."""
        if count < 1:
            msg = f"Width count must be >= 1, got {count}"
            raise ConfigurationError(msg)
        return cls(tuple((count - k) / count for k in range(count)))

    def __iter__(self) -> Iterator[float]:
        """Iterate widths, largest first."""
        return iter(self.widths)

    def __len__(self) -> int:
        """Return the number of widths."""
        return len(self.widths)

    def __getitem__(self, index: int) -> float:
        """Return the width at `index`."""
        return self.widths[index]

    def __contains__(self, width: object) -> bool:
        """Return whether `width` is a member."""
        return isinstance(width, int | float) and self._find(float(width)) is not None

    def _find(self, width: float) -> int | None:
        for position, member in enumerate(self.widths):
            if math.isclose(member, width, rel_tol=0.0, abs_tol=1e-9):
                return position
        return None

    def index(self, width: float) -> int:
        """Return the position of `width`, rejecting non-members."""
        position = self._find(float(width))
        if position is None:
            valid = ", ".join(f"{w:g}" for w in self.widths)
            msg = f"Width {width:g} is not configured; valid widths: {valid}"
            raise ConfigurationError(msg)
        return position

    def __str__(self) -> str:
        """Return the comma-separated form used in config files."""
        return ",".join(f"{w:g}" for w in self.widths)


@dataclass
class SlimContext:
    """Active width of a network plus its train/eval mode."""

    widths: WidthList
    width_index: int = 0
    training: bool = True

    @property
    def width(self) -> float:
        """Return the active width multiplier."""
        return self.widths[self.width_index]


@dataclass(frozen=True)
class LayerCost:
    """Per-layer cost row at one width."""

    name: str
    params: int
    multiplies: int
    output_shape: tuple[int, ...]


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def truncated_normal_init(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = EMBEDDING_INIT_STD
) -> np.ndarray:
    """Draw from N(0, std) redrawing values beyond two standard deviations."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2.0 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2.0 * std
    return values


class SlimModule:
    """
    Base class for weight holders.

    Parameters, buffers and child modules are discovered from instance
    attributes in assignment order, which fixes both the initialization order
    and the naming used by state dicts (`blocks.0.attention.wq.weight`).
    """

    def buffer_names(self) -> tuple[str, ...]:
        """Return the attributes holding non-trainable state arrays."""
        return ()

    def children(self) -> Iterator[tuple[str, SlimModule]]:
        """Yield direct child modules, expanding lists as `name.index`."""
        for name, value in vars(self).items():
            if isinstance(value, SlimModule):
                yield name, value
            elif isinstance(value, list):
                for index, item in enumerate(value):
                    if isinstance(item, SlimModule):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Yield every parameter with its dotted name."""
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Yield every non-trainable state array with its dotted name."""
        for name in self.buffer_names():
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        """Return every parameter."""
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        """Drop gradients and touched extents of every parameter."""
        for param in self.parameters():
            param.zero_grad()

    def active_shapes(
        self, ctx: SlimContext, *, all_norm_sets: bool = False
    ) -> dict[str, tuple[int, ...]]:
        """Return the extents of this module's own parameters read at `ctx`."""
        del ctx, all_norm_sets
        return {}

    def active_parameter_shapes(
        self, ctx: SlimContext, *, all_norm_sets: bool = False, prefix: str = ""
    ) -> dict[str, tuple[int, ...]]:
        """Return the extents of every parameter a forward at `ctx` reads."""
        shapes = {
            prefix + name: shape
            for name, shape in self.active_shapes(ctx, all_norm_sets=all_norm_sets).items()
        }
        for name, child in self.children():
            shapes.update(
                child.active_parameter_shapes(
                    ctx, all_norm_sets=all_norm_sets, prefix=f"{prefix}{name}."
                )
            )
        return shapes

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return copies of every parameter and buffer keyed by name."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy values into existing parameters and buffers; names and shapes must match."""
        targets: dict[str, np.ndarray] = {n: p.data for n, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            msg = f"State does not match model: missing {missing[:5]}, unexpected {unexpected[:5]}"
            raise CheckpointError(msg)
        for name, target in targets.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                msg = f"{name}: stored shape {value.shape} does not match model {target.shape}"
                raise CheckpointError(msg)
            target[...] = value


class SlimDense(SlimModule):
    """Dense layer whose input and/or output features are prefix-sliced by width."""

    def __init__(  # noqa: PLR0913
        self,
        in_features: int,
        out_features: int,
        *,
        slim_input: bool,
        slim_output: bool,
        rng: np.random.Generator,
        name: str = "dense",
    ) -> None:
        """Initialize with fan-in scaled uniform weights and bias."""
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.slim_input = slim_input
        self.slim_output = slim_output
        self.weight = Parameter(
            uniform_init(rng, (out_features, in_features), in_features), name=f"{name}.weight"
        )
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features), name=f"{name}.bias")

    def active_features(self, width: float) -> tuple[int, int]:
        """Return (in, out) feature counts at `width`."""
        return (
            ac(self.in_features, width) if self.slim_input else self.in_features,
            ac(self.out_features, width) if self.slim_output else self.out_features,
        )

    def active_shapes(
        self, ctx: SlimContext, *, all_norm_sets: bool = False
    ) -> dict[str, tuple[int, ...]]:
        """Return the weight and bias extents at `ctx`."""
        del all_norm_sets
        d_in, d_out = self.active_features(ctx.width)
        return {"weight": (d_out, d_in), "bias": (d_out,)}

    def multiplies(self, width: float, rows: int = 1) -> int:
        """Return scalar multiplies for `rows` input vectors."""
        d_in, d_out = self.active_features(width)
        return rows * d_in * d_out

    def __call__(self, x: Tensor, ctx: SlimContext) -> Tensor:
        """Apply the active slice to the last axis of `x`."""
        d_in, d_out = self.active_features(ctx.width)
        if x.shape[-1] != d_in:
            msg = f"{self.name}: expected {d_in} input features at width {ctx.width:g}, got {x.shape}"
            raise ShapeError(msg)
        return ops.linear(x, self.weight.take(d_out, d_in), self.bias.take(d_out))


class SlimConv2d(SlimModule):
    """Convolution whose input and/or output channels are prefix-sliced by width."""

    def __init__(  # noqa: PLR0913
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int],
        stride: tuple[int, int],
        *,
        slim_input: bool,
        slim_output: bool,
        rng: np.random.Generator,
        name: str = "conv",
    ) -> None:
        """Initialize with fan-in scaled uniform weights and bias."""
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.slim_input = slim_input
        self.slim_output = slim_output
        fan_in = in_channels * kernel[0] * kernel[1]
        self.weight = Parameter(
            uniform_init(rng, (out_channels, in_channels, *kernel), fan_in), name=f"{name}.weight"
        )
        self.bias = Parameter(uniform_init(rng, (out_channels,), fan_in), name=f"{name}.bias")

    def active_channels(self, width: float) -> tuple[int, int]:
        """Return (in, out) channel counts at `width`."""
        return (
            ac(self.in_channels, width) if self.slim_input else self.in_channels,
            ac(self.out_channels, width) if self.slim_output else self.out_channels,
        )

    def active_shapes(
        self, ctx: SlimContext, *, all_norm_sets: bool = False
    ) -> dict[str, tuple[int, ...]]:
        """Return the weight and bias extents at `ctx`."""
        del all_norm_sets
        c_in, c_out = self.active_channels(ctx.width)
        return {"weight": (c_out, c_in, *self.kernel), "bias": (c_out,)}

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        """Return the spatial extent produced from a `height` x `width` input."""
        (kh, kw), (sh, sw) = self.kernel, self.stride
        return (height - kh) // sh + 1, (width - kw) // sw + 1

    def multiplies(self, width: float, height: int, spatial_width: int) -> int:
        """Return scalar multiplies for one input of the given spatial extent."""
        c_in, c_out = self.active_channels(width)
        out_h, out_w = self.output_size(height, spatial_width)
        return out_h * out_w * self.kernel[0] * self.kernel[1] * c_in * c_out

    def __call__(self, x: Tensor, ctx: SlimContext) -> Tensor:
        """Convolve `x` with the active slice."""
        c_in, c_out = self.active_channels(ctx.width)
        if x.ndim != 4 or x.shape[1] != c_in:  # noqa: PLR2004
            msg = f"{self.name}: expected {c_in} input channels at width {ctx.width:g}, got {x.shape}"
            raise ShapeError(msg)
        return ops.conv2d(
            x,
            self.weight.take(c_out, c_in, *self.kernel),
            self.bias.take(c_out),
            self.stride,
        )


class NormSet(SlimModule):
    """One width's private normalization parameters (and statistics for batch norm)."""

    def __init__(self, kind: NormKind, features: int, name: str) -> None:
        """Initialize gamma=1, beta=0, running mean 0 and variance 1."""
        self.kind = kind
        self.features = features
        dtype = default_dtype()
        self.gamma = Parameter(np.ones(features, dtype=dtype), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(features, dtype=dtype), name=f"{name}.beta")
        if kind == "batch":
            self.running_mean = np.zeros(features, dtype=dtype)
            self.running_var = np.ones(features, dtype=dtype)

    def buffer_names(self) -> tuple[str, ...]:
        """Return the statistic buffers held by this set."""
        return ("running_mean", "running_var") if self.kind == "batch" else ()


class SwitchableNorm(SlimModule):
    """Batch or layer normalization holding one private parameter set per width."""

    def __init__(self, kind: NormKind, extents: Sequence[int], name: str = "norm") -> None:
        """Create one set per width, set `i` sized `extents[i]`."""
        self.name = name
        self.kind = kind
        self.sets = [
            NormSet(kind, features, f"{name}.sets.{index}")
            for index, features in enumerate(extents)
        ]

    def active_parameter_shapes(
        self, ctx: SlimContext, *, all_norm_sets: bool = False, prefix: str = ""
    ) -> dict[str, tuple[int, ...]]:
        """Return only the active set's extents unless `all_norm_sets`."""
        indices = range(len(self.sets)) if all_norm_sets else (ctx.width_index,)
        shapes: dict[str, tuple[int, ...]] = {}
        for index in indices:
            features = self.sets[index].features
            shapes[f"{prefix}sets.{index}.gamma"] = (features,)
            shapes[f"{prefix}sets.{index}.beta"] = (features,)
        return shapes

    def __call__(self, x: Tensor, ctx: SlimContext) -> Tensor:
        """Normalize with the set belonging to the active width."""
        norm_set = self.sets[ctx.width_index]
        features = x.shape[1] if self.kind == "batch" else x.shape[-1]
        if features != norm_set.features:
            msg = (
                f"{self.name}: set {ctx.width_index} holds {norm_set.features} features, "
                f"input has {features}"
            )
            raise ConfigurationError(msg)
        gamma = norm_set.gamma.take(features)
        beta = norm_set.beta.take(features)
        if self.kind == "batch":
            return ops.batch_norm(
                x,
                gamma,
                beta,
                norm_set.running_mean,
                norm_set.running_var,
                training=ctx.training,
            )
        return ops.layer_norm(x, gamma, beta)


class SlimAttention(SlimModule):
    """
    Self-attention with slimmed query/key/value/output projections.

    Projected features are laid out with the head index fastest, so the
    leading `heads * i` features hold the first `i` features of every head
    and prefix slicing shrinks each head's dimension uniformly.
    """

    def __init__(self, dim: int, heads: int, *, rng: np.random.Generator, name: str = "attention") -> None:
        """Create the four projections."""
        if dim % heads:
            msg = f"{name}: {heads} heads do not divide dim {dim}"
            raise BuildError(msg)
        self.name = name
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = SlimDense(dim, dim, slim_input=True, slim_output=True, rng=rng, name=f"{name}.wq")
        self.wk = SlimDense(dim, dim, slim_input=True, slim_output=True, rng=rng, name=f"{name}.wk")
        self.wv = SlimDense(dim, dim, slim_input=True, slim_output=True, rng=rng, name=f"{name}.wv")
        self.wo = SlimDense(dim, dim, slim_input=True, slim_output=True, rng=rng, name=f"{name}.wo")

    def active_head_dim(self, width: float) -> int:
        """Return the per-head feature count `i` at `width`."""
        return ac(self.head_dim, width)

    def check_widths(self, widths: Iterable[float]) -> None:
        """Reject widths at which the heads do not tile the active dim."""
        for width in widths:
            if self.heads * self.active_head_dim(width) != ac(self.dim, width):
                msg = (
                    f"{self.name}: {self.heads} heads x {self.active_head_dim(width)} "
                    f"!= active dim {ac(self.dim, width)} at width {width:g}"
                )
                raise BuildError(msg)

    def multiplies(self, width: float, tokens: int) -> int:
        """Return projection plus score/context multiplies for one sequence."""
        projections = sum(
            layer.multiplies(width, tokens) for layer in (self.wq, self.wk, self.wv, self.wo)
        )
        return projections + 2 * self.heads * tokens * tokens * self.active_head_dim(width)

    def _split_heads(self, x: Tensor, head_dim: int) -> Tensor:
        n, tokens, _ = x.shape
        return x.reshape(n, tokens, head_dim, self.heads).transpose(0, 3, 1, 2)

    def attend(self, x: Tensor, ctx: SlimContext) -> tuple[Tensor, Tensor]:
        """Return the attention output and the (N, heads, T, T) weights."""
        if x.ndim != 3:  # noqa: PLR2004
            msg = f"{self.name}: expected (N, T, D) input, got {x.shape}"
            raise ShapeError(msg)
        n, tokens, _ = x.shape
        if tokens == 0:
            msg = f"{self.name}: attention over an empty sequence"
            raise ContractError(msg)
        head_dim = self.active_head_dim(ctx.width)
        q = self._split_heads(self.wq(x, ctx), head_dim)
        k = self._split_heads(self.wk(x, ctx), head_dim)
        v = self._split_heads(self.wv(x, ctx), head_dim)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        weights = ops.softmax(scores)
        context = (weights @ v).transpose(0, 2, 3, 1).reshape(n, tokens, head_dim * self.heads)
        return self.wo(context, ctx), weights

    def __call__(self, x: Tensor, ctx: SlimContext) -> Tensor:
        """Return the attention output."""
        return self.attend(x, ctx)[0]


class SlimTransformerBlock(SlimModule):
    """Pre-norm transformer block with a slimmed input projection feeding the residual stream."""

    def __init__(  # noqa: PLR0913
        self,
        in_features: int,
        dim: int,
        mlp_dim: int,
        heads: int,
        widths: WidthList,
        *,
        slim_input: bool,
        rng: np.random.Generator,
        name: str = "block",
    ) -> None:
        """Create the projection, attention, mlp and both switchable layer norms."""
        self.name = name
        self.dim = dim
        extents = [ac(dim, w) for w in widths]
        self.input_proj = SlimDense(
            in_features, dim, slim_input=slim_input, slim_output=True, rng=rng, name=f"{name}.input_proj"
        )
        self.norm1 = SwitchableNorm("layer", extents, name=f"{name}.norm1")
        self.attention = SlimAttention(dim, heads, rng=rng, name=f"{name}.attention")
        self.attention.check_widths(widths)
        self.norm2 = SwitchableNorm("layer", extents, name=f"{name}.norm2")
        self.mlp_in = SlimDense(
            dim, mlp_dim, slim_input=True, slim_output=True, rng=rng, name=f"{name}.mlp_in"
        )
        self.mlp_out = SlimDense(
            mlp_dim, dim, slim_input=True, slim_output=True, rng=rng, name=f"{name}.mlp_out"
        )

    def multiplies(self, width: float, tokens: int) -> int:
        """Return multiplies for one sequence of `tokens` tokens."""
        return (
            self.input_proj.multiplies(width, tokens)
            + self.attention.multiplies(width, tokens)
            + self.mlp_in.multiplies(width, tokens)
            + self.mlp_out.multiplies(width, tokens)
        )

    def __call__(self, x: Tensor, ctx: SlimContext) -> Tensor:
        """Project, then apply both residual sub-blocks."""
        h = self.input_proj(x, ctx)
        h = h + self.attention(self.norm1(h, ctx), ctx)
        return h + self.mlp_out(ops.gelu(self.mlp_in(self.norm2(h, ctx), ctx)), ctx)


class SlimNetwork(SlimModule):
    """A slimmable model: modules plus the context selecting its active width."""

    context: SlimContext

    def train(self) -> None:
        """Use batch statistics and update running buffers."""
        self.context.training = True

    def eval(self) -> None:
        """Use running statistics."""
        self.context.training = False

    def active_parameter_shapes(
        self, ctx: SlimContext | None = None, *, all_norm_sets: bool = False, prefix: str = ""
    ) -> dict[str, tuple[int, ...]]:
        """Return parameter extents read at `ctx` (default: the current context)."""
        return super().active_parameter_shapes(
            ctx or self.context, all_norm_sets=all_norm_sets, prefix=prefix
        )

    def context_at(self, width: float) -> SlimContext:
        """Return a detached eval-mode context selecting `width`."""
        widths = self.context.widths
        return SlimContext(widths, widths.index(width), training=False)


def set_active_width(model: SlimNetwork, width: float) -> SlimContext:
    """Route subsequent forwards of `model` through `width`'s slices and norm sets."""
    ctx = model.context
    ctx.width_index = ctx.widths.index(width)
    LOGGER.debug("Active width set to %g (index %d)", ctx.width, ctx.width_index)
    return ctx
