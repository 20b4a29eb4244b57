"""Reverse-mode automatic differentiation for slimkws."""

from __future__ import annotations

import os
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from typing import Any

import numpy as np

from .const import ENV_DEBUG
from .exceptions import ContractError, NonFiniteError

# Finiteness assertions are a debug-mode cost only
DEBUG_CHECKS_ENABLED = os.environ.get(ENV_DEBUG, "").lower() in ("1", "true", "yes")

type BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_PRECISIONS: dict[str, type[np.floating]] = {
    "f32": np.float32,
    "f64": np.float64,
}


class _EngineState:
    """Process-wide switches read by every op."""

    def __init__(self) -> None:
        self.dtype: type[np.floating] = np.float32
        self.grad_enabled = True
        self.debug_checks = DEBUG_CHECKS_ENABLED
        self.counters: list[MultiplyCounter] = []


_STATE = _EngineState()


def default_dtype() -> type[np.floating]:
    """Return the float type new tensors are created with."""
    return _STATE.dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Create tensors in `f32` or `f64` inside the block."""
    try:
        dtype = _PRECISIONS[name]
    except KeyError as exception:
        msg = f"Unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}"
        raise ValueError(msg) from exception
    previous = _STATE.dtype
    _STATE.dtype = dtype
    try:
        yield
    finally:
        _STATE.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


def is_grad_enabled() -> bool:
    """Return whether ops currently record a graph."""
    return _STATE.grad_enabled


def set_debug_checks(*, enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every op output."""
    _STATE.debug_checks = enabled


class MultiplyCounter:
    """Tally scalar multiplies of matmul-family ops run inside a `with` block."""

    def __init__(self) -> None:
        """Initialize an empty tally."""
        self.total = 0

    def __enter__(self) -> MultiplyCounter:
        """Start counting."""
        _STATE.counters.append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        """Stop counting."""
        _STATE.counters.remove(self)


def record_multiplies(count: int) -> None:
    """Add `count` multiplies to every active counter."""
    for counter in _STATE.counters:
        counter.total += count


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Tensor:
    """Dense array with an optional gradient buffer and a recorded producer."""

    __slots__ = ("_backward", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        """Wrap `data` as a leaf tensor in the current precision."""
        self.data: np.ndarray = np.asarray(data, dtype=_STATE.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward_fn: BackwardFn,
    ) -> Tensor:
        """Create an op result, recording the graph edge when any parent needs grad."""
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=_STATE.dtype)
        out.grad = None
        out.name = None
        needs_grad = _STATE.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs_grad
        out._parents = tuple(parents) if needs_grad else ()
        out._backward = backward_fn if needs_grad else None
        if _STATE.debug_checks and not np.all(np.isfinite(out.data)):
            msg = f"non-finite values produced by {getattr(backward_fn, '__qualname__', 'op')}"
            raise NonFiniteError(msg)
        return out

    def __repr__(self) -> str:
        """Return a short description."""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the extents."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Return the rank."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Return the element count."""
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        """Return whether this tensor was not produced by a recorded op."""
        return self._backward is None

    def item(self) -> float:
        """Return the single value of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar into every reachable leaf."""
        backward(self)

    def __add__(self, other: Tensor | float) -> Tensor:
        """Elementwise sum with broadcasting."""
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        """Elementwise difference with broadcasting."""
        return add(self, -as_tensor(other))

    def __rsub__(self, other: Tensor | float) -> Tensor:
        """Reflected difference."""
        return add(as_tensor(other), -self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        """Elementwise product with broadcasting."""
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> Tensor:
        """Divide by a constant."""
        return mul(self, 1.0 / other)

    def __neg__(self) -> Tensor:
        """Negate."""
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        """Matrix product."""
        from .ops import matmul  # noqa: PLC0415

        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        """Basic (slice/int) indexing."""
        return getitem(self, index)

    def sum(self, axis: int | Sequence[int] | None = None, *, keepdims: bool = False) -> Tensor:
        """Sum over `axis`."""
        return reduce_sum(self, axis, keepdims=keepdims)

    def mean(self, axis: int | Sequence[int] | None = None, *, keepdims: bool = False) -> Tensor:
        """Mean over `axis`."""
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return reduce_sum(self, axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> Tensor:
        """Return the same values with a new shape."""
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        """Permute axes."""
        return transpose(self, axes)


class Parameter(Tensor):
    """Trainable leaf that remembers the leading extent read during a step."""

    __slots__ = ("touched",)

    def __init__(self, data: Any, *, name: str | None = None) -> None:
        """Wrap `data` as a trainable leaf."""
        super().__init__(data, requires_grad=True, name=name)
        self.touched: tuple[int, ...] | None = None

    def take(self, *extents: int) -> Tensor:
        """Return the leading block `self[:e0, :e1, ...]` as a differentiable view."""
        if len(extents) != self.ndim:
            msg = f"{self.name}: expected {self.ndim} extents, got {extents}"
            raise ContractError(msg)
        if any(e < 1 or e > full for e, full in zip(extents, self.shape, strict=True)):
            msg = f"{self.name}: extents {extents} outside {self.shape}"
            raise ContractError(msg)
        if _STATE.grad_enabled:
            self.touched = (
                extents
                if self.touched is None
                else tuple(max(a, b) for a, b in zip(self.touched, extents, strict=True))
            )
        region = tuple(slice(0, e) for e in extents)
        return getitem(self, region)

    def zero_grad(self) -> None:
        """Drop the gradient and the touched extent."""
        self.grad = None
        self.touched = None


def as_tensor(value: Tensor | float | np.ndarray) -> Tensor:
    """Wrap constants so they can enter an op."""
    return value if isinstance(value, Tensor) else Tensor(value)


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise sum with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), _backward)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        grad_a = unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
        grad_b = unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
        return grad_a, grad_b

    return Tensor.from_op(a.data * b.data, (a, b), _backward)


def reduce_sum(
    x: Tensor, axis: int | Sequence[int] | None = None, *, keepdims: bool = False
) -> Tensor:
    """Sum over `axis`."""
    axes = _normalize_axes(axis, x.ndim)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, x.shape).copy(),)

    return Tensor.from_op(x.data.sum(axis=axes, keepdims=keepdims), (x,), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Return the same values with a new shape."""

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(x.shape),)

    return Tensor.from_op(x.data.reshape(tuple(shape)), (x,), _backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes, returning a contiguous result."""
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.ascontiguousarray(grad.transpose(inverse)),)

    return Tensor.from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), _backward)


def getitem(x: Tensor, index: Any) -> Tensor:
    """Basic indexing; gradient lands on the indexed block, zeros elsewhere."""

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        full[index] = grad
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(x.data[index]), (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along `axis`."""
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(grad: np.ndarray) -> list[np.ndarray]:
        return [np.ascontiguousarray(g) for g in np.split(grad, bounds, axis=axis)]

    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward
    )


def _topological_order(root: Tensor) -> list[Tensor]:
    """Return nodes reachable from `root`, every parent before its children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend(
            (parent, False)
            for parent in node._parents  # noqa: SLF001
            if parent.requires_grad and id(parent) not in visited
        )
    return order


def backward(root: Tensor) -> None:
    """
    Backpropagate from a scalar root.

    Leaf gradients accumulate (`+=`) across calls, so running backward for several
    losses without zeroing sums their gradients.
    """
    if root.size != 1:
        msg = f"backward needs a scalar root, got shape {root.shape}"
        raise ContractError(msg)
    if not root.requires_grad:
        msg = "backward root is not connected to a recorded graph"
        raise ContractError(msg)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:  # noqa: SLF001
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._backward(grad)  # noqa: SLF001
        for parent, parent_grad in zip(node._parents, parent_grads, strict=True):  # noqa: SLF001
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
