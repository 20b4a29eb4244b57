"""Differentiable numeric primitives built on `slimkws.tensor`."""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .const import BATCH_NORM_EPS, BATCH_NORM_MOMENTUM, LAYER_NORM_EPS
from .exceptions import ConfigurationError, LabelIndexError, ShapeError
from .tensor import Tensor, record_multiplies, unbroadcast

type ActivationKind = Literal["relu", "gelu", "softmax", "log_softmax"]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:  # noqa: PLR2004
        msg = f"matmul: cannot multiply {a.shape} by {b.shape}"
        raise ShapeError(msg)
    out = np.matmul(a.data, b.data)
    record_multiplies(out.size * a.shape[-1])

    def _backward(grad: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            grad_b = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), b.shape)
        return grad_a, grad_b

    return Tensor.from_op(out, (a, b), _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply `x @ weight.T + bias` over the last axis of `x`."""
    out_features, in_features = weight.shape
    if x.shape[-1] != in_features:
        msg = f"linear: input {x.shape} does not match weight {weight.shape}"
        raise ShapeError(msg)
    if bias is not None and bias.shape != (out_features,):
        msg = f"linear: bias {bias.shape} does not match weight {weight.shape}"
        raise ShapeError(msg)
    rows = x.data.reshape(-1, in_features)
    flat = rows @ weight.data.T
    if bias is not None:
        flat = flat + bias.data
    record_multiplies(rows.shape[0] * in_features * out_features)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(grad: np.ndarray) -> list[np.ndarray | None]:
        grad_rows = grad.reshape(-1, out_features)
        grads: list[np.ndarray | None] = [
            (grad_rows @ weight.data).reshape(x.shape) if x.requires_grad else None,
            grad_rows.T @ rows if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(grad_rows.sum(axis=0))
        return grads

    return Tensor.from_op(flat.reshape(*x.shape[:-1], out_features), parents, _backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
) -> Tensor:
    """Valid (unpadded) cross-correlation of an NCHW batch with an OIHW kernel."""
    if x.ndim != 4 or weight.ndim != 4:  # noqa: PLR2004
        msg = f"conv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}"
        raise ShapeError(msg)
    n, channels, height, width = x.shape
    out_channels, in_channels, kh, kw = weight.shape
    sh, sw = stride
    if channels != in_channels:
        msg = f"conv2d: input {x.shape} has {channels} channels, kernel {weight.shape} expects {in_channels}"
        raise ShapeError(msg)
    if sh < 1 or sw < 1:
        msg = f"conv2d: strides must be >= 1, got {stride}"
        raise ConfigurationError(msg)
    if kh > height or kw > width:
        msg = f"conv2d: kernel {kh}x{kw} larger than input {height}x{width}"
        raise ConfigurationError(msg)

    out_h = (height - kh) // sh + 1
    out_w = (width - kw) // sw + 1
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    record_multiplies(n * out_h * out_w * kh * kw * in_channels * out_channels)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(grad: np.ndarray) -> list[np.ndarray | None]:
        grad_x = None
        if x.requires_grad:
            grad_x = np.zeros_like(x.data)
            rows_end = sh * (out_h - 1) + 1
            cols_end = sw * (out_w - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(grad, weight.data[:, :, i, j], axes=([1], [0]))
                    grad_x[:, :, i : i + rows_end : sh, j : j + cols_end : sw] += contrib.transpose(
                        0, 3, 1, 2
                    )
        grads: list[np.ndarray | None] = [
            grad_x,
            np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
            if weight.requires_grad
            else None,
        ]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    return Tensor.from_op(out, parents, _backward)


def max_pool2d(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    ph, pw = pool
    if ph < 1 or pw < 1:
        msg = f"max_pool2d: pool extents must be >= 1, got {pool}"
        raise ConfigurationError(msg)
    n, channels, height, width = x.shape
    out_h, out_w = height // ph, width // pw
    if out_h == 0 or out_w == 0:
        msg = f"max_pool2d: pool {ph}x{pw} larger than input {height}x{width}"
        raise ConfigurationError(msg)

    cropped = x.data[:, :, : out_h * ph, : out_w * pw]
    windows = (
        cropped.reshape(n, channels, out_h, ph, out_w, pw)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, channels, out_h, out_w, ph * pw)
    )
    # argmax returns the first maximum, i.e. the lowest flat index in the window
    winners = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, winners, axis=-1)[..., 0]

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, winners, grad[..., None], axis=-1)
        routed = (
            routed.reshape(n, channels, out_h, out_w, ph, pw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, channels, out_h * ph, out_w * pw)
        )
        full = np.zeros_like(x.data)
        full[:, :, : out_h * ph, : out_w * pw] = routed
        return (full,)

    return Tensor.from_op(out, (x,), _backward)


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit."""
    mask = x.data > 0

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * mask,)

    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), _backward)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + _GELU_K * v**3)
    t = np.tanh(inner)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * v**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner),)

    return Tensor.from_op(0.5 * v * (1.0 + t), (x,), _backward)


def _stable_softmax(values: np.ndarray) -> np.ndarray:
    shifted = np.exp(values - values.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.shape[-1] < 1:
        msg = f"softmax: empty last axis in {x.shape}"
        raise ShapeError(msg)
    probs = _stable_softmax(x.data)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(probs, (x,), _backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log of the softmax over the last axis."""
    if x.shape[-1] < 1:
        msg = f"log_softmax: empty last axis in {x.shape}"
        raise ShapeError(msg)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad - np.exp(out) * grad.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), _backward)


ACTIVATIONS = {
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
}


def activation(x: Tensor, kind: ActivationKind) -> Tensor:
    """Apply the activation named by `kind`."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError as exception:
        msg = f"Unknown activation {kind!r}, expected one of {sorted(ACTIVATIONS)}"
        raise ConfigurationError(msg) from exception
    return fn(x)


def _check_norm_extent(op: str, features: int, gamma: Tensor, beta: Tensor) -> None:
    if gamma.shape != (features,) or beta.shape != (features,):
        msg = f"{op}: input has {features} features, parameters are {gamma.shape}/{beta.shape}"
        raise ConfigurationError(msg)


def batch_norm(  # noqa: PLR0913
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    eps: float = BATCH_NORM_EPS,
    momentum: float = BATCH_NORM_MOMENTUM,
) -> Tensor:
    """
    Normalize an (N, C, ...) batch per channel.

    In training mode the batch statistics are used and the running buffers are
    updated in place by exponential moving average; in eval mode the running
    buffers are used unchanged.
    """
    _check_norm_extent("batch_norm", x.shape[1], gamma, beta)
    axes = (0, *range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[...] = (1.0 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * x_hat + beta.data.reshape(view)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_hat = grad * gamma.data.reshape(view)
        if training:
            grad_x = (inv_std.reshape(view) / count) * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = d_hat * inv_std.reshape(view)
        return grad_x, (grad * x_hat).sum(axis=axes), grad.sum(axis=axes)

    return Tensor.from_op(out, (x, gamma, beta), _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis."""
    features = x.shape[-1]
    _check_norm_extent("layer_norm", features, gamma, beta)
    mean = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mean) * inv_std
    out = gamma.data * x_hat + beta.data
    lead = tuple(range(x.ndim - 1))

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_hat = grad * gamma.data
        grad_x = (inv_std / features) * (
            features * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        return grad_x, (grad * x_hat).sum(axis=lead), grad.sum(axis=lead)

    return Tensor.from_op(out, (x, gamma, beta), _backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(`logits`)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        msg = f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows"
        raise ShapeError(msg)
    bad = (labels < 0) | (labels >= classes)
    if bad.any():
        msg = f"cross_entropy: label {int(labels[bad][0])} outside [0, {classes})"
        raise LabelIndexError(msg)

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        delta = np.exp(log_probs)
        delta[rows, labels] -= 1.0
        return (delta * (grad / n),)

    return Tensor.from_op(np.asarray(loss), (logits,), _backward)
