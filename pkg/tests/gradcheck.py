"""Central finite-difference gradient checking in f64."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from slimkws.tensor import Tensor, no_grad, precision

STEP = 1e-5
RELATIVE_FLOOR = 1e-3
SEEDS = range(20)


def project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce `out` to a scalar with fixed random weights so every element matters."""
    return (out * Tensor(weights)).sum()


def max_gradient_error(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    params: Sequence[Tensor] = (),
) -> float:
    """
    Return the worst relative error between analytic and numeric gradients.

    `fn` receives one tensor per array and must return a scalar. `params` are
    extra leaves `fn` closes over (layer weights) that are checked as well.
    Call inside `precision("f64")` when `params` were built there.
    """
    with precision("f64"):
        inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        for param in params:
            param.zero_grad()
        fn(*inputs).backward()

        worst = 0.0
        for leaf in [*inputs, *params]:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            numeric = np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            numeric_flat = numeric.reshape(-1)
            with no_grad():
                for i in range(flat.size):
                    original = flat[i]
                    flat[i] = original + STEP
                    plus = fn(*inputs).item()
                    flat[i] = original - STEP
                    minus = fn(*inputs).item()
                    flat[i] = original
                    numeric_flat[i] = (plus - minus) / (2.0 * STEP)
            error = np.abs(analytic - numeric) / np.maximum(
                np.abs(analytic) + np.abs(numeric), RELATIVE_FLOOR
            )
            worst = max(worst, float(error.max()))
    return worst
