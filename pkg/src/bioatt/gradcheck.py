"""Finite-difference gradient verification.

Central differences with a fixed step, run in 64-bit mode only: float32
round-off makes the comparison meaningless at the tolerances used here.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward

DEFAULT_EPS = 1e-3
DEFAULT_TOL = 1e-4
_REL_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _REL_FLOOR)


def central_difference(loss_fn: Callable[[], Tensor], tensor: Tensor, index: tuple, eps: float = DEFAULT_EPS) -> float:
    """d loss / d tensor[index] estimated as (f(x+eps) - f(x-eps)) / 2 eps."""
    original = tensor.data[index]
    tensor.data[index] = original + eps
    hi = float(loss_fn().data)
    tensor.data[index] = original - eps
    lo = float(loss_fn().data)
    tensor.data[index] = original
    return (hi - lo) / (2.0 * eps)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    eps: float = DEFAULT_EPS,
    max_coords_per_tensor: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare reverse-mode gradients of loss_fn against central differences.

    Returns the maximum relative error over the probed coordinates.  When
    max_coords_per_tensor is given, that many coordinates are sampled per
    tensor instead of sweeping all of them.
    """
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors (64-bit mode)")
        if not t.requires_grad:
            raise ValueError("check_gradients: tensor does not require grad")
        t.grad = None

    loss = loss_fn()
    backward(loss)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t in wrt:
        if t.grad is None:
            raise AssertionError("backward left a requires_grad tensor without a gradient")
        flat_indices = np.arange(t.size)
        if max_coords_per_tensor is not None and t.size > max_coords_per_tensor:
            flat_indices = rng.choice(t.size, size=max_coords_per_tensor, replace=False)
        for flat in flat_indices:
            index = np.unravel_index(int(flat), t.shape)
            numeric = central_difference(loss_fn, t, index, eps)
            analytic = float(t.grad[index])
            worst = max(worst, relative_error(analytic, numeric))
    return worst
