"""Central finite-difference gradient checking.

Relative error is measured per tensor as ``max|analytic - numeric|`` divided by
the largest gradient magnitude seen on either side, so coordinates whose true
gradient is nearly zero do not dominate the statistic.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _pick(size: int, max_coords: int | None, rng) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    rng = np.random.default_rng(rng)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def numerical_grad(
    fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, coords: np.ndarray | None = None
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``t`` at flat ``coords``."""
    flat = t.data.reshape(-1)
    coords = np.arange(flat.size) if coords is None else coords
    out = np.empty(len(coords), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out[k] = (fp - fm) / (2 * h)
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng=None,
) -> list[float]:
    """Compare backprop against finite differences for each tensor.

    ``fn`` rebuilds the scalar loss from the (leaf) ``tensors``.  Returns one
    relative error per tensor.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    errors = []
    rng = np.random.default_rng(rng)
    for t in tensors:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        coords = _pick(t.size, max_coords, rng)
        numeric = numerical_grad(fn, t, h=h, coords=coords)
        errors.append(relative_error(analytic[coords], numeric))
    return errors
