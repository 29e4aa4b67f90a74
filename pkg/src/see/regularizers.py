"""Localization penalties on the predicted affine matrices and the full loss.

For a region with parameters ``t1..t6`` let ``det = t1*t5 - t2*t4``:

* area      ``|det|``                       (area of the mapped unit cell)
* aspect    ``max(0, |(t2, t5)| - |(t1, t4)|)``  (taller than wide)
* direction ``max(0, -det)``                 (mirrored grids)

All three act on ``params[..., 6]`` and return one value per region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import log_softmax_np, softmax_cross_entropy
from .tensor import ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class RegWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be >= 0")


def _det(params: Tensor) -> Tensor:
    return params[..., 0] * params[..., 4] - params[..., 1] * params[..., 3]


def area_penalty(params) -> Tensor:
    return _det(as_tensor(params)).abs()


def aspect_penalty(params) -> Tensor:
    p = as_tensor(params)
    width = (p[..., 0] * p[..., 0] + p[..., 3] * p[..., 3]).sqrt()
    height = (p[..., 1] * p[..., 1] + p[..., 4] * p[..., 4]).sqrt()
    return (height - width).relu()


def direction_penalty(params) -> Tensor:
    return (-_det(as_tensor(params))).relu()


def _region(params, n: int) -> Tensor:
    p = as_tensor(params)
    p = p.reshape(-1, 6)
    if not 0 <= n < p.shape[0]:
        raise IndexError(f"region {n} does not exist (have {p.shape[0]})")
    return p[n]


def reg_area(params, n: int) -> Tensor:
    return area_penalty(_region(params, n))


def reg_aspect(params, n: int) -> Tensor:
    return aspect_penalty(_region(params, n))


def reg_direction(params, n: int) -> Tensor:
    return direction_penalty(_region(params, n))


@dataclass
class GridTerms:
    """The three penalties and their weighted sum, as graph tensors."""

    area: Tensor
    aspect: Tensor
    direction: Tensor
    total: Tensor


def grid_terms(params, weights: RegWeights) -> GridTerms:
    ar = area_penalty(params)
    asp = aspect_penalty(params)
    di = direction_penalty(params)
    return GridTerms(ar, asp, di, ar * weights.lambda1 + asp * weights.lambda2 + di)


def grid_loss(params, weights: RegWeights) -> Tensor:
    """Per-region ``lambda1 * area + lambda2 * aspect + direction``."""
    return grid_terms(params, weights).total


@dataclass
class GridLossBreakdown:
    """Per-region loss components (averaged over the batch) and the total."""

    l_ar: np.ndarray
    l_as: np.ndarray
    l_di: np.ndarray
    l_grid: np.ndarray
    ce: np.ndarray
    total: float
    loss: Tensor | None = field(default=None, repr=False)

    def rows(self, step: int) -> list[dict]:
        return [
            {
                "step": step,
                "n": n,
                "l_ar": float(self.l_ar[n]),
                "l_as": float(self.l_as[n]),
                "l_di": float(self.l_di[n]),
                "l_grid": float(self.l_grid[n]),
                "ce": float(self.ce[n]),
                "total": self.total,
            }
            for n in range(len(self.l_ar))
        ]


def total_loss(region_logits, targets, grid_losses) -> Tensor:
    """Sum over regions of (sum over timesteps of cross-entropy + grid penalty).

    ``region_logits`` is ``[N,T,K]`` for one image or ``[B,N,T,K]`` for a
    batch (then averaged over the batch); ``targets`` matches without ``K``
    and must already be padded to exactly ``T``; ``grid_losses`` is ``[N]``
    or ``[B,N]``.
    """
    logits = as_tensor(region_logits)
    targets = np.asarray(targets)
    grid = as_tensor(grid_losses)
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        targets = targets.reshape(1, *targets.shape) if targets.ndim == 2 else targets
        grid = grid.reshape(1, *grid.shape)
    if logits.ndim != 4:
        raise ShapeError(f"total_loss expects logits[N,T,K] or [B,N,T,K], got {logits.shape}")
    B, N, T, K = logits.shape
    if targets.ndim != 3 or targets.shape[:2] != (B, N):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape[:3]}")
    if targets.shape[2] != T:
        raise ValueError(f"targets must be padded to exactly T={T}, got length {targets.shape[2]}")
    if grid.shape != (B, N):
        raise ShapeError(f"grid losses shape {grid.shape} does not match ({B}, {N})")
    ce = softmax_cross_entropy(logits.reshape(B * N * T, K), targets.reshape(-1))
    return ce * float(N * T) + grid.sum() * (1.0 / B)


def ce_per_region(region_logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Batch-mean of the per-region timestep-summed cross-entropy, ``[N]``."""
    logp = log_softmax_np(np.asarray(region_logits, dtype=np.float64))
    picked = np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)[..., 0]
    return -picked.sum(axis=-1).mean(axis=0)


def breakdown(
    terms: GridTerms, weights: RegWeights, region_logits: np.ndarray, targets: np.ndarray, loss: Tensor
) -> GridLossBreakdown:
    def mean_b(t: Tensor) -> np.ndarray:
        return np.asarray(t.data, dtype=np.float64).reshape(-1, t.shape[-1]).mean(axis=0)

    l_ar, l_as, l_di = mean_b(terms.area), mean_b(terms.aspect), mean_b(terms.direction)
    return GridLossBreakdown(
        l_ar=l_ar,
        l_as=l_as,
        l_di=l_di,
        l_grid=weights.lambda1 * l_ar + weights.lambda2 * l_as + l_di,
        ce=ce_per_region(region_logits, targets),
        total=loss.item(),
        loss=loss,
    )
