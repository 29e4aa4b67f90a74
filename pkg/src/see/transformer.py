"""Grid generation, differentiable bilinear sampling and box extraction.

Coordinates follow the align-corners convention: a normalized coordinate
``u`` in [-1, 1] maps to the pixel column ``(u + 1) / 2 * (W - 1)`` and ``v``
to the pixel row ``(v + 1) / 2 * (H - 1)``.  ``u`` is always the horizontal
axis.  The affine row layout is ``[[t1, t2, t3], [t4, t5, t6]]`` and maps
output (base grid) coordinates to input coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .tensor import Function, ShapeError, Tensor, as_tensor, stack

IDENTITY = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
# index of the rotation-carrying off-diagonal entries t2 and t4
ROTATION_SLOTS = (1, 3)


@dataclass
class SamplingGrid:
    """Base grid ``(H_o, W_o, 2)`` of (x, y) pairs plus transformed grids.

    ``transformed`` has shape ``(..., H_o, W_o, 2)`` holding (u, v) per point.
    """

    base: np.ndarray
    transformed: Tensor | None = None

    @property
    def out_height(self) -> int:
        return self.base.shape[0]

    @property
    def out_width(self) -> int:
        return self.base.shape[1]


@dataclass
class BoundingBox:
    """Quadrilateral in input pixel coordinates.

    ``corners`` are ordered like the base-grid corners they come from:
    top-left, top-right, bottom-left, bottom-right.
    """

    region: int
    corners: np.ndarray = field(repr=False)

    def polygon(self) -> np.ndarray:
        """Corners in drawing order (TL, TR, BR, BL)."""
        return self.corners[[0, 1, 3, 2]]

    def clamped(self, img_w: int, img_h: int) -> np.ndarray:
        c = self.polygon().copy()
        c[:, 0] = np.clip(c[:, 0], 0, img_w - 1)
        c[:, 1] = np.clip(c[:, 1], 0, img_h - 1)
        return c

    def to_record(self) -> dict:
        return {"region": int(self.region), "corners": [[float(x), float(y)] for x, y in self.corners]}


def make_base_grid(out_height: int, out_width: int, dtype=np.float32) -> SamplingGrid:
    if out_height < 2 or out_width < 2:
        raise ValueError(f"base grid needs H_o, W_o >= 2, got {out_height}x{out_width}")
    xs = np.linspace(-1.0, 1.0, out_width)
    ys = np.linspace(-1.0, 1.0, out_height)
    gx, gy = np.meshgrid(xs, ys)
    return SamplingGrid(base=np.stack([gx, gy], axis=-1).astype(dtype))


def generate_grids(params, base: SamplingGrid) -> SamplingGrid:
    """Map every base point through each affine matrix in ``params[..., 6]``."""
    params = as_tensor(params)
    if params.ndim < 1 or params.shape[-1] != 6:
        raise ShapeError(f"affine params need a trailing dimension of 6, got {params.shape}")
    lead = params.shape[:-1]
    if int(np.prod(lead)) < 1:
        raise ShapeError("affine params need at least one region")
    Ho, Wo = base.out_height, base.out_width
    pts = base.base.reshape(-1, 2).astype(params.dtype)
    x, y = pts[:, 0], pts[:, 1]
    t = params.reshape(-1, 6)
    # elementwise so every point sees exactly t1*x + t2*y + t3 (no BLAS reassociation)
    u = t[:, 0:1] * x + t[:, 1:2] * y + t[:, 2:3]
    v = t[:, 3:4] * x + t[:, 4:5] * y + t[:, 5:6]
    uv = stack([u, v], axis=-1)
    return SamplingGrid(base=base.base, transformed=uv.reshape(*lead, Ho, Wo, 2))


def _to_pixels(coord: np.ndarray, size: int) -> np.ndarray:
    return (coord + 1.0) * (0.5 * (size - 1))


class BilinearSampleFn(Function):
    """image[B,C,H,W], grid[B,N,Ho,Wo,2] -> out[B,N,C,Ho,Wo]."""

    def forward(self, image, grid):
        B, C, H, W = image.shape
        if grid.shape[0] != B or grid.shape[-1] != 2 or grid.ndim != 5:
            raise ShapeError(f"grid shape {grid.shape} incompatible with image batch {B}")
        _, N, Ho, Wo, _ = grid.shape
        px = _to_pixels(grid[..., 0], W)
        py = _to_pixels(grid[..., 1], H)
        x0 = np.floor(px)
        y0 = np.floor(py)
        fx = (px - x0).astype(image.dtype)
        fy = (py - y0).astype(image.dtype)
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)

        flat = image.reshape(B, C, H * W)
        bidx = np.arange(B).reshape(B, 1, 1, 1)
        corners = []
        out = np.zeros((B, N, C, Ho, Wo), dtype=image.dtype)
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi = x0 + dx, y0 + dy
                valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
                idx = np.where(valid, yi * W + xi, 0)
                wx = fx if dx else 1 - fx
                wy = fy if dy else 1 - fy
                wgt = wx * wy * valid
                # vals[B,N,Ho,Wo,C]
                vals = flat[bidx, :, idx] * valid[..., None]
                out += np.moveaxis(vals * wgt[..., None], -1, 2)
                corners.append((dx, dy, idx, valid, wgt, vals))
        self.saved = (image.shape, grid.dtype, fx, fy, corners)
        return out

    def backward(self, g):
        (B, C, H, W), gdtype, fx, fy, corners = self.saved
        g_last = np.moveaxis(g, 2, -1)  # B,N,Ho,Wo,C
        gimg = None
        if self.needs[0]:
            # fixed-order scatter: corners in (dy, dx) order, bincount sums by index
            offsets = (np.arange(B) * (H * W)).reshape(B, 1, 1, 1)
            idx_all, w_all = [], []
            for dx, dy, idx, valid, wgt, vals in corners:
                idx_all.append(((idx + offsets) * C)[..., None] + np.arange(C))
                w_all.append(g_last * wgt[..., None])
            idx_all = np.concatenate([i.reshape(-1) for i in idx_all])
            w_all = np.concatenate([w.reshape(-1) for w in w_all])
            acc = np.bincount(idx_all, weights=w_all, minlength=B * H * W * C)
            gimg = acc.reshape(B, H, W, C).transpose(0, 3, 1, 2).astype(g.dtype)
        ggrid = None
        if self.needs[1]:
            du = np.zeros(fx.shape, dtype=np.float64)
            dv = np.zeros(fx.shape, dtype=np.float64)
            for dx, dy, idx, valid, wgt, vals in corners:
                s = (g_last * vals).sum(axis=-1)
                wx = fx if dx else 1 - fx
                wy = fy if dy else 1 - fy
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                du += s * sx * wy
                dv += s * sy * wx
            ggrid = np.stack([du * (0.5 * (W - 1)), dv * (0.5 * (H - 1))], axis=-1).astype(gdtype)
        return gimg, ggrid


def bilinear_sample(image, grids: SamplingGrid | Tensor) -> Tensor:
    """Sample ``image`` at the transformed grid coordinates.

    Accepts ``image[C,H,W]`` with ``grid[N,Ho,Wo,2]`` (returns ``[N,C,Ho,Wo]``)
    or the batched form ``image[B,C,H,W]`` with ``grid[B,N,Ho,Wo,2]``
    (returns ``[B,N,C,Ho,Wo]``).  Samples outside the image read as zero.
    """
    grid = grids.transformed if isinstance(grids, SamplingGrid) else grids
    if grid is None:
        raise ValueError("bilinear_sample needs transformed grids")
    image, grid = as_tensor(image), as_tensor(grid)
    if image.ndim == 3:
        if grid.ndim != 4:
            raise ShapeError(f"unbatched image needs grid[N,Ho,Wo,2], got {grid.shape}")
        out = BilinearSampleFn.apply(image.reshape(1, *image.shape), grid.reshape(1, *grid.shape))
        return out.reshape(out.shape[1:])
    if image.ndim != 4:
        raise ShapeError(f"bilinear_sample expects image[C,H,W] or [B,C,H,W], got {image.shape}")
    return BilinearSampleFn.apply(image, grid)


def bilinear_sample_reference(image: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Brute-force sampler: full double sum over every input pixel.

    ``image[C,H,W]``, ``grid[N,Ho,Wo,2]`` -> ``[N,C,Ho,Wo]``.  Quadratic cost;
    only meant as an independent check of :func:`bilinear_sample`.
    """
    C, H, W = image.shape
    px = _to_pixels(np.asarray(grid[..., 0], dtype=np.float64), W)
    py = _to_pixels(np.asarray(grid[..., 1], dtype=np.float64), H)
    hs = np.arange(H, dtype=np.float64)
    ws = np.arange(W, dtype=np.float64)
    ky = np.maximum(0.0, 1.0 - np.abs(py[..., None] - hs))  # N,Ho,Wo,H
    kx = np.maximum(0.0, 1.0 - np.abs(px[..., None] - ws))  # N,Ho,Wo,W
    return np.einsum("nijh,nijw,chw->ncij", ky, kx, np.asarray(image, dtype=np.float64))


def rotation_dropout(params, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Zero t2 and t4 jointly per region with probability ``p`` while training."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"rotation dropout probability must be in [0, 1], got {p}")
    params = as_tensor(params)
    if not training or p == 0.0:
        return params
    if p < 1.0 and rng is None:
        raise ValueError("rotation_dropout needs an rng when 0 < p < 1")
    lead = params.shape[:-1]
    drop = np.ones(lead, dtype=bool) if p == 1.0 else rng.random(lead) < p
    mask = np.ones(params.shape, dtype=params.dtype)
    for slot in ROTATION_SLOTS:
        mask[..., slot] = np.where(drop, 0.0, 1.0)
    return params * mask


def grids_to_bboxes(grids: SamplingGrid | Tensor | np.ndarray, img_w: int, img_h: int) -> list[BoundingBox]:
    """Pixel-space quadrilaterals from the four corners of each transformed grid.

    ``grids`` holds ``[N,Ho,Wo,2]`` (or any leading shape, flattened in order
    into region indices).
    """
    grid = grids.transformed if isinstance(grids, SamplingGrid) else grids
    if grid is None:
        raise ValueError("grids_to_bboxes needs transformed grids")
    g = np.asarray(grid.data if isinstance(grid, Tensor) else grid, dtype=np.float64)
    g = g.reshape(-1, *g.shape[-3:])
    boxes = []
    for n, gn in enumerate(g):
        pts = np.stack([gn[0, 0], gn[0, -1], gn[-1, 0], gn[-1, -1]])
        corners = np.stack([_to_pixels(pts[:, 0], img_w), _to_pixels(pts[:, 1], img_h)], axis=1)
        boxes.append(BoundingBox(region=n, corners=corners))
    return boxes


def write_bboxes_jsonl(boxes: Iterable[BoundingBox], fh: TextIO) -> None:
    for box in boxes:
        fh.write(json.dumps(box.to_record()) + "\n")


def read_bboxes_jsonl(fh: TextIO) -> list[BoundingBox]:
    out = []
    for line in fh:
        line = line.strip()
        if line:
            rec = json.loads(line)
            out.append(BoundingBox(region=rec["region"], corners=np.asarray(rec["corners"], dtype=np.float64)))
    return out
