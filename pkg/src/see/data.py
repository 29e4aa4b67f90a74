"""Synthetic multi-number images, reading-order labels and the dataset format.

A dataset directory holds::

    manifest.jsonl   one {"image", "labels", "boxes"} record per line
    meta.json        {"alphabet", "max_len", "regions", "image_size"}
    images/          PNG files referenced by the manifest

Boxes use the same corner order as predicted boxes (TL, TR, BL, BR) in pixel
coordinates and are optional (``null``); they are only ever used for
evaluation.  External data in this layout loads the same way.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .networks import Alphabet

DIGITS = tuple("0123456789")
_SUPERSAMPLE = 4


class DatasetError(ValueError):
    """Invalid dataset spec, manifest or record."""


# ---------------------------------------------------------------------------
# glyphs: polylines in a unit box (x right, y down)


def _arc(cx, cy, rx, ry, a0, a1, n=16):
    t = np.radians(np.linspace(a0, a1, n))
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


GLYPHS: dict[str, list[list[tuple[float, float]]]] = {
    "0": [_arc(0.5, 0.5, 0.42, 0.48, 0, 360, 28)],
    "1": [[(0.28, 0.22), (0.58, 0.02), (0.58, 0.98)]],
    "2": [_arc(0.5, 0.28, 0.38, 0.26, 190, 380) + [(0.1, 0.98), (0.92, 0.98)]],
    "3": [_arc(0.48, 0.27, 0.36, 0.25, 200, 450), _arc(0.48, 0.73, 0.4, 0.25, -90, 160)],
    "4": [[(0.7, 0.98), (0.7, 0.02), (0.08, 0.68), (0.95, 0.68)]],
    "5": [[(0.85, 0.02), (0.2, 0.02), (0.15, 0.47)] + _arc(0.48, 0.68, 0.38, 0.3, 210, 500)[:14]],
    "6": [_arc(0.52, 0.52, 0.42, 0.48, 300, 160, 14), _arc(0.5, 0.72, 0.38, 0.26, 0, 360, 22)],
    "7": [[(0.08, 0.02), (0.92, 0.02), (0.4, 0.98)]],
    "8": [_arc(0.5, 0.26, 0.32, 0.24, 0, 360, 22), _arc(0.5, 0.73, 0.4, 0.26, 0, 360, 22)],
    "9": [_arc(0.5, 0.3, 0.38, 0.28, 0, 360, 22), [(0.88, 0.3), (0.82, 0.98)]],
}


@dataclass
class DatasetSpec:
    image_size: tuple[int, int] = (48, 48)
    regions: int = 1
    digits: tuple[int, int] = (3, 3)
    placement: str = "grid"
    clutter: float = 0.3
    jitter: float = 0.1
    height_frac: tuple[float, float] = (0.3, 0.42)
    rotation_deg: float = 4.0
    count: int = 100
    seed: int = 0
    split: str = "train"

    def validate(self) -> None:
        H, W = self.image_size
        if self.count < 1:
            raise DatasetError(f"sample count must be >= 1, got {self.count}")
        if self.regions < 1:
            raise DatasetError(f"regions must be >= 1, got {self.regions}")
        if not 1 <= self.digits[0] <= self.digits[1]:
            raise DatasetError(f"invalid digits-per-region range {self.digits}")
        if self.placement not in ("grid", "random"):
            raise DatasetError(f"placement must be 'grid' or 'random', got {self.placement!r}")
        if not 0.0 <= self.jitter <= 0.1:
            raise DatasetError("grid jitter must be within [0, 0.1] of the cell size")
        if not 0 < self.height_frac[0] <= self.height_frac[1] < 1:
            raise DatasetError(f"invalid glyph height range {self.height_frac}")
        rows, cols = lattice_shape(self.regions)
        cell_h, cell_w = H / rows, W / cols
        h = self.height_frac[0] * cell_h
        if h < 6:
            raise DatasetError(f"glyphs would be {h:.1f}px tall; image {H}x{W} too small for {self.regions} regions")
        if _label_width(self.digits[1], h) > cell_w:
            raise DatasetError(
                f"{self.digits[1]}-digit labels ({_label_width(self.digits[1], h):.1f}px) do not fit "
                f"{cell_w:.1f}px cells; spec: {asdict(self)}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def lattice_shape(n_regions: int) -> tuple[int, int]:
    if n_regions <= 3:
        return 1, n_regions
    rows = int(math.floor(math.sqrt(n_regions)))
    return rows, int(math.ceil(n_regions / rows))


_GLYPH_W = 0.62
_GAP = 0.18


def _label_width(n_digits: int, height: float) -> float:
    return height * (n_digits * _GLYPH_W + (n_digits - 1) * _GAP)


def _label_strokes(label: str, height: float, rng: np.random.Generator) -> tuple[list[np.ndarray], float]:
    """Polylines for ``label`` in pixel units, origin at the label's top-left."""
    strokes = []
    x = 0.0
    width_total = 0.0
    for ch in label:
        gw = height * _GLYPH_W * rng.uniform(0.88, 1.1)
        slant = rng.uniform(-0.15, 0.15)
        for line in GLYPHS[ch]:
            pts = np.asarray(line, dtype=np.float64)
            pts = pts + rng.normal(0.0, 0.015, pts.shape)
            px = x + pts[:, 0] * gw + slant * (0.5 - pts[:, 1]) * height
            py = pts[:, 1] * height
            strokes.append(np.stack([px, py], axis=1))
        x += gw + height * _GAP * rng.uniform(0.7, 1.3)
        width_total = x - height * _GAP
    return strokes, width_total


def _render_label(
    label: str, center: tuple[float, float], height: float, angle_deg: float, stroke: float,
    size: tuple[int, int], rng: np.random.Generator,
) -> np.ndarray:
    H, W = size
    strokes, _ = _label_strokes(label, height, rng)
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    canvas = Image.new("L", (W * _SUPERSAMPLE, H * _SUPERSAMPLE), 0)
    draw = ImageDraw.Draw(canvas)
    lw = max(1, int(round(stroke * _SUPERSAMPLE)))
    rotated = [pts @ rot.T for pts in strokes]
    every = np.concatenate(rotated)
    # centre the drawn extent, not the advance box, so the ink box sits on ``center``
    mid = (every.min(axis=0) + every.max(axis=0)) / 2.0
    for p in rotated:
        p = p - mid + np.asarray(center)
        p = (p + 0.5) * _SUPERSAMPLE - 0.5
        flat = [tuple(map(float, q)) for q in p]
        draw.line(flat, fill=255, width=lw, joint="curve")
        r = lw / 2.0
        for qx, qy in (flat[0], flat[-1]):
            draw.ellipse([qx - r, qy - r, qx + r, qy + r], fill=255)
    small = canvas.resize((W, H), Image.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def _ink_box(mask: np.ndarray, thresh: float = 0.25) -> list[list[float]] | None:
    ys, xs = np.nonzero(mask > thresh)
    if len(xs) == 0:
        return None
    x0, x1, y0, y1 = float(xs.min()), float(xs.max()), float(ys.min()), float(ys.max())
    return [[x0, y0], [x1, y0], [x0, y1], [x1, y1]]


def _rect(box) -> tuple[float, float, float, float]:
    b = np.asarray(box, dtype=np.float64)
    return b[:, 0].min(), b[:, 1].min(), b[:, 0].max(), b[:, 1].max()


def rect_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def order_labels(boxes: Sequence) -> list[int]:
    """Western reading order for axis-aligned boxes ``(x0, y0, x1, y1)``.

    Boxes whose vertical extents overlap by at least half of the smaller
    height share a line; lines go top to bottom by mean centre y, boxes
    within a line left to right by their left edge.  Corner lists are
    accepted as well.
    """
    rects = [tuple(map(float, _rect(b) if np.ndim(b) == 2 else b)) for b in boxes]
    if not rects:
        return []
    # canonical visiting order makes the grouping independent of input order
    visit = sorted(range(len(rects)), key=lambda i: (rects[i][1], rects[i][0], rects[i][3], rects[i][2], i))
    lines: list[list[int]] = []
    for i in visit:
        y0, y1 = rects[i][1], rects[i][3]
        placed = False
        for line in lines:
            for j in line:
                oy = min(y1, rects[j][3]) - max(y0, rects[j][1])
                if oy >= 0.5 * min(y1 - y0, rects[j][3] - rects[j][1]):
                    line.append(i)
                    placed = True
                    break
            if placed:
                break
        if not placed:
            lines.append([i])

    def line_y(line):
        return float(np.mean([(rects[j][1] + rects[j][3]) / 2 for j in line]))

    key = lambda j: (rects[j][0], rects[j][1], rects[j][2], rects[j][3], j)  # noqa: E731
    lines.sort(key=lambda line: (line_y(line), min(rects[j][0] for j in line)))
    return [j for line in lines for j in sorted(line, key=key)]


def _sample_rng(spec: DatasetSpec, index: int) -> np.random.Generator:
    salt = int.from_bytes(spec.split.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([spec.seed, salt, index])


def _background(size, clutter: float, rng: np.random.Generator) -> np.ndarray:
    H, W = size
    base = rng.uniform(0.15, 0.85)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    grad = rng.uniform(-0.15, 0.15) * xx + rng.uniform(-0.15, 0.15) * yy
    img = base + grad
    if clutter > 0:
        canvas = Image.new("L", (W, H), 0)
        draw = ImageDraw.Draw(canvas)
        for _ in range(int(rng.poisson(6 * clutter))):
            x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
            if rng.random() < 0.5:
                r = rng.uniform(2, 0.25 * min(H, W))
                draw.ellipse([x0 - r, y0 - r, x0 + r, y0 + r], fill=int(rng.uniform(40, 255)))
            else:
                draw.line([x0, y0, rng.uniform(0, W), rng.uniform(0, H)], fill=int(rng.uniform(40, 255)), width=int(rng.integers(1, 3)))
        shapes = np.asarray(canvas, dtype=np.float64) / 255.0
        img = img + clutter * 0.25 * rng.choice([-1.0, 1.0]) * shapes
        img = img + rng.normal(0.0, 0.04 * clutter, size)
    return img


def _layout(spec: DatasetSpec, labels: list[str], rng: np.random.Generator):
    """Centres and glyph heights for each label."""
    H, W = spec.image_size
    N = spec.regions
    if spec.placement == "grid":
        rows, cols = lattice_shape(N)
        ch, cw = H / rows, W / cols
        out = []
        for n, label in enumerate(labels):
            r, c = divmod(n, cols)
            h = rng.uniform(*spec.height_frac) * ch
            h = min(h, cw / (_label_width(len(label), 1.0) * 1.1))
            # one pixel of the jitter budget is left for rasterization
            cx = (c + 0.5) * cw + rng.uniform(-1, 1) * max(0.0, spec.jitter * cw - 1)
            cy = (r + 0.5) * ch + rng.uniform(-1, 1) * max(0.0, spec.jitter * ch - 1)
            # keep the whole label inside its cell
            half_w = min(0.5 * cw, 0.55 * _label_width(len(label), h) + 1)
            half_h = min(0.5 * ch, 0.6 * h + 1)
            cx = float(np.clip(cx, c * cw + half_w, (c + 1) * cw - half_w))
            cy = float(np.clip(cy, r * ch + half_h, (r + 1) * ch - half_h))
            out.append((cx, cy, h))
        return out
    rows, _ = lattice_shape(N)
    for _ in range(1000):
        out, rects = [], []
        for label in labels:
            h = rng.uniform(*spec.height_frac) * H / rows
            w = _label_width(len(label), h)
            if w + 4 > W or h + 4 > H:
                break
            cx = rng.uniform(w / 2 + 2, W - w / 2 - 2)
            cy = rng.uniform(h / 2 + 2, H - h / 2 - 2)
            out.append((cx, cy, h))
            rects.append((cx - w / 2 - 1, cy - h / 2 - 1, cx + w / 2 + 1, cy + h / 2 + 1))
        if len(out) == len(labels) and all(
            rect_iou(rects[i], rects[j]) <= 0.0 for i in range(len(rects)) for j in range(i)
        ):
            return out
    raise DatasetError(f"could not place {N} non-overlapping regions after 1000 attempts; spec: {asdict(spec)}")


def render_sample(spec: DatasetSpec, index: int) -> tuple[np.ndarray, list[str], list]:
    """Image (uint8 HxW), labels in reading order, and their boxes."""
    rng = _sample_rng(spec, index)
    H, W = spec.image_size
    labels = [
        "".join(rng.choice(DIGITS, size=int(rng.integers(spec.digits[0], spec.digits[1] + 1))))
        for _ in range(spec.regions)
    ]
    placements = _layout(spec, labels, rng)
    img = _background(spec.image_size, spec.clutter, rng)
    bg_mean = float(img.mean())
    if bg_mean > 0.5:
        fg = rng.uniform(0.0, max(0.0, bg_mean - 0.35))
    else:
        fg = rng.uniform(min(1.0, bg_mean + 0.35), 1.0)
    boxes = []
    for label, (cx, cy, h) in zip(labels, placements):
        angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
        stroke = h * rng.uniform(0.1, 0.16)
        mask = _render_label(label, (cx, cy), h, angle, stroke, (H, W), rng)
        boxes.append(_ink_box(mask))
        img = img * (1 - mask) + fg * mask
    if any(b is None for b in boxes):
        raise DatasetError(f"sample {index}: a label rendered outside the image")
    if spec.placement == "random":
        rects = [_rect(b) for b in boxes]
        for i in range(len(rects)):
            for j in range(i):
                if rect_iou(rects[i], rects[j]) > 0.05:
                    raise DatasetError(f"sample {index}: regions overlap beyond IoU 0.05")
    order = order_labels(boxes)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, [labels[i] for i in order], [boxes[i] for i in order]


def generate_dataset(spec: DatasetSpec, out_dir: str | os.PathLike) -> Path:
    """Write ``spec.count`` samples; output is a pure function of ``spec``."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    max_len = 0
    lines = []
    for i in range(spec.count):
        pixels, labels, boxes = render_sample(spec, i)
        rel = f"images/{i:06d}.png"
        Image.fromarray(pixels, mode="L").save(out / rel, optimize=False)
        max_len = max(max_len, *(len(l) for l in labels))
        lines.append(json.dumps({"image": rel, "labels": labels, "boxes": boxes}))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "alphabet": list(DIGITS),
        "max_len": max_len,
        "regions": spec.regions,
        "image_size": list(spec.image_size),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out


def generate_splits(spec: DatasetSpec, root: str | os.PathLike, counts: dict[str, int]) -> dict[str, Path]:
    """One dataset per split under ``root/<split>``, each with its own sample stream."""
    paths = {}
    for split, count in counts.items():
        s = DatasetSpec(**{**asdict(spec), "count": count, "split": split})
        paths[split] = generate_dataset(s, Path(root) / split)
    return paths


# ---------------------------------------------------------------------------
# loading


@dataclass
class Sample:
    image: np.ndarray            # [C, H, W] float32 in [0, 1]
    labels: list[str]
    boxes: list | None = None


@dataclass
class TrainBatch:
    """What the optimizer sees: images and padded label ids, never boxes."""

    images: np.ndarray           # [B, C, H, W]
    targets: np.ndarray          # [B, N, T] int64


@dataclass
class Dataset:
    path: Path
    alphabet: Alphabet
    max_len: int
    regions: int
    image_size: tuple[int, int]
    images: np.ndarray = field(repr=False)
    labels: list[list[str]] = field(repr=False)
    boxes: list | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], list(self.labels[i]), None if self.boxes is None else self.boxes[i])

    @property
    def has_boxes(self) -> bool:
        return self.boxes is not None

    def shuffle_order(self, seed: int, epoch: int = 0) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def encode_labels(self, indices, alphabet: Alphabet, timesteps: int) -> np.ndarray:
        return np.asarray(
            [[alphabet.encode(l, timesteps) for l in self.labels[i]] for i in indices], dtype=np.int64
        )

    def batch(self, indices, alphabet: Alphabet | None = None, timesteps: int | None = None) -> TrainBatch:
        alphabet = alphabet or self.alphabet
        timesteps = timesteps or self.max_len
        idx = np.asarray(indices)
        return TrainBatch(self.images[idx], self.encode_labels(idx, alphabet, timesteps))

    def batches(self, batch_size: int, seed: int, epoch: int = 0, alphabet=None, timesteps=None) -> Iterator[TrainBatch]:
        order = self.shuffle_order(seed, epoch)
        for k in range(0, len(order) - batch_size + 1, batch_size):
            yield self.batch(order[k : k + batch_size], alphabet, timesteps)


def _fail(manifest: Path, lineno: int, msg: str):
    raise DatasetError(f"{manifest}:{lineno}: {msg}")


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.jsonl"
    meta_path = root / "meta.json"
    if not manifest.is_file():
        raise DatasetError(f"{root}: no manifest.jsonl")
    if not meta_path.is_file():
        raise DatasetError(f"{root}: no meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    try:
        alphabet = Alphabet(tuple(meta["alphabet"]))
        max_len = int(meta["max_len"])
        regions = int(meta["regions"])
        image_size = (int(meta["image_size"][0]), int(meta["image_size"][1]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise DatasetError(f"{meta_path}: invalid meta ({exc})") from None

    images, labels, boxes = [], [], []
    any_boxes = False
    with manifest.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                _fail(manifest, lineno, f"not valid JSON ({exc.msg})")
            img_path = root / rec.get("image", "")
            if not rec.get("image") or not img_path.is_file():
                _fail(manifest, lineno, f"missing image file {rec.get('image')!r}")
            labs = rec.get("labels")
            if not isinstance(labs, list) or len(labs) != regions:
                _fail(manifest, lineno, f"expected {regions} labels, got {labs!r}")
            for lab in labs:
                if len(lab) > max_len:
                    _fail(manifest, lineno, f"label {lab!r} longer than T={max_len}")
                for ch in lab:
                    if ch not in alphabet.symbols:
                        _fail(manifest, lineno, f"label {lab!r} uses symbol {ch!r} outside the alphabet")
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("L") if im.mode not in ("L", "RGB") else im)
            if arr.shape[:2] != image_size:
                _fail(manifest, lineno, f"image is {arr.shape[:2]}, meta says {image_size}")
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(arr.astype(np.float32) / 255.0)
            labels.append(list(labs))
            b = rec.get("boxes")
            any_boxes |= b is not None
            boxes.append(b)
    stacked = np.stack(images) if images else np.zeros((0, 1, *image_size), dtype=np.float32)
    return Dataset(
        path=root, alphabet=alphabet, max_len=max_len, regions=regions, image_size=image_size,
        images=stacked, labels=labels, boxes=boxes if any_boxes else None,
    )
