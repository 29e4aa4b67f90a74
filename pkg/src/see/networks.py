"""Localization and recognition networks.

The localization network computes one global feature vector per image and
runs a 256-unit LSTM for ``N`` steps on it; each step is turned into an
affine matrix by a 6-unit recurrent head.  Matrices are predicted relative to
a per-region layout cell (the region's tile of the image), so the same
weights keep their meaning when the number of regions changes between
curriculum stages.

The recognition network processes every crop independently with shared
weights and emits ``T`` independent softmax classifiers over the alphabet
plus blank.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .layers import ConvBN, Linear, LSTMCell, Module, ResidualBlock
from .ops import adaptive_avg_pool2d, pool2d
from .tensor import ShapeError, Tensor, as_tensor, get_default_dtype, relu, stack
from .transformer import (
    SamplingGrid,
    bilinear_sample,
    generate_grids,
    make_base_grid,
    rotation_dropout,
)

BLANK = ""


@dataclass(frozen=True)
class Alphabet:
    """Symbols ``L``; class 0 is the blank, symbol ``i`` is class ``i + 1``."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")
        if BLANK in self.symbols:
            raise ValueError("the empty string is reserved for the blank label")

    @classmethod
    def from_classes(cls, classes: Sequence[str]) -> "Alphabet":
        if not classes or classes[0] != BLANK:
            raise ValueError("class list must start with the blank label")
        return cls(tuple(classes[1:]))

    @property
    def classes(self) -> list[str]:
        return [BLANK, *self.symbols]

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol) + 1
        except ValueError:
            raise ValueError(f"symbol {symbol!r} is not in the alphabet") from None

    def encode(self, label: str, timesteps: int) -> list[int]:
        if len(label) > timesteps:
            raise ValueError(f"label {label!r} longer than T={timesteps}")
        ids = [self.index(ch) for ch in label]
        return ids + [0] * (timesteps - len(ids))

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i - 1] for i in ids if i != 0)


@dataclass(frozen=True)
class ModelConfig:
    num_regions: int = 1
    timesteps: int = 3
    num_classes: int = 11
    in_channels: int = 1
    crop_size: tuple[int, int] = (32, 32)
    loc_filters: tuple[int, int, int] = (32, 48, 48)
    rec_filters: tuple[int, int, int] = (32, 64, 128)
    loc_hidden: int = 256
    loc_pool: tuple[int, int] = (4, 4)
    rec_pool: int = 5
    head: str = "lstm"
    prior_yscale: float = 0.75

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("crop_size", "loc_filters", "rec_filters", "loc_pool"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def layout_cells(n_regions: int) -> np.ndarray:
    """Per-region ``(sx, sy, tx, ty)`` tiles: a row for N <= 3, a lattice beyond."""
    if n_regions < 1:
        raise ValueError("need at least one region")
    if n_regions <= 3:
        rows, cols = 1, n_regions
    else:
        rows = int(math.floor(math.sqrt(n_regions)))
        cols = int(math.ceil(n_regions / rows))
    cells = []
    for n in range(n_regions):
        r, c = divmod(n, cols)
        cells.append((1.0 / cols, 1.0 / rows, -1.0 + (2 * c + 1) / cols, -1.0 + (2 * r + 1) / rows))
    return np.asarray(cells)


def fresh_prior(n_regions: int, yscale: float) -> np.ndarray:
    """Cell-relative starting matrices: identity for one region, vertically squeezed otherwise."""
    prior = np.tile(np.asarray([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), (n_regions, 1))
    if n_regions > 1:
        prior[:, 4] = yscale
    return prior


def cell_frames(n_regions: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise scale/offset so that ``A = scale * B + offset`` composes cell o B."""
    cells = layout_cells(n_regions)
    sx, sy, tx, ty = cells.T
    scale = np.stack([sx, sx, sx, sy, sy, sy], axis=1)
    offset = np.zeros((n_regions, 6))
    offset[:, 2] = tx
    offset[:, 5] = ty
    return scale.astype(dtype), offset.astype(dtype)


class Stem(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.conv = ConvBN(cin, cout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return pool2d(relu(self.conv(x)), "avg", 2, 2)


class Backbone(Module):
    """Stem + three residual blocks, 2x2 max-pool after the second block."""

    def __init__(self, cin: int, filters: Sequence[int], rng):
        self.stem = Stem(cin, filters[0], rng)
        self.blocks = [
            ResidualBlock(filters[0], filters[0], rng),
            ResidualBlock(filters[0], filters[1], rng),
            ResidualBlock(filters[1], filters[2], rng),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        h = self.blocks[0](h)
        h = self.blocks[1](h)
        h = pool2d(h, "max", 2, 2)
        return self.blocks[2](h)


def _check_spatial(h: int, w: int, need: int, name: str) -> None:
    # stem avg-pool halves, the max-pool halves again
    if h // 2 < 2 or w // 2 < 2:
        raise ShapeError(f"{name}: input {h}x{w} too small for the stem 2x2 average pool")
    if (h // 2) // 2 < need or (w // 2) // 2 < need:
        raise ShapeError(f"{name}: input {h}x{w} too small for the final pooling layer (needs {need} after two 2x downsamplings)")


class LocalizationNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        f = config.loc_filters
        self.backbone = Backbone(config.in_channels, f, rng)
        feat = f[2] * config.loc_pool[0] * config.loc_pool[1]
        self.rnn = LSTMCell(feat, config.loc_hidden, rng)
        if config.head == "lstm":
            self.head = LSTMCell(config.loc_hidden, 6, None, zero=True)
        elif config.head == "linear":
            self.head = Linear(config.loc_hidden, 6, None)
            self.head.bias.requires_grad = False
        else:
            raise ValueError(f"unknown localization head {config.head!r}")
        self.prior = Tensor(fresh_prior(config.num_regions, config.prior_yscale).astype(get_default_dtype()), requires_grad=True)

    @property
    def num_regions(self) -> int:
        return self.prior.shape[0]

    def set_regions(self, n_regions: int) -> None:
        """Re-tile for a new region count, carrying the learned cell-relative priors over."""
        old = self.prior.data
        idx = [min(n, old.shape[0] - 1) for n in range(n_regions)]
        self.prior = Tensor(old[idx].copy(), requires_grad=True)
        self.config = replace(self.config, num_regions=n_regions)

    def features(self, images: Tensor) -> Tensor:
        B, _, H, W = images.shape
        _check_spatial(H, W, max(self.config.loc_pool), "localization net")
        h = self.backbone(images)
        return adaptive_avg_pool2d(h, self.config.loc_pool).reshape(B, -1)

    def __call__(self, images) -> Tensor:
        """Cell-composed affine matrices ``[B, N, 6]`` (before rotation dropout)."""
        images = as_tensor(images)
        B = images.shape[0]
        c = self.features(images)
        dtype = images.dtype
        N = self.num_regions
        scale, offset = cell_frames(N, dtype)
        state = self.rnn.initial_state(B, dtype)
        head_state = self.head.initial_state(B, dtype) if isinstance(self.head, LSTMCell) else None
        thetas = []
        for n in range(N):
            state = self.rnn(c, state)
            h = state[0]
            if head_state is not None:
                head_state = self.head(h, head_state)
                rel = head_state[0] + self.prior[n]
            else:
                rel = self.head(h) + self.prior[n]
            thetas.append(rel * scale[n] + offset[n])
        return stack(thetas, axis=1)


class RecognitionNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        f = config.rec_filters
        self.backbone = Backbone(config.in_channels, f, rng)
        ch, cw = config.crop_size
        _check_spatial(ch, cw, config.rec_pool, "recognition net")
        fh = (ch // 2) // 2 - config.rec_pool + 1
        fw = (cw // 2) // 2 - config.rec_pool + 1
        self.classifier = Linear(f[2] * fh * fw, config.timesteps * config.num_classes, rng)

    def __call__(self, crops) -> Tensor:
        crops = as_tensor(crops)
        if crops.ndim != 4 or tuple(crops.shape[2:]) != tuple(self.config.crop_size):
            raise ShapeError(f"recognition net expects crops [M,C,{self.config.crop_size[0]},{self.config.crop_size[1]}], got {crops.shape}")
        M = crops.shape[0]
        h = self.backbone(crops)
        h = pool2d(h, "avg", self.config.rec_pool, 1).reshape(M, -1)
        return self.classifier(h).reshape(M, self.config.timesteps, self.config.num_classes)


@dataclass
class Forward:
    theta: Tensor            # [B, N, 6] after rotation dropout
    grids: SamplingGrid      # transformed: [B, N, Ho, Wo, 2]
    crops: Tensor            # [B, N, C, Ho, Wo]
    logits: Tensor           # [B, N, T, K]


class TextSpotter(Module):
    """Localization net + sampler + recognition net."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        loc_rng, rec_rng = rng.spawn(2)
        self.loc = LocalizationNet(config, loc_rng)
        self.rec = RecognitionNet(config, rec_rng)
        self._base = make_base_grid(*config.crop_size)

    @property
    def config(self) -> ModelConfig:
        return replace(self.loc.config, num_regions=self.loc.num_regions)

    def set_regions(self, n_regions: int) -> None:
        self.loc.set_regions(n_regions)

    def reinit_recognition(self, rng: np.random.Generator) -> None:
        self.rec = RecognitionNet(self.config, rng)

    def __call__(self, images, dropout_p: float = 0.0, rng=None) -> Forward:
        images = as_tensor(images)
        B = images.shape[0]
        theta = loc_forward(self.loc, images, dropout_p, rng, self.training)
        grids = generate_grids(theta, self._base)
        crops = bilinear_sample(images, grids)
        N = theta.shape[1]
        C, Ho, Wo = crops.shape[2:]
        logits = recog_forward(self.rec, crops.reshape(B * N, C, Ho, Wo))
        return Forward(theta, grids, crops, logits.reshape(B, N, *logits.shape[1:]))


def loc_forward(net: LocalizationNet, images, dropout_p: float, rng, training: bool) -> Tensor:
    """Affine matrices ``[B, N, 6]`` with rotation dropout applied when training."""
    theta = net(images)
    return rotation_dropout(theta, dropout_p, rng, training)


def recog_forward(net: RecognitionNet, crops) -> Tensor:
    return net(crops)


def predict_sequences(logits, alphabet: Alphabet) -> list[str]:
    """Argmax per timestep then drop every blank. ``logits`` is ``[..., T, K]``."""
    arr = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    arr = arr.reshape(-1, *arr.shape[-2:])
    ids = arr.argmax(axis=-1)
    return [alphabet.decode(row) for row in ids]


def init_params(rng: np.random.Generator, config: ModelConfig) -> TextSpotter:
    return TextSpotter(config, rng)
