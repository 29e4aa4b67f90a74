"""Optimization, evaluation, curriculum and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from shapely.geometry import Polygon

from .data import Dataset, TrainBatch, load_dataset
from .networks import Alphabet, ModelConfig, TextSpotter, predict_sequences
from .regularizers import GridLossBreakdown, RegWeights, breakdown, grid_terms, total_loss
from .tensor import no_grad
from .transformer import grids_to_bboxes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during a training step."""

    def __init__(self, step: int, message: str, detail: GridLossBreakdown | None = None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.detail = detail


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 50
    lambda1: float = 0.1
    lambda2: float = 0.1
    rotation_dropout: float = 0.1
    clip_norm: float = 2.0
    eval_interval: int = 200
    plateau_window: int = 5
    plateau_delta: float = 0.005
    checkpoint_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "momentum", "rotation_dropout", "clip_norm", "plateau_delta", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.rotation_dropout > 1:
            raise ValueError("rotation_dropout must be <= 1")
        if self.plateau_window < 2:
            raise ValueError("plateau_window must be >= 2")
        if self.batch_size < 1 or self.eval_interval < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, eval_interval and max_epochs must be >= 1")

    @property
    def weights(self) -> RegWeights:
        return RegWeights(self.lambda1, self.lambda2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown training option {k!r}")
            out[k] = v
        return cls(**out)


class SGD:
    """SGD with momentum: ``v = m * v + g``; ``p -= lr * v``. Velocity starts at zero."""

    def __init__(self, model: TextSpotter, lr: float, momentum: float):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def reset(self) -> None:
        self.velocity = {}

    def step(self) -> None:
        for name, p in self.model.named_parameters().items():
            if p.grad is None:
                continue
            v = self.velocity.get(name)
            if v is None or v.shape != p.shape:
                v = np.zeros_like(p.data)
            v = self.momentum * v + p.grad
            self.velocity[name] = v.astype(p.data.dtype, copy=False)
            p.data = p.data - self.velocity[name] * p.data.dtype.type(self.lr)


def _grad_norm(model: TextSpotter) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def train_step(
    model: TextSpotter, batch: TrainBatch, optimizer: SGD, config: TrainConfig,
    rng: np.random.Generator, step: int = 0,
) -> GridLossBreakdown:
    """One forward/backward/update on a batch; returns the loss breakdown."""
    model.train()
    fwd = model(batch.images, config.rotation_dropout, rng)
    terms = grid_terms(fwd.theta, config.weights)
    loss = total_loss(fwd.logits, batch.targets, terms.total)
    detail = breakdown(terms, config.weights, fwd.logits.data, batch.targets, loss)
    if not np.isfinite(detail.total):
        raise DivergenceError(step, f"non-finite loss {detail.total} (ce={detail.ce}, l_grid={detail.l_grid})", detail)
    model.zero_grad()
    loss.backward()
    norm = _grad_norm(model)
    if not np.isfinite(norm):
        raise DivergenceError(step, f"non-finite gradient norm (loss {detail.total})", detail)
    if config.clip_norm > 0 and norm > config.clip_norm:
        scale = config.clip_norm / norm
        for p in model.parameters():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    optimizer.step()
    detail.grad_norm = norm
    return detail


# ---------------------------------------------------------------------------
# evaluation


def quad_iou(a, b) -> float:
    """IoU of two quadrilaterals given as 4 corners in TL, TR, BL, BR order."""
    pa = Polygon(np.asarray(a, dtype=np.float64)[[0, 1, 3, 2]])
    pb = Polygon(np.asarray(b, dtype=np.float64)[[0, 1, 3, 2]])
    if not pa.is_valid:
        pa = pa.buffer(0)
    if not pb.is_valid:
        pb = pb.buffer(0)
    union = pa.union(pb).area
    return float(pa.intersection(pb).area / union) if union > 0 else 0.0


@dataclass
class EvalMetrics:
    sequence_accuracy: float
    region_accuracy: list[float]
    mean_iou: float | None
    count: int
    predictions: list[list[str]] = field(default_factory=list, repr=False)
    boxes: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {
            "count": self.count,
            "sequence_accuracy": self.sequence_accuracy,
            "region_accuracy": self.region_accuracy,
        }
        if self.mean_iou is not None:
            d["mean_iou"] = self.mean_iou
        return d


def sequence_accuracy(predictions: Sequence[Sequence[str]], labels: Sequence[Sequence[str]]) -> float:
    if not labels:
        return 0.0
    return sum(list(p) == list(l) for p, l in zip(predictions, labels)) / len(labels)


def mean_iou(pred_boxes, true_boxes) -> float:
    vals = [quad_iou(p, t) for ps, ts in zip(pred_boxes, true_boxes) for p, t in zip(ps, ts)]
    return float(np.mean(vals)) if vals else 0.0


def predict(model: TextSpotter, images: np.ndarray, alphabet: Alphabet, batch_size: int = 64):
    """Decoded strings ``[B][N]`` and pixel boxes ``[B][N][4][2]`` in inference mode."""
    was_training = model.training
    model.eval()
    H, W = images.shape[-2:]
    strings, boxes = [], []
    try:
        with no_grad():
            for k in range(0, len(images), batch_size):
                chunk = images[k : k + batch_size]
                fwd = model(chunk)
                N = fwd.theta.shape[1]
                decoded = predict_sequences(fwd.logits, alphabet)
                grid = fwd.grids.transformed.data
                for b in range(len(chunk)):
                    strings.append(decoded[b * N : (b + 1) * N])
                    boxes.append([bb.corners for bb in grids_to_bboxes(grid[b], W, H)])
    finally:
        model.train(was_training)
    return strings, boxes


def evaluate(model: TextSpotter, dataset: Dataset, alphabet: Alphabet | None = None, batch_size: int = 64) -> EvalMetrics:
    alphabet = alphabet or dataset.alphabet
    preds, boxes = predict(model, dataset.images, alphabet, batch_size)
    labels = dataset.labels
    N = dataset.regions
    region_acc = [
        float(np.mean([p[n] == l[n] for p, l in zip(preds, labels)])) if labels else 0.0 for n in range(N)
    ]
    iou = None
    if dataset.has_boxes:
        pairs = [(p, t) for p, t in zip(boxes, dataset.boxes) if t is not None]
        iou = mean_iou([p for p, _ in pairs], [t for _, t in pairs])
    return EvalMetrics(sequence_accuracy(preds, labels), region_acc, iou, len(labels), preds, boxes)


# ---------------------------------------------------------------------------
# curriculum


@dataclass
class CurriculumState:
    stages: list[str]
    stage: int = 0
    history: list[list[float]] = field(default_factory=lambda: [[]])
    transitions: list[dict] = field(default_factory=list)

    def __post_init__(self):
        while len(self.history) <= self.stage:
            self.history.append([])

    @property
    def finished(self) -> bool:
        return self.stage >= len(self.stages)

    @property
    def current(self) -> list[float]:
        return self.history[self.stage]

    def advance(self, step: int, reason: str = "plateau") -> None:
        window = list(self.current)
        self.transitions.append({"from": self.stage, "to": self.stage + 1, "step": step, "reason": reason, "history": window})
        log.info("curriculum: stage %d -> %d at step %d (%s, history %s)", self.stage, self.stage + 1, step, reason, window)
        self.stage += 1
        self.history.append([])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumState":
        return cls(**d)


def plateaued(history: Sequence[float], K: int, delta: float) -> bool:
    if len(history) < 2 * K:
        return False
    return max(history[-K:]) - max(history[:-K]) < delta


def curriculum_check(state: CurriculumState, new_val_acc: float, K: int, delta: float) -> bool:
    """Record ``new_val_acc`` for the current stage; True if accuracy has settled."""
    state.current.append(float(new_val_acc))
    return plateaued(state.current, K, delta)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    curriculum: CurriculumState | None = None


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["model_config"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.manifest["train_config"])

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet.from_classes(self.manifest["alphabet"])

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(
    model: TextSpotter, optimizer: SGD | None, state: TrainState, path: str | os.PathLike,
    alphabet: Alphabet, train_config: TrainConfig | None = None, data_info: dict | None = None,
) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, np.ndarray]] = []
    entries += [(f"param/{k}", v.data) for k, v in model.named_parameters().items()]
    entries += [(f"buffer/{k}", v) for k, v in model.named_buffers().items()]
    if optimizer is not None:
        entries += [(f"velocity/{k}", v) for k, v in sorted(optimizer.velocity.items())]
    table, chunks, offset = [], [], 0
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "model_config": model.config.to_dict(),
        "train_config": asdict(train_config) if train_config else None,
        "alphabet": alphabet.classes,
        "tensors": table,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "step": state.step,
        "epoch": state.epoch,
        "batch_index": state.batch_index,
        "stage": state.curriculum.stage if state.curriculum else 0,
        "curriculum": state.curriculum.to_dict() if state.curriculum else None,
        "rng_state": state.rng.bit_generator.state,
        "optimizer": None if optimizer is None else {"lr": optimizer.lr, "momentum": optimizer.momentum},
        "bn": {"eps": 1e-5, "momentum": 0.9},
        "data": data_info or {},
    }
    (out / "tensors.bin").write_bytes(blob)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return out


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    root = Path(path)
    mpath, bpath = root / "manifest.json", root / "tensors.bin"
    if not mpath.is_file() or not bpath.is_file():
        raise CheckpointError(f"{root}: not a checkpoint (need manifest.json and tensors.bin)")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{root}: unsupported checkpoint version {manifest.get('version')!r} (expected {CHECKPOINT_VERSION})")
    blob = bpath.read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(
                f"{root}: blob truncated: tensor {entry['name']!r} needs bytes {entry['offset']}..{end} but file has {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{root}: checksum mismatch; blob is corrupt")
    return Checkpoint(manifest, tensors)


def _load_params(model: TextSpotter, values: dict[str, np.ndarray], buffers: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, p in model.named_parameters().items():
        if name.startswith(prefix):
            if name not in values:
                raise CheckpointError(f"checkpoint has no tensor for parameter {name!r}")
            if tuple(values[name].shape) != p.shape:
                raise CheckpointError(f"parameter {name!r}: checkpoint shape {values[name].shape} != model {p.shape}")
            p.data = values[name].astype(p.data.dtype).copy()
            p.grad = None
    _load_buffers(model, buffers, prefix)


def _load_buffers(module, buffers: dict[str, np.ndarray], prefix: str, path: str = "") -> None:
    for name in module._buffer_names:
        key = path + name
        if key.startswith(prefix):
            if key not in buffers:
                raise CheckpointError(f"checkpoint has no buffer {key!r}")
            getattr(module, name)[...] = buffers[key]
    for child_name, child in module._children():
        if hasattr(child, "_buffer_names"):
            _load_buffers(child, buffers, prefix, path + child_name + ".")


def build_model(ckpt: Checkpoint) -> TextSpotter:
    model = TextSpotter(ckpt.model_config, np.random.default_rng(0))
    _load_params(model, ckpt.group("param/"), ckpt.group("buffer/"))
    return model


def restore(ckpt: Checkpoint) -> tuple[TextSpotter, SGD, TrainState]:
    """Model, optimizer (with velocity) and loop state from a checkpoint."""
    model = build_model(ckpt)
    opt_cfg = ckpt.manifest.get("optimizer") or {"lr": 0.0, "momentum": 0.0}
    opt = SGD(model, opt_cfg["lr"], opt_cfg["momentum"])
    opt.velocity = {k: v.copy() for k, v in ckpt.group("velocity/").items()}
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.manifest["rng_state"]
    cur = ckpt.manifest.get("curriculum")
    state = TrainState(
        step=ckpt.manifest["step"], epoch=ckpt.manifest["epoch"], batch_index=ckpt.manifest["batch_index"],
        rng=rng, curriculum=CurriculumState.from_dict(cur) if cur else None,
    )
    return model, opt, state


def restart_with_loc_weights(checkpoint: Checkpoint | str | os.PathLike, rng: np.random.Generator) -> TextSpotter:
    """Fresh model whose localization net is copied from ``checkpoint``."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    params, buffers = ckpt.group("param/"), ckpt.group("buffer/")
    if not any(k.startswith("loc.") for k in params):
        raise CheckpointError("checkpoint holds no localization tensors")
    model = TextSpotter(ckpt.model_config, rng)
    _load_params(model, params, buffers, prefix="loc.")
    return model


# ---------------------------------------------------------------------------
# training loop

METRIC_COLUMNS = ["step", "stage", "loss", "ce", "l_ar", "l_as", "l_di", "val_seq_acc", "mean_iou"]
REGION_COLUMNS = ["step", "n", "l_ar", "l_as", "l_di", "l_grid", "ce", "total"]


def resolve_stage(path: str | os.PathLike) -> tuple[Path, Path]:
    """Train and validation directories for a curriculum stage."""
    root = Path(path)
    train, val = root / "train", root / "val"
    if (train / "manifest.jsonl").is_file() and (val / "manifest.jsonl").is_file():
        return train, val
    raise FileNotFoundError(f"stage dataset {root} needs train/ and val/ subdirectories with manifests")


@dataclass
class StageData:
    train: Dataset
    val: Dataset


class Trainer:
    """Runs the curriculum: one dataset directory (with train/ and val/) per stage."""

    def __init__(
        self, model: TextSpotter, config: TrainConfig, stages: Sequence[str | os.PathLike], out_dir: str | os.PathLike,
        alphabet: Alphabet | None = None, optimizer: SGD | None = None, state: TrainState | None = None,
    ):
        for s in stages:
            resolve_stage(s)
        self.model = model
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.optimizer = optimizer or SGD(model, config.lr, config.momentum)
        self.optimizer.lr, self.optimizer.momentum = config.lr, config.momentum
        self.state = state or TrainState(rng=np.random.default_rng([config.seed, 1]))
        if self.state.curriculum is None:
            self.state.curriculum = CurriculumState([str(s) for s in stages])
        self._data: StageData | None = None
        self._data_stage = -1
        self.alphabet = alphabet
        self.last_eval: EvalMetrics | None = None
        self._metrics_new = not (self.out / "metrics.csv").exists() or self.state.step == 0

    @property
    def curriculum(self) -> CurriculumState:
        return self.state.curriculum

    def data(self) -> StageData:
        stage = min(self.curriculum.stage, len(self.curriculum.stages) - 1)
        if self._data_stage != stage:
            train, val = resolve_stage(self.curriculum.stages[stage])
            self._data = StageData(load_dataset(train), load_dataset(val))
            self._data_stage = stage
            if self.alphabet is None:
                self.alphabet = self._data.train.alphabet
            if self._data.train.max_len > self.model.config.timesteps:
                raise ValueError(f"stage {stage} labels need T={self._data.train.max_len} > model T={self.model.config.timesteps}")
            if self.model.loc.num_regions != self._data.train.regions:
                self.model.set_regions(self._data.train.regions)
        return self._data

    def _next_batch(self) -> TrainBatch:
        data = self.data().train
        bs = min(self.config.batch_size, len(data))
        per_epoch = len(data) // bs
        if self.state.batch_index >= per_epoch:
            self.state.epoch += 1
            self.state.batch_index = 0
        order = data.shuffle_order(self.config.seed, self.state.epoch)
        k = self.state.batch_index * bs
        self.state.batch_index += 1
        return data.batch(order[k : k + bs], self.alphabet, self.model.config.timesteps)

    def _open_csv(self, name: str, columns: list[str]):
        path = self.out / name
        fresh = self._metrics_new or not path.exists()
        fh = path.open("w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        if fresh:
            writer.writeheader()
        return fh, writer

    def checkpoint(self, name: str | None = None) -> Path:
        path = self.out / "checkpoints" / (name or f"step{self.state.step:06d}")
        train = self.data().train
        info = {"image_size": list(train.image_size), "channels": int(train.images.shape[1])}
        save_checkpoint(self.model, self.optimizer, self.state, path, self.alphabet, self.config, info)
        latest = self.out / "checkpoints" / "latest.txt"
        latest.write_text(path.name + "\n", encoding="utf-8")
        return path

    def evaluate(self) -> EvalMetrics:
        self.last_eval = evaluate(self.model, self.data().val, self.alphabet)
        return self.last_eval

    def advance_stage(self, reason: str) -> bool:
        """Move to the next stage; False if the curriculum is complete."""
        self.curriculum.advance(self.state.step, reason)
        self.state.epoch = 0
        self.state.batch_index = 0
        return not self.curriculum.finished

    def run(
        self, max_steps: int | None = None, stop: Callable[["Trainer", EvalMetrics], bool] | None = None,
        until_stage_end: bool = False,
    ) -> int:
        """Train until ``max_steps`` more steps, curriculum end or ``stop`` returns True.

        Returns the number of steps taken.  ``stop`` is called after each
        evaluation.  With ``until_stage_end`` the run also returns when the
        current stage is left.
        """
        taken = 0
        mfh, mw = self._open_csv("metrics.csv", METRIC_COLUMNS)
        rfh, rw = self._open_csv("regions.csv", REGION_COLUMNS)
        self._metrics_new = False
        try:
            while not self.curriculum.finished and (max_steps is None or taken < max_steps):
                if self.state.epoch >= self.config.max_epochs:
                    if not self.advance_stage("max_epochs"):
                        break
                    if until_stage_end:
                        break
                    continue
                batch = self._next_batch()
                detail = train_step(self.model, batch, self.optimizer, self.config, self.state.rng, self.state.step)
                self.state.step += 1
                taken += 1
                row = {
                    "step": self.state.step, "stage": self.curriculum.stage, "loss": repr(detail.total),
                    "ce": repr(float(detail.ce.sum())), "l_ar": repr(float(detail.l_ar.sum())),
                    "l_as": repr(float(detail.l_as.sum())), "l_di": repr(float(detail.l_di.sum())),
                    "val_seq_acc": "", "mean_iou": "",
                }
                for r in detail.rows(self.state.step):
                    rw.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
                advance = False
                if self.state.step % self.config.eval_interval == 0:
                    m = self.evaluate()
                    row["val_seq_acc"] = repr(m.sequence_accuracy)
                    row["mean_iou"] = "" if m.mean_iou is None else repr(m.mean_iou)
                    log.info("step %d stage %d loss %.4f val_acc %.4f iou %s", self.state.step, self.curriculum.stage,
                             detail.total, m.sequence_accuracy, row["mean_iou"] or "-")
                    advance = curriculum_check(self.curriculum, m.sequence_accuracy, self.config.plateau_window, self.config.plateau_delta)
                    mw.writerow(row)
                    mfh.flush()
                    rfh.flush()
                    if stop is not None and stop(self, m):
                        break
                else:
                    mw.writerow(row)
                if self.config.checkpoint_interval and self.state.step % self.config.checkpoint_interval == 0:
                    self.checkpoint()
                if advance:
                    self.advance_stage("plateau")
                    if until_stage_end or self.curriculum.finished:
                        break
        finally:
            mfh.close()
            rfh.close()
        return taken
