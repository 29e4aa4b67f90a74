import csv
import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from see.data import DatasetSpec, generate_splits, load_dataset
from see.networks import Alphabet, ModelConfig, TextSpotter
from see.tensor import Tensor
from see.training import (
    SGD,
    CheckpointError,
    CurriculumState,
    DivergenceError,
    TrainBatch,
    TrainConfig,
    Trainer,
    TrainState,
    curriculum_check,
    evaluate,
    load_checkpoint,
    plateaued,
    quad_iou,
    restart_with_loc_weights,
    restore,
    save_checkpoint,
    sequence_accuracy,
    train_step,
)

DIGITS = Alphabet(tuple("0123456789"))


@pytest.fixture(scope="module")
def stage1(tmp_path_factory):
    root = tmp_path_factory.mktemp("stage1")
    generate_splits(DatasetSpec(count=1, seed=3), root, {"train": 24, "val": 8})
    return root


@pytest.fixture(scope="module")
def stage2(tmp_path_factory):
    root = tmp_path_factory.mktemp("stage2")
    generate_splits(DatasetSpec(image_size=(48, 96), regions=2, count=1, seed=4), root, {"train": 16, "val": 8})
    return root


def _batch(ds, n=4):
    return ds.batch(np.arange(n))


def _model(seed=0, **kw):
    return TextSpotter(ModelConfig(**kw), np.random.default_rng(seed))


def _losses(path):
    with open(path, newline="") as fh:
        return [row["loss"] for row in csv.DictReader(fh)]


# --- config ------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [{"lr": -1.0}, {"momentum": -0.1}, {"plateau_window": 1}, {"rotation_dropout": 2.0}])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = TrainConfig(lr=0.05, lambda1=0.2, seed=9)
    assert TrainConfig.from_dict(vars(cfg)) == cfg


# --- train step --------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters_bit_identical(stage1):
    ds = load_dataset(stage1 / "train")
    model = _model()
    before = {k: v.data.tobytes() for k, v in model.named_parameters().items()}
    cfg = TrainConfig(lr=0.0)
    train_step(model, _batch(ds), SGD(model, 0.0, 0.9), cfg, np.random.default_rng(0))
    assert {k: v.data.tobytes() for k, v in model.named_parameters().items()} == before


def test_first_step_moves_by_minus_lr_times_gradient(stage1):
    ds = load_dataset(stage1 / "train")
    model = _model()
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    cfg = TrainConfig(lr=0.01, momentum=0.9)
    train_step(model, _batch(ds), SGD(model, cfg.lr, cfg.momentum), cfg, np.random.default_rng(0))
    for k, p in model.named_parameters().items():
        # p.grad is the clipped gradient the update used
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert np.array_equal(p.data, before[k] - g * np.float32(0.01)), k


def test_gradient_clipping_bounds_the_global_norm(stage1):
    ds = load_dataset(stage1 / "train")
    model = _model()
    cfg = TrainConfig(clip_norm=0.5)
    detail = train_step(model, _batch(ds), SGD(model, cfg.lr, cfg.momentum), cfg, np.random.default_rng(0))
    clipped = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in model.parameters() if p.grad is not None))
    assert detail.grad_norm > 0.5
    assert clipped == pytest.approx(0.5, rel=1e-5)


def test_single_batch_overfit(stage1):
    ds = load_dataset(stage1 / "train")
    model = _model()
    cfg = TrainConfig()
    opt = SGD(model, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(0)
    batch = _batch(ds, 4)
    losses = [train_step(model, batch, opt, cfg, rng, s).total for s in range(200)]
    assert losses[-1] < 0.1 * losses[0], (losses[0], losses[-1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_halts_with_step_and_breakdown(stage1):
    ds = load_dataset(stage1 / "train")
    model = _model()
    model.rec.classifier.weight.data[:] = np.inf
    cfg = TrainConfig()
    with pytest.raises(DivergenceError) as info:
        train_step(model, _batch(ds), SGD(model, cfg.lr, cfg.momentum), cfg, np.random.default_rng(0), step=17)
    assert info.value.step == 17
    assert info.value.detail is not None and not np.isfinite(info.value.detail.total)


# --- evaluation --------------------------------------------------------------


def test_sequence_accuracy_examples():
    labels = [["12", "3"]] * 10
    assert sequence_accuracy(labels, labels) == 1.0
    preds = [["12", "3"]] * 9 + [["12", "4"]]
    assert sequence_accuracy(preds, labels) == 0.9


def test_quad_iou_examples():
    sq = [[0, 0], [10, 0], [0, 10], [10, 10]]
    assert quad_iou(sq, sq) == pytest.approx(1.0)
    far = [[20, 0], [30, 0], [20, 10], [30, 10]]
    assert quad_iou(sq, far) == 0.0
    half = [[5, 0], [15, 0], [5, 10], [15, 10]]
    assert quad_iou(sq, half) == pytest.approx(1 / 3)


def test_untrained_model_is_at_chance(tmp_path):
    generate_splits(DatasetSpec(count=1, seed=11), tmp_path, {"val": 200})
    m = evaluate(_model(5), load_dataset(tmp_path / "val"))
    assert m.sequence_accuracy < 0.01
    assert m.count == 200 and m.mean_iou is not None
    assert "mean_iou" in m.to_dict()


def test_evaluate_without_boxes_omits_iou(stage1, tmp_path):
    ds = _strip_boxes(stage1 / "val", tmp_path / "val")
    m = evaluate(_model(), load_dataset(ds))
    assert m.mean_iou is None and "mean_iou" not in m.to_dict()


def _strip_boxes(src, dst):
    import shutil

    shutil.copytree(src, dst)
    lines = [json.loads(l) for l in (dst / "manifest.jsonl").read_text().splitlines()]
    (dst / "manifest.jsonl").write_text("".join(json.dumps({**r, "boxes": None}) + "\n" for r in lines))
    return dst


# --- curriculum --------------------------------------------------------------


def test_plateau_advances_on_settled_history():
    history = [0.80, 0.801, 0.802, 0.801, 0.802, 0.802, 0.801, 0.802, 0.802, 0.802]
    assert plateaued(history, 5, 0.005)


def test_plateau_holds_while_rising():
    history = [0.5 + 0.02 * i for i in range(10)]
    assert not plateaued(history, 5, 0.005)


def test_plateau_needs_two_windows():
    assert not any(plateaued([0.9] * n, 5, 0.005) for n in range(10))
    assert plateaued([0.9] * 10, 5, 0.005)


def test_curriculum_check_appends_and_logs_monotone_transitions():
    state = CurriculumState(["a", "b", "c"])
    for acc in [0.3] * 4:
        advance = curriculum_check(state, acc, 2, 0.01)
    assert advance and state.history[0] == [0.3] * 4
    state.advance(40)
    state.advance(80, "max_epochs")
    assert [t["to"] for t in state.transitions] == [1, 2]
    assert state.transitions[0]["history"] == [0.3] * 4
    assert state.transitions[1]["reason"] == "max_epochs"
    assert CurriculumState.from_dict(state.to_dict()) == state


def test_trainer_walks_the_curriculum(stage1, stage2, tmp_path):
    cfg = TrainConfig(batch_size=4, eval_interval=1, plateau_window=2, plateau_delta=1.0, checkpoint_interval=0)
    trainer = Trainer(_model(timesteps=3), cfg, [stage1, stage2], tmp_path)
    trainer.run(max_steps=4, until_stage_end=True)
    assert trainer.curriculum.stage == 1
    assert trainer.curriculum.transitions[0]["step"] == 4
    trainer.run(max_steps=2)
    # new stage, new region count
    assert trainer.model.loc.num_regions == 2
    stages = [int(r["stage"]) for r in csv.DictReader(open(tmp_path / "metrics.csv"))]
    assert stages == sorted(stages) and stages[-1] == 1
    regions = list(csv.DictReader(open(tmp_path / "regions.csv")))
    assert {r["n"] for r in regions if r["step"] == "6"} == {"0", "1"}


def test_missing_stage_split_rejected(tmp_path):
    with pytest.raises(FileNotFoundError, match="train/ and val/"):
        Trainer(_model(), TrainConfig(), [tmp_path], tmp_path / "out")


def test_training_runs_on_manifests_without_boxes(stage1, tmp_path):
    root = tmp_path / "nobox"
    _strip_boxes(stage1 / "train", root / "train")
    _strip_boxes(stage1 / "val", root / "val")
    cfg = TrainConfig(batch_size=4, eval_interval=2, checkpoint_interval=0)
    trainer = Trainer(_model(), cfg, [root], tmp_path / "out")
    assert trainer.run(max_steps=2) == 2
    assert trainer.last_eval.mean_iou is None


# --- restart -----------------------------------------------------------------


def _saved(tmp_path, model, opt=None, state=None):
    return save_checkpoint(model, opt, state or TrainState(), tmp_path / "ckpt", DIGITS, TrainConfig())


def test_restart_copies_localization_and_redraws_recognition(stage1, tmp_path):
    ds = load_dataset(stage1 / "train")
    model = _model()
    cfg = TrainConfig()
    opt = SGD(model, cfg.lr, cfg.momentum)
    for s in range(3):
        train_step(model, _batch(ds), opt, cfg, np.random.default_rng(s))
    path = _saved(tmp_path, model, opt)
    fresh = restart_with_loc_weights(path, np.random.default_rng(99))
    old, new = model.named_parameters(), fresh.named_parameters()
    for k in old:
        same = old[k].data.tobytes() == new[k].data.tobytes()
        assert same if k.startswith("loc.") else not same, k
    x = Tensor(ds.images[:2])
    model.eval(), fresh.eval()
    assert np.array_equal(model(x).grids.transformed.data, fresh(x).grids.transformed.data)


def test_restart_rejects_checkpoint_without_localization(tmp_path):
    ckpt = load_checkpoint(_saved(tmp_path, _model()))
    ckpt.tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith("param/loc.")}
    with pytest.raises(CheckpointError, match="localization"):
        restart_with_loc_weights(ckpt, np.random.default_rng(0))


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(stage1, tmp_path):
    ds = load_dataset(stage1 / "train")
    model = _model()
    cfg = TrainConfig()
    opt = SGD(model, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(4)
    for s in range(2):
        train_step(model, _batch(ds), opt, cfg, rng)
    cur = CurriculumState(["x", "y"], history=[[0.1, 0.2]])
    state = TrainState(step=2, epoch=1, batch_index=3, rng=rng, curriculum=cur)
    path = save_checkpoint(model, opt, state, tmp_path / "c", DIGITS, cfg)
    model.eval()
    x = Tensor(ds.images[:3])
    ref = model(x).logits.data.tobytes()
    m2, opt2, st2 = restore(load_checkpoint(path))
    m2.eval()
    assert m2(x).logits.data.tobytes() == ref
    assert opt2.velocity.keys() == opt.velocity.keys()
    assert all(np.array_equal(opt2.velocity[k], opt.velocity[k]) for k in opt.velocity)
    assert st2.rng.bit_generator.state == rng.bit_generator.state
    assert (st2.step, st2.epoch, st2.batch_index) == (2, 1, 3)
    assert st2.curriculum == cur
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["alphabet"][0] == "" and manifest["dtype"] == "<f4"


def test_truncated_blob_names_the_tensor(tmp_path):
    path = _saved(tmp_path, _model())
    blob = (path / "tensors.bin").read_bytes()
    (path / "tensors.bin").write_bytes(blob[:-4])
    last = json.loads((path / "manifest.json").read_text())["tensors"][-1]["name"]
    with pytest.raises(CheckpointError, match=f"truncated.*{last}"):
        load_checkpoint(path)


def test_corrupt_blob_fails_checksum(tmp_path):
    path = _saved(tmp_path, _model())
    blob = bytearray((path / "tensors.bin").read_bytes())
    blob[100] ^= 0xFF
    (path / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_unknown_version_rejected(tmp_path):
    path = _saved(tmp_path, _model())
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_resume_matches_uninterrupted_run(stage1, tmp_path):
    cfg = TrainConfig(batch_size=8, eval_interval=100, checkpoint_interval=4, seed=3)
    straight = Trainer(_model(3), cfg, [stage1], tmp_path / "a")
    straight.run(max_steps=7)
    ref = _losses(tmp_path / "a" / "metrics.csv")

    model, opt, state = restore(load_checkpoint(tmp_path / "a" / "checkpoints" / "step000004"))
    resumed = Trainer(model, cfg, [stage1], tmp_path / "b", optimizer=opt, state=state)
    resumed.run(max_steps=3)
    # batches of 8 from 24 samples: the run crosses an epoch boundary after the checkpoint
    assert _losses(tmp_path / "b" / "metrics.csv") == ref[4:]


def test_first_ten_losses_identical_across_processes(stage1, tmp_path):
    script = textwrap.dedent(
        f"""
        import numpy as np
        from see.networks import ModelConfig, TextSpotter
        from see.training import TrainConfig, Trainer
        cfg = TrainConfig(batch_size=4, eval_interval=100, checkpoint_interval=0, seed=5)
        Trainer(TextSpotter(ModelConfig(), np.random.default_rng(5)), cfg, [{str(stage1)!r}], __import__("sys").argv[1]).run(max_steps=10)
        """
    )
    for name in ("p1", "p2"):
        subprocess.run([sys.executable, "-c", script, str(tmp_path / name)], check=True)
    a, b = _losses(tmp_path / "p1" / "metrics.csv"), _losses(tmp_path / "p2" / "metrics.csv")
    assert len(a) == 10 and a == b


def test_train_batch_has_no_box_field():
    assert set(TrainBatch.__dataclass_fields__) == {"images", "targets"}
