"""End-to-end acceptance criteria.

Each test carries a ``criterion`` mark; the conftest prints one PASS/FAIL
line per criterion at the end of the session.  The two learning criteria
share one curriculum run (stage 1 -> stage 2) and dominate the runtime.
"""

import csv
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from see.data import DatasetSpec, generate_splits, load_dataset
from see.networks import ModelConfig, TextSpotter
from see.tensor import Tensor
from see.training import TrainConfig, Trainer, evaluate, plateaued, restore, load_checkpoint, train_step
from see.verify import check_grid_generator, check_identity_law, check_regularizer_table, check_sampler_oracle, run_all

STAGE1_TARGET = 0.95
STAGE1_CPU = 30 * 60.0
STAGE2_IOU = 0.5
# stage 2 runs until the plateau rule fires or this many steps pass
STAGE2_STEPS = 1300


def detail(record, text):
    record("detail", text)


def _strip_boxes(split):
    manifest = split / "manifest.jsonl"
    recs = [json.loads(line) for line in manifest.read_text().splitlines()]
    manifest.write_text("".join(json.dumps({**r, "boxes": None}) + "\n" for r in recs))


# --- checks that need no training ---------------------------------------------


@pytest.mark.criterion("gradient fidelity")
def test_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    results = run_all()
    elapsed = time.perf_counter() - t0
    for r in results[:-4]:
        print(r.line())
    unit = max(r.max_error for r in results[:-4] if r.tolerance == 1e-5)
    pipe = max(r.max_error for r in results[:-4] if r.tolerance == 1e-4)
    detail(record_property, f"unit ops {unit:.1e} <= 1e-5, pipeline {pipe:.1e} <= 1e-4, 20 seeds, {elapsed:.0f}s")
    assert all(r.passed for r in results[:-4]), [r.line() for r in results if not r.passed]
    assert elapsed < 120


@pytest.mark.criterion("sampler oracle")
def test_sampler_oracle_and_exact_grid_generator(record_property):
    sampler, grid = check_sampler_oracle(), check_grid_generator()
    detail(record_property, f"50 pairs max {sampler.max_error:.1e}, grid generator max {grid.max_error:.1e}")
    assert sampler.passed and sampler.tolerance == 1e-6
    assert grid.max_error == 0.0


@pytest.mark.criterion("identity law")
def test_identity_law(record_property):
    r = check_identity_law()
    detail(record_property, f"max {r.max_error:.1e}")
    assert r.passed and r.tolerance == 1e-6


@pytest.mark.criterion("regularizer table")
def test_regularizer_table(record_property):
    r = check_regularizer_table()
    detail(record_property, f"9 cases, max {r.max_error:.1e}")
    assert r.passed and r.tolerance == 1e-6


@pytest.mark.criterion("curriculum mechanics")
def test_plateau_worked_examples():
    # advance: settled around 0.80
    assert plateaued([0.80, 0.801, 0.802, 0.801, 0.802, 0.802, 0.801, 0.802, 0.802, 0.802], 5, 0.005)
    # no advance: +0.02 per evaluation
    assert not plateaued([0.5 + 0.02 * i for i in range(10)], 5, 0.005)
    # guard: fewer than 2K entries never advance
    assert not any(plateaued([0.9] * n, 5, 0.005) for n in range(10))


_head_weights = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def two_region_model():
    return TextSpotter(ModelConfig(num_regions=2), np.random.default_rng(0))


@pytest.mark.criterion("rotation dropout")
@settings(max_examples=40, deadline=None)
@given(_head_weights)
def test_full_rotation_dropout_gives_axis_aligned_grids(two_region_model, seed):
    rng = np.random.default_rng(seed)
    model = two_region_model.train()
    # a random head so the localization net predicts rotated and sheared frames
    for p in model.loc.head.parameters():
        p.data = rng.normal(0.0, 0.5, p.shape).astype(p.data.dtype)
    images = Tensor(rng.random((2, 1, 48, 96)).astype(np.float32))
    free = model(images, 0.0, rng).grids.transformed.data
    g = model(images, 1.0, rng).grids.transformed.data
    # u depends on the output column only, v on the output row only
    assert np.array_equal(g[..., 0], np.broadcast_to(g[..., :1, :, 0], g[..., 0].shape))
    assert np.array_equal(g[..., 1], np.broadcast_to(g[..., :, :1, 1], g[..., 1].shape))
    assert not np.array_equal(free, g)


# --- determinism and persistence ------------------------------------------------


@pytest.fixture(scope="module")
def small_stage(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_stage")
    generate_splits(DatasetSpec(seed=7), root, {"train": 32, "val": 8})
    return root


_LOSSES = """
import sys
import numpy as np
from see.networks import ModelConfig, TextSpotter
from see.training import TrainConfig, Trainer
model = TextSpotter(ModelConfig(), np.random.default_rng([7, 0]))
tr = Trainer(model, TrainConfig(seed=7, batch_size=8, eval_interval=1000, checkpoint_interval=0), [sys.argv[1]], sys.argv[2])
tr.run(max_steps=10)
"""


@pytest.mark.criterion("determinism and persistence")
def test_first_ten_losses_bit_identical_across_processes(small_stage, tmp_path, record_property):
    runs = []
    for name in ("a", "b"):
        subprocess.run([sys.executable, "-c", _LOSSES, str(small_stage), str(tmp_path / name)], check=True)
        runs.append([r["loss"] for r in csv.DictReader(open(tmp_path / name / "metrics.csv"))])
    assert len(runs[0]) == 10 and runs[0] == runs[1]
    detail(record_property, "10 losses identical across two processes")


@pytest.mark.criterion("determinism and persistence")
def test_resume_matches_uninterrupted_next_step(small_stage, tmp_path, record_property):
    cfg = TrainConfig(seed=7, batch_size=8, eval_interval=1000, checkpoint_interval=0)
    tr = Trainer(TextSpotter(ModelConfig(), np.random.default_rng([7, 0])), cfg, [small_stage], tmp_path / "run")
    tr.run(max_steps=5)
    ckpt = tr.checkpoint()
    tr.run(max_steps=1)
    uninterrupted = [r["loss"] for r in csv.DictReader(open(tmp_path / "run" / "metrics.csv"))][5]

    model, opt, state = restore(load_checkpoint(ckpt))
    again = Trainer(model, cfg, [small_stage], tmp_path / "resumed", optimizer=opt, state=state)
    batch = again._next_batch()
    resumed = train_step(model, batch, opt, cfg, state.rng, state.step).total
    assert repr(resumed) == uninterrupted
    detail(record_property, "resumed step-6 loss equals uninterrupted run")


# --- learning: one curriculum run feeds both criteria --------------------------


@pytest.fixture(scope="module")
def curriculum_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("curriculum")
    stage1 = generate_splits(DatasetSpec(seed=7), root / "stage1", {"train": 5000, "val": 1000})
    stage2 = generate_splits(DatasetSpec(image_size=(48, 96), regions=2, seed=8), root / "stage2", {"train": 5000, "val": 1000})
    # boxes stay only in the validation splits, to be scored after training
    _strip_boxes(stage1["train"])
    _strip_boxes(stage2["train"])

    cfg = TrainConfig(seed=7, eval_interval=100, checkpoint_interval=0)
    model = TextSpotter(ModelConfig(), np.random.default_rng([7, 0]))
    trainer = Trainer(model, cfg, [root / "stage1", root / "stage2"], root / "run")
    out = {"root": root, "trainer": trainer}

    t0 = time.process_time()
    trainer.run(stop=lambda t, m: m.sequence_accuracy >= STAGE1_TARGET or time.process_time() - t0 > STAGE1_CPU)
    out["stage1_cpu"] = time.process_time() - t0
    out["stage1_steps"] = trainer.state.step
    out["stage1_acc"] = trainer.last_eval.sequence_accuracy
    if trainer.curriculum.stage == 0:
        trainer.advance_stage("accuracy target")

    out["stage2_prior_iou"] = trainer.evaluate().mean_iou
    # stage 2 ends on the label-only plateau rule or the step budget; boxes never steer it
    t1 = time.process_time()
    trainer.run(max_steps=STAGE2_STEPS)
    out["stage2_cpu"] = time.process_time() - t1
    out["stage2"] = evaluate(trainer.model, load_dataset(stage2["val"]))
    return out


def _metrics(run):
    return list(csv.DictReader(open(run["root"] / "run" / "metrics.csv")))


@pytest.mark.slow
@pytest.mark.criterion("stage-1 learning")
def test_stage1_reaches_target_accuracy_in_budget(curriculum_run, record_property):
    r = curriculum_run
    detail(record_property, f"val acc {r['stage1_acc']:.3f} after {r['stage1_steps']} steps, {r['stage1_cpu'] / 60:.1f} CPU-min")
    losses = [float(row["loss"]) for row in _metrics(r) if row["stage"] == "0"]
    assert all(math.isfinite(v) for v in losses)
    assert r["stage1_acc"] >= STAGE1_TARGET
    assert r["stage1_cpu"] <= STAGE1_CPU


@pytest.mark.slow
@pytest.mark.criterion("semi-supervised detection")
def test_stage2_boxes_learned_without_box_supervision(curriculum_run, record_property):
    r = curriculum_run
    m = r["stage2"]
    detail(record_property, f"mean IoU {m.mean_iou:.3f} (prior {r['stage2_prior_iou']:.3f}), seq acc {m.sequence_accuracy:.3f}, "
                             f"{r['stage2_cpu'] / 60:.1f} CPU-min")
    for stage in ("stage1", "stage2"):
        assert not load_dataset(r["root"] / stage / "train").has_boxes
    assert m.mean_iou >= STAGE2_IOU


@pytest.mark.slow
@pytest.mark.criterion("curriculum mechanics")
def test_stage_transitions_logged_and_monotone(curriculum_run, record_property):
    trainer = curriculum_run["trainer"]
    trans = trainer.curriculum.transitions
    assert trans and trans[0]["from"] == 0 and trans[0]["to"] == 1
    assert [t["to"] for t in trans] == list(range(1, len(trans) + 1))
    assert [t["step"] for t in trans] == sorted(t["step"] for t in trans)
    stages = [int(row["stage"]) for row in _metrics(curriculum_run)]
    assert stages == sorted(stages) and stages[-1] == 1
    assert set(int(row["n"]) for row in csv.DictReader(open(curriculum_run["root"] / "run" / "regions.csv"))) == {0, 1}
    detail(record_property, "; ".join(f"{t['from']}->{t['to']} at step {t['step']} ({t['reason']})" for t in trans))
