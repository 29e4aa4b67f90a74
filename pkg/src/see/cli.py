"""Command line: ``see gen-data | train | restart | eval | predict | verify``.

Exit codes: 0 ok, 1 internal or check failure, 2 usage or validation error.
stdout carries machine-readable output only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("see")


class UsageError(Exception):
    """Bad input detected by a command (exit code 2)."""


# ---------------------------------------------------------------------------
# config files: flat key=value, '#' comments; explicit flags win


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _explicit(action: argparse.Action, argv: list[str]) -> bool:
    return any(tok == opt or tok.startswith(opt + "=") for tok in argv for opt in action.option_strings)


def apply_config(parser: argparse.ArgumentParser, ns: argparse.Namespace, argv: list[str], values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions if a.option_strings}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"config file: unknown option {key!r}")
        if _explicit(action, argv):
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            value = [(action.type or str)(v.strip()) for v in raw.split(",") if v.strip()]
        elif action.nargs not in (None, 1):
            value = [(action.type or str)(v) for v in raw.replace(",", " ").split()]
        else:
            try:
                value = (action.type or str)(raw)
            except ValueError:
                raise UsageError(f"config file: invalid value {raw!r} for {key}") from None
        setattr(ns, key, value)


def echo_config(ns: argparse.Namespace, out_dir: Path) -> None:
    """Write the fully resolved run configuration next to the outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(vars(ns)):
        if key in ("func", "inject_fault"):
            continue
        value = getattr(ns, key)
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={'' if value is None else value}")
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(ns) -> int:
    from .data import DatasetSpec, generate_dataset, generate_splits

    spec = DatasetSpec(
        image_size=(ns.height, ns.width), regions=ns.regions, digits=(ns.min_digits, ns.max_digits),
        placement=ns.mode, clutter=ns.clutter, jitter=ns.jitter, rotation_deg=ns.rotation,
        count=ns.count, seed=ns.seed, split=ns.split,
    )
    spec.validate()
    out = Path(ns.out)
    if ns.splits:
        counts = {}
        for part in ns.splits.split(","):
            name, _, n = part.partition("=")
            if not n.strip().isdigit():
                raise UsageError(f"--splits wants name=count pairs, got {part!r}")
            counts[name.strip()] = int(n)
        for n in counts.values():
            if n < 1:
                raise UsageError("split counts must be >= 1")
        paths = generate_splits(spec, out, counts)
        emit({"dataset": str(out), "splits": {k: str(v) for k, v in paths.items()}, "counts": counts})
    else:
        generate_dataset(spec, out)
        emit({"dataset": str(out), "count": spec.count})
    echo_config(ns, out)
    return 0


def _stage_meta(stage: str) -> dict:
    from .training import resolve_stage

    try:
        train, _ = resolve_stage(stage)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    meta = json.loads((train / "meta.json").read_text(encoding="utf-8"))
    first = (train / "manifest.jsonl").read_text(encoding="utf-8").split("\n", 1)[0]
    from PIL import Image

    with Image.open(train / json.loads(first)["image"]) as im:
        meta["channels"] = 3 if im.mode == "RGB" else 1
    return meta


def _train_config(ns, base: dict | None = None):
    from .training import TrainConfig

    values = dict(base or {})
    for key in ("lr", "momentum", "batch_size", "max_epochs", "lambda1", "lambda2", "rotation_dropout",
                "clip_norm", "eval_interval", "plateau_window", "plateau_delta", "checkpoint_interval", "seed"):
        v = getattr(ns, key, None)
        if v is not None:
            values[key] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def cmd_train(ns) -> int:
    from .networks import Alphabet, ModelConfig, TextSpotter
    from .training import CheckpointError, Trainer, load_checkpoint, restart_with_loc_weights, restore

    if not ns.stage:
        raise UsageError("train needs at least one --stage dataset directory")
    metas = [_stage_meta(s) for s in ns.stage]
    alphabet = Alphabet(tuple(metas[0]["alphabet"]))
    for s, m in zip(ns.stage, metas):
        if tuple(m["alphabet"]) != alphabet.symbols:
            raise UsageError(f"stage {s}: alphabet {m['alphabet']} differs from the first stage")
    out = Path(ns.out)
    optimizer = state = None
    if ns.resume:
        try:
            ckpt = load_checkpoint(ns.resume)
        except CheckpointError as exc:
            raise UsageError(str(exc)) from None
        config = _train_config(ns, ckpt.manifest.get("train_config"))
        model, optimizer, state = restore(ckpt)
        if state.curriculum is not None and [str(s) for s in ns.stage] != state.curriculum.stages:
            raise UsageError("--resume: stage list differs from the checkpoint's curriculum")
    else:
        config = _train_config(ns)
        rng = np.random.default_rng([config.seed, 0])
        if ns.restart_from:
            try:
                model = restart_with_loc_weights(load_checkpoint(ns.restart_from), rng)
            except CheckpointError as exc:
                raise UsageError(str(exc)) from None
            log.info("restart: localization weights from %s, fresh recognition net", ns.restart_from)
        else:
            mcfg = ModelConfig(
                num_regions=metas[0]["regions"],
                timesteps=ns.timesteps or max(m["max_len"] for m in metas),
                num_classes=alphabet.num_classes,
                in_channels=metas[0]["channels"],
                head=ns.head,
            )
            model = TextSpotter(mcfg, rng)
    echo_config(ns, out)
    trainer = Trainer(model, config, ns.stage, out, alphabet, optimizer, state)
    trainer.run(max_steps=ns.max_steps)
    final = trainer.checkpoint("final")
    for t in trainer.curriculum.transitions:
        log.info("stage transition %s", t)
    summary = {
        "steps": trainer.state.step,
        "stage": trainer.curriculum.stage,
        "checkpoint": str(final),
        "metrics": str(out / "metrics.csv"),
        "transitions": trainer.curriculum.transitions,
    }
    if trainer.last_eval is not None:
        summary["val"] = trainer.last_eval.to_dict()
    emit(summary)
    return 0


def cmd_restart(ns) -> int:
    ns.restart_from = ns.checkpoint
    ns.resume = None
    return cmd_train(ns)


def _load_model(path: str):
    from .training import CheckpointError, build_model, load_checkpoint

    try:
        ckpt = load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    return ckpt, build_model(ckpt)


def cmd_eval(ns) -> int:
    from .data import DatasetError, load_dataset
    from .training import evaluate

    ckpt, model = _load_model(ns.checkpoint)
    try:
        data = load_dataset(ns.data)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    if len(data) == 0:
        raise UsageError(f"dataset {ns.data} has no samples")
    if data.regions != model.loc.num_regions:
        model.set_regions(data.regions)
    metrics = evaluate(model, data, ckpt.alphabet, batch_size=ns.batch_size)
    report = {"checkpoint": ns.checkpoint, "data": ns.data, **metrics.to_dict()}
    emit(report)
    if ns.out:
        out = Path(ns.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "eval.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerow(["count", metrics.count])
            w.writerow(["sequence_accuracy", repr(metrics.sequence_accuracy)])
            for n, acc in enumerate(metrics.region_accuracy):
                w.writerow([f"region_{n}_accuracy", repr(acc)])
            if metrics.mean_iou is not None:
                w.writerow(["mean_iou", repr(metrics.mean_iou)])
        lines = [f"samples: {metrics.count}", f"sequence accuracy: {metrics.sequence_accuracy:.4f}"]
        lines += [f"region {n} accuracy: {a:.4f}" for n, a in enumerate(metrics.region_accuracy)]
        if metrics.mean_iou is not None:
            lines.append(f"mean IoU: {metrics.mean_iou:.4f}")
        (out / "eval.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _draw_overlay(pixels: np.ndarray, boxes, labels, path: Path, scale: int = 4) -> None:
    from PIL import Image, ImageDraw

    img = Image.fromarray(pixels).convert("RGB")
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    colors = [(255, 40, 40), (40, 200, 40), (40, 120, 255), (255, 200, 0), (220, 0, 220), (0, 200, 200)]
    for k, (box, label) in enumerate(zip(boxes, labels)):
        color = colors[k % len(colors)]
        pts = [((x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5) for x, y in box.clamped(pixels.shape[1], pixels.shape[0])]
        draw.line(pts + [pts[0]], fill=color, width=2)
        draw.text((pts[0][0] + 2, pts[0][1] + 1), label or "-", fill=color)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def cmd_predict(ns) -> int:
    from PIL import Image

    from .data import order_labels
    from .training import predict
    from .transformer import BoundingBox

    ckpt, model = _load_model(ns.checkpoint)
    info = ckpt.manifest.get("data") or {}
    size = tuple(info.get("image_size") or ())
    channels = int(info.get("channels", model.config.in_channels))
    for path in ns.images:
        try:
            im = Image.open(path)
        except OSError as exc:
            raise UsageError(f"cannot open image {path}: {exc}") from None
        with im:
            im = im.convert("RGB" if channels == 3 else "L")
            resize = None
            if size and (im.height, im.width) != size:
                resize = {"from": [im.height, im.width], "to": list(size), "method": "bilinear"}
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            pixels = np.asarray(im)
        arr = pixels.astype(np.float32) / 255.0
        arr = arr[None, None] if arr.ndim == 2 else arr.transpose(2, 0, 1)[None]
        strings, corners = predict(model, arr, ckpt.alphabet)
        boxes = [BoundingBox(n, c) for n, c in enumerate(corners[0])]
        order = order_labels([b.corners for b in boxes])
        record = {
            "image": str(path),
            "labels": [strings[0][i] for i in order],
            "boxes": [boxes[i].to_record() for i in order],
            "resize": resize,
        }
        if ns.overlay:
            out = Path(ns.overlay) / (Path(path).stem + ".png")
            _draw_overlay(pixels, [boxes[i] for i in order], record["labels"], out)
            record["overlay"] = str(out)
        emit(record)
    return 0


def cmd_verify(ns) -> int:
    from . import verify

    sampler = verify.FAULTS[ns.inject_fault] if ns.inject_fault else verify.bilinear_sample
    results = verify.run_all(sampler, seeds=ns.seeds)
    for r in results:
        sys.stdout.write(r.line() + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        sys.stderr.write("failed: " + "; ".join(failed) + "\n")
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stage", action="append", default=[], help="curriculum stage dataset (with train/ and val/); repeat in order")
    p.add_argument("--out", default="run", help="output directory (metrics, checkpoints)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--timesteps", type=int, default=None, help="T (default: longest label over all stages)")
    p.add_argument("--head", choices=["lstm", "linear"], default="lstm")
    for name, typ in [("lr", float), ("momentum", float), ("batch-size", int), ("max-epochs", int),
                      ("lambda1", float), ("lambda2", float), ("rotation-dropout", float), ("clip-norm", float),
                      ("eval-interval", int), ("plateau-window", int), ("plateau-delta", float),
                      ("checkpoint-interval", int), ("seed", int)]:
        p.add_argument(f"--{name}", type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="see", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--mode", choices=["grid", "random"], default="grid")
    g.add_argument("--regions", type=int, default=1)
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--width", type=int, default=48)
    g.add_argument("--min-digits", type=int, default=3)
    g.add_argument("--max-digits", type=int, default=3)
    g.add_argument("--clutter", type=float, default=0.3)
    g.add_argument("--jitter", type=float, default=0.1)
    g.add_argument("--rotation", type=float, default=4.0, help="max label rotation in degrees")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--split", default="train", help="name of the sample stream")
    g.add_argument("--splits", default=None, help="e.g. train=5000,val=1000 (writes one subdirectory each)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train through the curriculum stages")
    t.add_argument("--config")
    _add_train_flags(t)
    t.add_argument("--restart-from", default=None, help="keep localization weights, reinitialize recognition")
    t.add_argument("--resume", default=None, help="continue exactly from a checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restart", help="alias of train --restart-from CHECKPOINT")
    r.add_argument("checkpoint")
    r.add_argument("--config")
    _add_train_flags(r)
    r.set_defaults(func=cmd_restart)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="directory for eval.csv / eval.txt")
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="read images, print strings and boxes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--overlay", default=None, help="directory for box overlay PNGs")
    p.set_defaults(func=cmd_predict)

    v = sub.add_parser("verify", help="run the numeric self-checks")
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--inject-fault", choices=sorted(["sampler"]), default=None, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _thread_limit():
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("SEE_THREADS")
    if not raw:
        return threadpool_limits(limits=None)
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SEE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SEE_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    from .data import DatasetError
    from .training import DivergenceError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if ns.verbose else logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if getattr(ns, "config", None):
            apply_config(_subparser(parser, ns.command), ns, argv, read_config_file(ns.config))
        with _thread_limit():
            return ns.func(ns)
    except (UsageError, DatasetError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except DivergenceError as exc:
        sys.stderr.write(f"error: training diverged at {exc} (NaN/Inf)\n")
        if exc.detail is not None:
            d = exc.detail
            sys.stderr.write(f"  ce={d.ce.tolist()} l_ar={d.l_ar.tolist()} l_as={d.l_as.tolist()} l_di={d.l_di.tolist()}\n")
        return 1
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
