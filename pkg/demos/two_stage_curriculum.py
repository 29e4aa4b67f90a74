"""A small two-stage curriculum, start to finish, through the command line.

Run: python demos/two_stage_curriculum.py [workdir]

Stage 1 shows one label per image; stage 2 shows two labels side by side.
The training manifests keep no boxes, so the localization network learns
where the labels are only from whether the recognizer could read them.
Boxes survive in the validation split and are scored after training.

This is a scaled-down run (about ten CPU-minutes on one core) and its accuracy is
modest.  The acceptance suite runs the full-size version.
"""

import json
import subprocess
import sys
from pathlib import Path

work = Path(sys.argv[1] if len(sys.argv) > 1 else "curriculum_demo")


def see(*args):
    cmd = [sys.executable, "-m", "see.cli", *map(str, args)]
    print("$ see", " ".join(map(str, args)))
    done = subprocess.run(cmd, check=True, capture_output=True, text=True)
    return [json.loads(line) for line in done.stdout.splitlines() if line.strip()]


def strip_boxes(split):
    manifest = split / "manifest.jsonl"
    recs = [json.loads(line) for line in manifest.read_text().splitlines()]
    manifest.write_text("".join(json.dumps({**r, "boxes": None}) + "\n" for r in recs))


see("gen-data", "--seed", 7, "--splits", "train=1200,val=200", "--out", work / "stage1")
see("gen-data", "--seed", 8, "--regions", 2, "--width", 96, "--splits", "train=1200,val=200", "--out", work / "stage2")
for stage in ("stage1", "stage2"):
    strip_boxes(work / stage / "train")

# Each stage gets at most 8 epochs (about 300 steps here); the plateau rule
# can move on sooner once validation accuracy stops improving.  Stage 2
# starts from the stage-1 weights, with the learned frame copied to both
# regions.
see("train", "--stage", work / "stage1", "--stage", work / "stage2", "--out", work / "run",
    "--max-epochs", 8, "--eval-interval", 50, "--plateau-window", 3, "--plateau-delta", 0.02)
stages = [line.split(",")[1] for line in (work / "run" / "metrics.csv").read_text().splitlines()[1:]]
print(f"{stages.count('0')} steps in stage 1, {stages.count('1')} in stage 2")

final = work / "run" / "checkpoints" / "final"
for stage in ("stage1", "stage2"):
    report = see("eval", "--checkpoint", final, "--data", work / stage / "val")[0]
    print(f"{stage}: sequence accuracy {report['sequence_accuracy']:.3f}, mean IoU {report.get('mean_iou', float('nan')):.3f}")

# Predicted strings and boxes for a few validation images, with overlays.
images = sorted((work / "stage2" / "val" / "images").glob("*.png"))[:3]
for rec in see("predict", "--checkpoint", final, *images, "--overlay", work / "overlays"):
    print(Path(rec["image"]).name, rec["labels"], "->", rec["overlay"])
