"""A tour of the spatial transformer pieces on one synthetic image.

Run: python demos/transformer_walkthrough.py [outdir]

We render a single label, then warp it with a few hand-written affine
frames.  Along the way we check the two facts everything else rests on:
the identity frame reproduces the input, and the box drawn from a grid's
corners is exactly where the sampler reads.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from see.data import DatasetSpec, render_sample
from see.regularizers import area_penalty, aspect_penalty, direction_penalty
from see.tensor import Tensor
from see.transformer import bilinear_sample, generate_grids, grids_to_bboxes, make_base_grid

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# One 48x48 sample with a three digit label.
image, labels, boxes = render_sample(DatasetSpec(seed=7), 0)
print("label", labels, "ink box corners", np.round(boxes[0], 1).tolist())
pixels = image.astype(np.float32)[None, None] / 255.0

# The identity frame with a full-size output grid copies the image.
base = make_base_grid(48, 48)
identity = np.array([[[1, 0, 0, 0, 1, 0]]], dtype=np.float32)
copy = bilinear_sample(Tensor(pixels), generate_grids(Tensor(identity), base))
print("identity max abs error", float(np.abs(copy.data[0, 0] - pixels[0]).max()))

# A zoom onto the label box, a small rotation, a mirror and a tall strip.
frames = {
    "zoom": [0.8, 0, 0, 0, 0.45, 0],
    "rotate": [np.cos(0.3), -np.sin(0.3), 0, np.sin(0.3), np.cos(0.3), 0],
    "mirror": [-1, 0, 0, 0, 1, 0],
    "tall": [0.3, 0, 0, 0, 0.9, 0],
}
crop_base = make_base_grid(32, 32)
for name, theta in frames.items():
    t = np.asarray([[theta]], dtype=np.float32)
    grids = generate_grids(Tensor(t), crop_base)
    crop = bilinear_sample(Tensor(pixels), grids).data[0, 0, 0]
    Image.fromarray((np.clip(crop, 0, 1) * 255).astype(np.uint8)).resize((128, 128)).save(out / f"crop_{name}.png")
    box = grids_to_bboxes(grids.transformed.data[0], 48, 48)[0]
    # the regularizers score what kind of frame this is
    p = t.reshape(1, 6).astype(np.float64)
    print(f"{name:7s} box {np.round(box.corners, 1).tolist()}  area {area_penalty(p).item():.3f}"
          f"  aspect {aspect_penalty(p).item():.3f}  direction {direction_penalty(p).item():.3f}")

# Only the mirror pays the direction penalty and only the tall frame pays
# for aspect.  Every frame pays for its area.
print("crops written to", out)
