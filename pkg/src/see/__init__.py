"""Spatial-transformer text detection and recognition on a small numpy autodiff core."""

from .tensor import Tensor, no_grad, precision
from .networks import Alphabet, ModelConfig, TextSpotter
from .transformer import bilinear_sample, generate_grids, grids_to_bboxes, make_base_grid

__version__ = "0.1.0"

__all__ = [
    "Alphabet",
    "ModelConfig",
    "Tensor",
    "TextSpotter",
    "bilinear_sample",
    "generate_grids",
    "grids_to_bboxes",
    "make_base_grid",
    "no_grad",
    "precision",
]
