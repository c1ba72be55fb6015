"""splitkit: frozen-backbone ViT adaptation with task/prior feature splitting.

The package bundles a small float32 autodiff engine, a tiny vision
transformer, the split adapter (copied task head, multi-scale prior head,
fusion net), layer-similarity analysis, and a toy segmentation training
harness with a command-line front end.
"""

from .rng import Rng, derive_seed
from .tensor import (
    Tensor,
    backward,
    bilinear_sample,
    grad_check,
    stop_gradient,
)
from .vspt import load_tensors, save_tensors

__all__ = [
    "Rng",
    "derive_seed",
    "Tensor",
    "backward",
    "bilinear_sample",
    "grad_check",
    "stop_gradient",
    "load_tensors",
    "save_tensors",
]

__version__ = "0.1.0"
