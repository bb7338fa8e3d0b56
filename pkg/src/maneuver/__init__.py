"""Two-stream driver maneuver anticipation toolkit.

An outside-view motion forecaster (stacked peephole ConvLSTM over
color-coded optical flow), an in-cabin 3D residual CNN, and a fused
classifier over both feature streams, with the training, augmentation,
cross-validation, and evaluation machinery to run the whole pipeline at
desk scale.
"""

from . import checkpoint, nn, optim
from .tensor import Tensor

__all__ = [
    "Tensor",
    "checkpoint",
    "nn",
    "optim",
]

__version__ = "0.1.0"
