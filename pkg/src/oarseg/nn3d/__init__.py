"""Minimal 3D conv-net engine with exact backpropagation.

Feature maps are plain numpy arrays of shape ``(n, c, dx, dy, dz)``; float32
is the working precision for training, float64 is used for gradient checks.
"""

from .adam import AdamState, adam_step
from .gradcheck import GradCheckResult, check_all_layers, check_tiny_unet
from .loss import bce_loss
from .unet import UNet, UNetConfig

__all__ = [
    "AdamState",
    "adam_step",
    "GradCheckResult",
    "check_all_layers",
    "check_tiny_unet",
    "bce_loss",
    "UNet",
    "UNetConfig",
]
