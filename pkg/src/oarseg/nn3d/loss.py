"""Binary cross-entropy on logits, numerically stable."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeError


def bce_loss(logits: np.ndarray, target: np.ndarray):
    """Mean sigmoid cross-entropy.

    loss = mean over voxels of softplus(z) - z * y, computed in the
    overflow-safe form max(z, 0) - z*y + log1p(exp(-|z|)).
    Returns (loss, grad wrt logits) with grad = (sigmoid(z) - y) / N.
    """
    if logits.shape != target.shape:
        raise ShapeError(f"logits shape {logits.shape} != target shape {target.shape}")
    z = logits
    y = target.astype(z.dtype, copy=False)
    per_voxel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_voxel.mean())
    grad = (expit(z) - y) / z.size
    return loss, grad
