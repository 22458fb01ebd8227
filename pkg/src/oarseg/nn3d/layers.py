"""Non-convolution layers: pooling, up-convolution, batch norm, ReLU.

These are vectorized numpy on both backends; the convolutions in
:mod:`oarseg.nn3d.kernels` dominate runtime.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .kernels import check_tensor5

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # keep-rate of the old running statistic


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, gy):
    return gy * mask


def maxpool2_forward(x):
    """2x2x2 max pooling, stride 2.  Returns (y, argmax indices).

    Ties take the first occurrence in (dx, dy, dz)-lexicographic block order.
    """
    check_tensor5(x, "pool input")
    n, c, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ShapeError(f"pooling needs even spatial dims, got {(X, Y, Z)}")
    view = (
        x.reshape(n, c, X // 2, 2, Y // 2, 2, Z // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, X // 2, Y // 2, Z // 2, 8)
    )
    idx = view.argmax(axis=-1)
    y = np.take_along_axis(view, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(idx, gy, in_shape):
    n, c, X, Y, Z = in_shape
    blocks = np.zeros((n, c, X // 2, Y // 2, Z // 2, 8), dtype=gy.dtype)
    np.put_along_axis(blocks, idx[..., None], gy[..., None], axis=-1)
    gx = (
        blocks.reshape(n, c, X // 2, Y // 2, Z // 2, 2, 2, 2)
        .transpose(0, 1, 2, 5, 3, 6, 4, 7)
        .reshape(n, c, X, Y, Z)
    )
    return gx


def upconv2_forward(x, k, b):
    """Transposed conv, 2x2x2 kernel, stride 2: each input voxel paints one
    2x2x2 output block (no overlap).  k has shape (ci, co, 2, 2, 2)."""
    check_tensor5(x, "upconv input")
    if k.ndim != 5 or k.shape[2:] != (2, 2, 2):
        raise ShapeError(f"upconv kernel must be (ci, co, 2, 2, 2), got {k.shape}")
    if k.shape[0] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[0]}")
    n, ci, X, Y, Z = x.shape
    co = k.shape[1]
    y8 = np.einsum("nixyz,iodef->noxdyezf", x, k, optimize=True)
    y = y8.reshape(n, co, 2 * X, 2 * Y, 2 * Z)
    y += b.reshape(1, co, 1, 1, 1)
    return y


def upconv2_backward(x, k, gy):
    n, ci, X, Y, Z = x.shape
    co = k.shape[1]
    gy8 = gy.reshape(n, co, X, 2, Y, 2, Z, 2)
    gx = np.einsum("noxdyezf,iodef->nixyz", gy8, k, optimize=True)
    gk = np.einsum("nixyz,noxdyezf->iodef", x, gy8, optimize=True)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gx, gk, gb


def batchnorm_forward(x, scale, shift, running_mean, running_var, mode,
                      update_running=True):
    """Per-channel batch norm over (n, dx, dy, dz).

    Train mode normalizes with the biased batch variance and, when
    ``update_running`` is set, folds the batch statistics into the running
    ones (new = momentum * old + (1 - momentum) * batch).  Eval mode uses the
    running statistics.  Returns (y, cache).
    """
    if scale.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm params have {scale.shape[0]} channels, input has {x.shape[1]}")
    axes = (0, 2, 3, 4)
    c = x.shape[1]
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            running_mean *= BN_MOMENTUM
            running_mean += (1.0 - BN_MOMENTUM) * mu
            running_var *= BN_MOMENTUM
            running_var += (1.0 - BN_MOMENTUM) * var
    elif mode == "eval":
        mu = running_mean
        var = running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu.reshape(1, c, 1, 1, 1)) * inv.reshape(1, c, 1, 1, 1)
    y = scale.reshape(1, c, 1, 1, 1) * xhat + shift.reshape(1, c, 1, 1, 1)
    cache = (xhat, inv, scale, mode)
    return y, cache


def batchnorm_backward(cache, gy):
    xhat, inv, scale, mode = cache
    c = xhat.shape[1]
    axes = (0, 2, 3, 4)
    gscale = (gy * xhat).sum(axis=axes)
    gshift = gy.sum(axis=axes)
    si = (scale * inv).reshape(1, c, 1, 1, 1)
    if mode == "eval":
        return gy * si, gscale, gshift
    m = gy.size // c
    gx = si * (gy - gshift.reshape(1, c, 1, 1, 1) / m
               - xhat * gscale.reshape(1, c, 1, 1, 1) / m)
    return gx, gscale, gshift
