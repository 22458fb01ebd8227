"""Same-padding 3D convolution: forward and exact backward.

Supports kernel sizes 3 and 1.  The 3x3x3 path dispatches to the backend
selected in :mod:`oarseg.backend`; the pointwise 1x1x1 path is a channel
matmul and is shared by both backends.
"""

from __future__ import annotations

import numpy as np

from .. import backend
from ..errors import ShapeError

if backend.NUMBA_ENABLED:
    from . import kernels_nb


def check_tensor5(x: np.ndarray, what: str = "tensor") -> None:
    if x.ndim != 5 or min(x.shape) < 1:
        raise ShapeError(f"{what} must be 5-D (n, c, dx, dy, dz) with dims >= 1, got {x.shape}")


def _pad1(x: np.ndarray) -> np.ndarray:
    n, c, X, Y, Z = x.shape
    xp = np.zeros((n, c, X + 2, Y + 2, Z + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def _check_conv_args(x, k, b):
    check_tensor5(x, "conv input")
    if k.ndim != 5 or k.shape[2] != k.shape[3] or k.shape[3] != k.shape[4]:
        raise ShapeError(f"conv kernel must be (co, ci, K, K, K), got {k.shape}")
    if k.shape[2] not in (1, 3):
        raise ShapeError(f"conv kernel size must be 1 or 3, got {k.shape[2]}")
    if k.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}")
    if b.shape != (k.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({k.shape[0]},)")


def _np_conv3_fwd(xpad, k, b):
    n, ci, _, _, _ = xpad.shape
    co = k.shape[0]
    X, Y, Z = xpad.shape[2] - 2, xpad.shape[3] - 2, xpad.shape[4] - 2
    out = np.empty((n, co, X, Y, Z), dtype=xpad.dtype)
    out[:] = b.reshape(1, co, 1, 1, 1)
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                xs = xpad[:, :, kx:kx + X, ky:ky + Y, kz:kz + Z]
                out += np.einsum("nixyz,oi->noxyz", xs, k[:, :, kx, ky, kz], optimize=True)
    return out


def _np_conv3_grad_k(xpad, gy):
    co, ci = gy.shape[1], xpad.shape[1]
    X, Y, Z = gy.shape[2], gy.shape[3], gy.shape[4]
    gk = np.empty((co, ci, 3, 3, 3), dtype=gy.dtype)
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                xs = xpad[:, :, kx:kx + X, ky:ky + Y, kz:kz + Z]
                gk[:, :, kx, ky, kz] = np.einsum("noxyz,nixyz->oi", gy, xs, optimize=True)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gk, gb


def conv3d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = conv(x, k) + b with zero 'same' padding; output spatial dims = input's."""
    _check_conv_args(x, k, b)
    if k.shape[2] == 1:
        y = np.einsum("nixyz,oi->noxyz", x, k[:, :, 0, 0, 0], optimize=True)
        return y + b.reshape(1, -1, 1, 1, 1)
    xpad = _pad1(np.ascontiguousarray(x))
    if backend.NUMBA_ENABLED:
        out = np.empty((x.shape[0], k.shape[0]) + x.shape[2:], dtype=x.dtype)
        kernels_nb.conv3_fwd(xpad, np.ascontiguousarray(k), np.ascontiguousarray(b), out)
        return out
    return _np_conv3_fwd(xpad, k, b)


def conv3d_backward(x: np.ndarray, k: np.ndarray, gy: np.ndarray):
    """Gradients of a same-padding conv: returns (gx, gk, gb)."""
    if gy.shape[:2] != (x.shape[0], k.shape[0]) or gy.shape[2:] != x.shape[2:]:
        raise ShapeError(f"grad shape {gy.shape} inconsistent with input {x.shape} and kernel {k.shape}")
    if k.shape[2] == 1:
        kc = k[:, :, 0, 0, 0]
        gx = np.einsum("noxyz,oi->nixyz", gy, kc, optimize=True)
        gk = np.einsum("noxyz,nixyz->oi", gy, x, optimize=True)[:, :, None, None, None]
        gb = gy.sum(axis=(0, 2, 3, 4))
        return gx, gk, gb
    gy = np.ascontiguousarray(gy)
    xpad = _pad1(np.ascontiguousarray(x))
    # grad wrt input = same conv of gy with the kernel transposed and flipped
    k_t = np.ascontiguousarray(k.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    zero_b = np.zeros(k_t.shape[0], dtype=gy.dtype)
    if backend.NUMBA_ENABLED:
        gypad = _pad1(gy)
        gx = np.empty_like(x)
        kernels_nb.conv3_fwd(gypad, k_t, zero_b, gx)
        gk = np.empty_like(k)
        gb = np.empty(k.shape[0], dtype=gy.dtype)
        kernels_nb.conv3_grad_k(xpad, gy, gk, gb)
        return gx, gk, gb
    gx = _np_conv3_fwd(_pad1(gy), k_t, zero_b)
    gk, gb = _np_conv3_grad_k(xpad, gy)
    return gx, gk, gb
