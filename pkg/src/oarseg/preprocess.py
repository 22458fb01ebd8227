"""Resampling to isotropic spacing, group-wise margin cropping, intensity
normalization, and block downsampling.

Resampling maps output index ``i`` to the source coordinate
``u = (i + 0.5) * target / spacing - 0.5`` (center-aligned), so identical
spacings reproduce the input exactly.  Images use the separable interpolating
cubic kernel (Catmull-Rom, a = -0.5) with border samples clamped; masks use
nearest-neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DownsampleError, ResampleError
from .grids import BBox, Mask, Triple, Volume

CROP_WINDOW: Triple = (384, 384, 224)

# (low, high) margin fractions per axis; low side = smaller index.
GROUP1_MARGINS = ((0.5, 0.5), (0.3, 0.7), (0.9, 0.1))
GROUP2_MARGINS = ((0.5, 0.5), (0.2, 0.8), (0.7, 0.3))

HU_MIN, HU_MAX = -1000.0, 1000.0


@dataclass(frozen=True)
class CropSpec:
    """Fixed crop window plus per-axis margin split of the leftover slack."""

    window: Triple = CROP_WINDOW
    margin_fracs: tuple = GROUP1_MARGINS

    def __post_init__(self):
        if len(self.window) != 3 or any(w < 1 for w in self.window):
            raise ConfigError(f"crop window must be three positive sizes, got {self.window}")
        for axis, (lo, hi) in zip("xyz", self.margin_fracs):
            if abs(lo + hi - 1.0) > 1e-9:
                raise ConfigError(
                    f"margin fractions for axis {axis} must sum to 1.0, got ({lo}, {hi})"
                )

    @classmethod
    def for_group(cls, group: int, window: Triple = CROP_WINDOW) -> "CropSpec":
        if group == 1:
            return cls(tuple(window), GROUP1_MARGINS)
        if group == 2:
            return cls(tuple(window), GROUP2_MARGINS)
        raise ConfigError(f"crop group must be 1 or 2, got {group}")


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom (a = -0.5) weights for the 4 taps around fraction t."""
    w = np.empty(t.shape + (4,))
    # taps at offsets -1, 0, 1, 2 from floor(u); distances 1+t, t, 1-t, 2-t
    d = np.stack([1.0 + t, t, 1.0 - t, 2.0 - t], axis=-1)
    ad = np.abs(d)
    near = 1.5 * ad ** 3 - 2.5 * ad ** 2 + 1.0
    far = -0.5 * (ad ** 3 - 5.0 * ad ** 2 + 8.0 * ad - 4.0)
    w[:] = np.where(ad <= 1.0, near, far)
    return w


def _axis_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """Dense (n_out, n_in) cubic interpolation matrix with clamped borders."""
    u = (np.arange(n_out) + 0.5) * scale - 0.5
    j0 = np.floor(u).astype(np.int64)
    t = u - j0
    w = _cubic_weights(t)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), 4)
    cols = np.clip(j0[:, None] + np.array([-1, 0, 1, 2]), 0, n_in - 1).ravel()
    np.add.at(mat, (rows, cols), w.ravel())
    return mat


def _nearest_index(n_in: int, n_out: int, scale: float) -> np.ndarray:
    u = (np.arange(n_out) + 0.5) * scale - 0.5
    return np.clip(np.rint(u).astype(np.int64), 0, n_in - 1)


def resample_isotropic(v: Volume | Mask, target_spacing: float = 1.0,
                       kind: str | None = None):
    """Resample to cubic voxels of ``target_spacing`` mm.

    Output dims per axis are round(in_dim * in_spacing / target), matching
    the 512 @ 0.76 mm -> 389 / 512 @ 1.27 mm -> 650 in-plane range.
    """
    if target_spacing <= 0:
        raise ResampleError(f"target spacing must be > 0, got {target_spacing}")
    if kind is None:
        kind = "mask" if isinstance(v, Mask) else "image"
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    dims = v.dims
    scales = [target_spacing / s for s in v.spacing]
    out_dims = [int(round(d * s / target_spacing)) for d, s in zip(dims, v.spacing)]
    out_dims = [max(1, d) for d in out_dims]

    if kind == "image":
        for d, sc in zip(dims, scales):
            if d < 2 and abs(sc - 1.0) > 1e-12:
                raise ResampleError(
                    f"cannot cubic-interpolate along an axis of size {d} with scale {1 / sc:g}"
                )
        data = v.data.astype(np.float32, copy=False)
        for axis in range(3):
            mat = _axis_matrix(dims[axis], out_dims[axis], scales[axis]).astype(data.dtype)
            data = np.moveaxis(np.tensordot(mat, data, axes=([1], [axis])), 0, axis)
        return Volume(np.ascontiguousarray(data), (target_spacing,) * 3)

    ix = [_nearest_index(dims[a], out_dims[a], scales[a]) for a in range(3)]
    data = v.data[np.ix_(ix[0], ix[1], ix[2])]
    out = Mask(data, (target_spacing,) * 3) if isinstance(v, Mask) \
        else Volume(np.ascontiguousarray(data), (target_spacing,) * 3)
    return out


def compute_crop_box(dims: Triple, spec: CropSpec) -> BBox:
    """Place the fixed window on the grid, splitting slack by margin fractions.

    Negative slack (input smaller than the window) yields a negative low
    offset, i.e. the crop pads.  Rounding is ties-to-even.
    """
    mins = []
    for d, w, (lo_frac, _) in zip(dims, spec.window, spec.margin_fracs):
        slack = d - w
        if slack >= 0:
            mins.append(round(lo_frac * slack))
        else:
            mins.append(-round(lo_frac * (-slack)))
    return BBox(tuple(mins), spec.window)


def normalize_intensity(v: Volume) -> Volume:
    """Clip HU to [-1000, 1000] and map linearly onto [0, 1]."""
    data = np.clip(v.data.astype(np.float32, copy=False), HU_MIN, HU_MAX)
    data = (data - HU_MIN) / (HU_MAX - HU_MIN)
    return Volume(data, v.spacing)


def downsample_factor(v: Volume | Mask, factor: Triple):
    """Block-downsample: images average each block, masks take the majority
    (ties count as foreground).  Spacing scales by the factor."""
    fx, fy, fz = (int(f) for f in factor)
    nx, ny, nz = v.dims
    if nx % fx or ny % fy or nz % fz:
        raise DownsampleError(f"dims {v.dims} not divisible by factor {factor}")
    blocks = v.data.reshape(nx // fx, fx, ny // fy, fy, nz // fz, fz)
    spacing = tuple(s * f for s, f in zip(v.spacing, (fx, fy, fz)))
    if isinstance(v, Mask):
        means = blocks.mean(axis=(1, 3, 5))
        return Mask(means >= 0.5, spacing)
    means = blocks.astype(np.float64).mean(axis=(1, 3, 5))
    return Volume(means.astype(v.data.dtype), spacing)


def upsample_repeat(v: Volume | Mask, factor: Triple):
    """Constant (nearest) upsampling: repeat each voxel factor times per axis."""
    data = v.data
    for axis, f in enumerate(factor):
        if f > 1:
            data = np.repeat(data, f, axis=axis)
    spacing = tuple(s / f for s, f in zip(v.spacing, factor))
    return Mask(data, spacing) if isinstance(v, Mask) else Volume(data, spacing)
