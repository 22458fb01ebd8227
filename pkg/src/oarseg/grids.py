"""Core 3D grid types and primitives shared by the whole pipeline.

Conventions used everywhere in this package:

* A grid has dims ``(nx, ny, nz)`` and spacing ``(sx, sy, sz)`` in mm/voxel.
* In-memory arrays are indexed ``data[x, y, z]`` (shape ``(nx, ny, nz)``).
* The *linearized* (on-disk) order is x fastest, z slowest.  All code that
  flattens or unflattens payloads must go through :func:`to_linear` /
  :func:`from_linear` so the order is defined in exactly one place.
* Axis meaning: x = left-right, y = anterior-posterior, z = superior-inferior,
  with increasing index toward left / posterior / inferior.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import DimsError

Triple = tuple[int, int, int]


def to_linear(arr: np.ndarray) -> np.ndarray:
    """Flatten an (nx, ny, nz) array to the canonical x-fastest 1-D order."""
    return np.asarray(arr).ravel(order="F")


def from_linear(flat: np.ndarray, dims: Triple) -> np.ndarray:
    """Inverse of :func:`to_linear`."""
    flat = np.asarray(flat)
    if flat.size != int(np.prod(dims)):
        raise DimsError(f"payload length {flat.size} != prod{tuple(dims)}")
    return flat.reshape(dims, order="F")


@dataclass
class Volume:
    """A 3D scalar grid (CT image, probability map, ...) with mm spacing."""

    data: np.ndarray  # (nx, ny, nz), floating point
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimsError(f"volume data must be 3-D with dims >= 1, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DimsError(f"spacing components must be > 0, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> Triple:
        return self.data.shape


@dataclass
class Mask:
    """A binary 3D grid; same geometry conventions as :class:`Volume`."""

    data: np.ndarray  # (nx, ny, nz), bool
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool, copy=False)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimsError(f"mask data must be 3-D with dims >= 1, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DimsError(f"spacing components must be > 0, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> Triple:
        return self.data.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in voxel index space: min corner + size.

    ``min`` may be negative and ``min + size`` may exceed a grid when the box
    describes a crop-with-padding window; operations that require the box to
    lie inside a grid validate that themselves (RangeError).
    """

    min: Triple
    size: Triple

    def __post_init__(self):
        object.__setattr__(self, "min", tuple(int(v) for v in self.min))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        if any(s < 1 for s in self.size):
            raise DimsError(f"box size components must be >= 1, got {self.size}")

    @property
    def end(self) -> Triple:
        return tuple(m + s for m, s in zip(self.min, self.size))

    def inside(self, dims: Triple) -> bool:
        return all(m >= 0 and e <= d for m, e, d in zip(self.min, self.end, dims))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(m, m + s) for m, s in zip(self.min, self.size))


class StructureId(Enum):
    """The nine target structures; values are the stable config/CLI names."""

    MANDIBLE = "mandible"
    PAROTID_L = "parotid_l"
    PAROTID_R = "parotid_r"
    BRAINSTEM = "brainstem"
    SUBMANDIBULAR_L = "submandibular_l"
    SUBMANDIBULAR_R = "submandibular_r"
    OPTIC_NERVE_L = "optic_nerve_l"
    OPTIC_NERVE_R = "optic_nerve_r"
    CHIASM = "chiasm"

    @classmethod
    def from_name(cls, name: str) -> "StructureId":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown structure {name!r}; expected one of "
                f"{[s.value for s in cls]}"
            ) from None


def require_same_dims(a, b) -> None:
    if tuple(a.dims) != tuple(b.dims):
        raise DimsError(f"dims mismatch: {tuple(a.dims)} vs {tuple(b.dims)}")


def overlap_counts(a: Mask, b: Mask) -> tuple[int, int, int]:
    """Return (|A ∩ B|, |A|, |B|) as exact 64-bit integers."""
    require_same_dims(a, b)
    n_inter = int(np.count_nonzero(a.data & b.data))
    return n_inter, a.count(), b.count()


def crop_or_pad(v: Volume | Mask, box: BBox, fill=0):
    """Extract ``box`` from ``v``; regions outside ``v`` are set to ``fill``.

    Output dims equal ``box.size`` and spacing is preserved.  The box may lie
    partly or fully outside the grid.
    """
    dims = v.dims
    if isinstance(v, Mask):
        out = np.full(box.size, bool(fill), dtype=bool)
    else:
        out = np.full(box.size, fill, dtype=v.data.dtype)
    src_lo = [max(0, m) for m in box.min]
    src_hi = [min(d, e) for d, e in zip(dims, box.end)]
    if all(lo < hi for lo, hi in zip(src_lo, src_hi)):
        dst_lo = [lo - m for lo, m in zip(src_lo, box.min)]
        dst_hi = [hi - m for hi, m in zip(src_hi, box.min)]
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            v.data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    if isinstance(v, Mask):
        return Mask(out, v.spacing)
    return Volume(out, v.spacing)


def paste(dst: np.ndarray, src: np.ndarray, box: BBox) -> None:
    """Write ``src`` (shaped like box.size) into ``dst`` at the box position,
    clipping any part of the box that falls outside ``dst``."""
    dims = dst.shape
    src_lo = [max(0, -m) for m in box.min]
    src_hi = [s - max(0, e - d) for s, e, d in zip(box.size, box.end, dims)]
    if any(lo >= hi for lo, hi in zip(src_lo, src_hi)):
        return
    dst_lo = [max(0, m) for m in box.min]
    dst_hi = [lo + (hi - lo2) for lo, hi, lo2 in zip(dst_lo, src_hi, src_lo)]
    dst[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        src[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]


_STRUCTURE_6 = ndimage.generate_binary_structure(3, 1)
_STRUCTURE_26 = ndimage.generate_binary_structure(3, 3)


def label_components(m: Mask, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Label connected foreground components.

    Returns ``(labels, counts)`` where ``labels`` is an int array (0 =
    background, components numbered from 1) and ``counts[i]`` is the voxel
    count of component ``i + 1``.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    struct = _STRUCTURE_6 if connectivity == 6 else _STRUCTURE_26
    labels, n = ndimage.label(m.data, structure=struct)
    if n == 0:
        return labels, np.zeros(0, dtype=np.int64)
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return labels, counts


def connected_components(m: Mask, connectivity: int = 26) -> list[tuple[int, int]]:
    """List of ``(component_id, voxel_count)`` for the mask's foreground."""
    _, counts = label_components(m, connectivity)
    return [(i + 1, int(c)) for i, c in enumerate(counts)]
