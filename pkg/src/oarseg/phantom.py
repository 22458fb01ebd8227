"""Deterministic synthetic cases: ellipsoid "organs" with intensity contrast
and Gaussian noise, for CPU-scale end-to-end training and tests.

Intensity means and noise sigma are specified in normalized [0, 1] units and
clipped there; the emitted image is mapped onto the HU scale (the exact
inverse of the pipeline's intensity normalization), so phantom cases flow
through the standard preprocessing and arrive at the network with the
configured contrast.

On-disk layout (one directory per case):

    case_000/
        image.nrrd
        mask_<structure>.nrrd    (one per structure)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PhantomSpecError
from .grids import Mask, Triple, Volume
from .nrrd_io import read_volume, write_volume
from .preprocess import HU_MAX, HU_MIN


@dataclass(frozen=True)
class PhantomStructure:
    """Sampling ranges for one pseudo-structure."""

    name: str = "brainstem"
    semi_axes_mm: tuple = ((6.0, 12.0), (5.0, 10.0), (4.0, 9.0))
    center_jitter_mm: float = 4.0
    fg_mean: float = 0.75


@dataclass(frozen=True)
class PhantomSpec:
    """Frame geometry, structure list, intensities, and the base RNG seed."""

    dims: Triple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    structures: tuple = (PhantomStructure(),)
    bg_mean: float = 0.25
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise PhantomSpecError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        for st in self.structures:
            for axis in range(3):
                lo, hi = st.semi_axes_mm[axis]
                if not 0 < lo <= hi:
                    raise PhantomSpecError(
                        f"{st.name}: bad semi-axis range {st.semi_axes_mm[axis]}"
                    )
                half_extent_mm = (self.dims[axis] - 1) * self.spacing[axis] / 2.0
                if hi + st.center_jitter_mm >= half_extent_mm:
                    raise PhantomSpecError(
                        f"{st.name}: semi-axis {hi} mm + jitter {st.center_jitter_mm} mm "
                        f"cannot fit in a {self.dims[axis]}-voxel axis"
                    )


def generate_case(spec: PhantomSpec, case_seed: int) -> tuple[Volume, dict[str, Mask]]:
    """One synthetic case, fully determined by (spec, case_seed)."""
    rng = np.random.default_rng([spec.seed, int(case_seed)])
    sp = np.asarray(spec.spacing)
    coords = [np.arange(d) * s for d, s in zip(spec.dims, sp)]
    center_mm = np.array([(d - 1) * s / 2.0 for d, s in zip(spec.dims, sp)])

    image = np.full(spec.dims, spec.bg_mean, dtype=np.float64)
    masks = {}
    for st in spec.structures:
        semi = np.array([rng.uniform(lo, hi) for lo, hi in st.semi_axes_mm])
        center = center_mm + rng.uniform(-st.center_jitter_mm, st.center_jitter_mm, size=3)
        nx = ((coords[0] - center[0]) / semi[0]) ** 2
        ny = ((coords[1] - center[1]) / semi[1]) ** 2
        nz = ((coords[2] - center[2]) / semi[2]) ** 2
        inside = nx[:, None, None] + ny[None, :, None] + nz[None, None, :] <= 1.0
        masks[st.name] = Mask(inside, tuple(spec.spacing))
        image += (st.fg_mean - spec.bg_mean) * inside
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    image = np.clip(image, 0.0, 1.0)
    image_hu = (image * (HU_MAX - HU_MIN) + HU_MIN).astype(np.float32)
    return Volume(image_hu, tuple(spec.spacing)), masks


def case_dir_name(index: int) -> str:
    return f"case_{index:03d}"


def write_case(directory, image: Volume, masks: dict[str, Mask]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(image, directory / "image.nrrd")
    for name, mask in masks.items():
        write_volume(mask, directory / f"mask_{name}.nrrd")


def read_case(directory, structure: str | None = None):
    """Load (image, masks) from a case directory; ``structure`` filters to one."""
    directory = Path(directory)
    image = read_volume(directory / "image.nrrd")
    masks = {}
    if structure is not None:
        path = directory / f"mask_{structure}.nrrd"
        if path.exists():
            masks[structure] = read_volume(path)
    else:
        for path in sorted(directory.glob("mask_*.nrrd")):
            masks[path.stem[len("mask_"):]] = read_volume(path)
    return image, masks
