"""Two-stage 3D U-Net pipeline for locating and segmenting organs at risk
in CT volumes: preprocessing, localization, segmentation, postprocessing,
and evaluation metrics."""

__version__ = "0.1.0"

from .grids import BBox, Mask, StructureId, Volume

__all__ = ["BBox", "Mask", "StructureId", "Volume", "__version__"]
