"""YAML pipeline configuration with shipped defaults.

An empty (or missing) config yields the full defaults: the per-structure
bounding-box sizes, the 384 x 384 x 224 crop window with the two margin
groups, and the standard training protocol (200 epochs, batch 1, Adam at
lr 1e-3).  Every override is validated; violations raise ConfigError naming
the offending field.  See ``config.example.yaml`` for an annotated example.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .grids import StructureId, Triple
from .preprocess import CROP_WINDOW, GROUP1_MARGINS, GROUP2_MARGINS, CropSpec
from .segpipe import STRUCTURE_DEFAULTS, LOC_FACTOR, StructureConfig, TrainConfig

ENV_CONFIG_PATH = "OARSEG_CONFIG"


@dataclass
class PipelineConfig:
    structures: dict
    crop_window: Triple = CROP_WINDOW
    margins: tuple = (GROUP1_MARGINS, GROUP2_MARGINS)
    train: TrainConfig = None

    def __post_init__(self):
        if self.train is None:
            self.train = TrainConfig()
        for axis, w in zip("xyz", self.crop_window):
            if w % (8 * LOC_FACTOR):
                raise ConfigError(
                    f"crop.window.{axis}: {w} must be a multiple of {8 * LOC_FACTOR} "
                    f"(locator input must be a multiple of 8)"
                )

    def crop_spec(self, group: int) -> CropSpec:
        if group not in (1, 2):
            raise ConfigError(f"crop group must be 1 or 2, got {group}")
        return CropSpec(tuple(self.crop_window), self.margins[group - 1])

    def structure(self, sid: StructureId) -> StructureConfig:
        if sid not in self.structures:
            raise ConfigError(f"structures.{sid.value}: not configured")
        return self.structures[sid]


def _triple(value, field: str) -> Triple:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(f"{field}: expected three values, got {value!r}")
    try:
        return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{field}: expected three integers, got {value!r}") from None


def _fracs(value, field: str):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{field}: expected [low, high] fractions, got {value!r}")
    lo, hi = float(value[0]), float(value[1])
    if abs(lo + hi - 1.0) > 1e-9:
        raise ConfigError(f"{field}: fractions ({lo}, {hi}) do not sum to 1")
    return lo, hi


def _margins_for(group_data: dict, defaults, field: str):
    out = list(defaults)
    for i, axis in enumerate("xyz"):
        if axis in group_data:
            out[i] = _fracs(group_data[axis], f"{field}.{axis}")
    extra = set(group_data) - set("xyz")
    if extra:
        raise ConfigError(f"{field}: unknown axis keys {sorted(extra)}")
    return tuple(out)


def _build_structure(sid: StructureId, data: dict, locnet_input: Triple,
                     field: str) -> StructureConfig:
    base = STRUCTURE_DEFAULTS[sid]
    kwargs = {
        "id": sid,
        "box_size": base.box_size,
        "crop_group": base.crop_group,
        "locnet_input": locnet_input,
        "segnet_z_halved": base.segnet_z_halved,
        "prob_threshold": base.prob_threshold,
    }
    known = {"box_size", "crop_group", "segnet_z_halved", "prob_threshold"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{field}: unknown keys {sorted(extra)}")
    if "box_size" in data:
        box = _triple(data["box_size"], f"{field}.box_size")
        for v in box:
            if v % 8:
                raise ConfigError(f"{field}.box_size: {v} is not a multiple of 8")
        kwargs["box_size"] = box
    if "crop_group" in data:
        kwargs["crop_group"] = int(data["crop_group"])
    if "segnet_z_halved" in data:
        kwargs["segnet_z_halved"] = bool(data["segnet_z_halved"])
    if "prob_threshold" in data:
        kwargs["prob_threshold"] = float(data["prob_threshold"])
    try:
        return StructureConfig(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{field}: {e}") from None


def load_config(path=None) -> PipelineConfig:
    """Load the pipeline configuration; ``path=None`` checks $OARSEG_CONFIG,
    then falls back to pure defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH) or None
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded

    known_top = {"crop", "train", "structures"}
    extra = set(raw) - known_top
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")

    crop_data = raw.get("crop") or {}
    window = CROP_WINDOW
    if "window" in crop_data:
        window = _triple(crop_data["window"], "crop.window")
        for axis, w in zip("xyz", window):
            if w % (8 * LOC_FACTOR):
                raise ConfigError(
                    f"crop.window.{axis}: {w} must be a multiple of {8 * LOC_FACTOR} "
                    f"(locator input must be a multiple of 8)"
                )
    margins = (
        _margins_for(crop_data.get("group1") or {}, GROUP1_MARGINS, "crop.group1"),
        _margins_for(crop_data.get("group2") or {}, GROUP2_MARGINS, "crop.group2"),
    )
    extra = set(crop_data) - {"window", "group1", "group2"}
    if extra:
        raise ConfigError(f"crop: unknown keys {sorted(extra)}")

    train_data = raw.get("train") or {}
    train_fields = {f.name for f in fields(TrainConfig)}
    extra = set(train_data) - train_fields
    if extra:
        raise ConfigError(f"train: unknown keys {sorted(extra)}")
    try:
        train = TrainConfig(**train_data)
    except (ConfigError, TypeError) as e:
        raise ConfigError(f"train: {e}") from None

    locnet_input = tuple(w // LOC_FACTOR for w in window)
    structures = {}
    struct_data = raw.get("structures") or {}
    for name in struct_data:  # fail fast on unknown names
        try:
            StructureId.from_name(str(name))
        except ValueError as e:
            raise ConfigError(f"structures: {e}") from None
    for sid in StructureId:
        data = struct_data.get(sid.value) or {}
        structures[sid] = _build_structure(sid, data, locnet_input,
                                           f"structures.{sid.value}")
    return PipelineConfig(structures, window, margins, train)
