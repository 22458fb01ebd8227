"""Two-stage pipeline per structure: build training sets, train the locator
and segmentation networks, and run inference end to end.

Inference follows the flow: resample to 1 mm -> group-margin crop ->
normalize -> downsample x4 -> locator network -> threshold -> sliding-box
search -> scale box up -> extract target volume -> segmentation network ->
threshold -> (restore halved z) -> island removal -> paste into the cropped
frame -> map back to the raw grid by nearest neighbor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, TrainError
from .grids import BBox, Mask, StructureId, Triple, Volume, crop_or_pad, label_components, paste
from .locator import centroid_box, locate_box, make_loc_target, scale_box_up
from .nn3d import AdamState, UNet, UNetConfig, adam_step
from .preprocess import (
    CropSpec,
    compute_crop_box,
    downsample_factor,
    normalize_intensity,
    resample_isotropic,
    upsample_repeat,
    HU_MIN,
)

log = logging.getLogger(__name__)

LOC_FACTOR = 4


@dataclass(frozen=True)
class StructureConfig:
    """Per-organ constants: box size, crop-margin group, special rules."""

    id: StructureId
    box_size: Triple
    crop_group: int
    locnet_input: Triple = (96, 96, 56)
    segnet_z_halved: bool = False
    prob_threshold: float = 0.5

    def __post_init__(self):
        if any(s % 8 for s in self.box_size):
            raise ConfigError(f"{self.id.value}: box_size {self.box_size} not multiples of 8")
        if self.crop_group not in (1, 2):
            raise ConfigError(f"{self.id.value}: crop_group must be 1 or 2")
        if any(s % 8 for s in self.locnet_input):
            raise ConfigError(f"{self.id.value}: locnet_input {self.locnet_input} not multiples of 8")
        if self.segnet_z_halved and (self.box_size[2] // 2) % 8:
            raise ConfigError(
                f"{self.id.value}: halved z {self.box_size[2] // 2} not a multiple of 8"
            )
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigError(f"{self.id.value}: prob_threshold must be in (0, 1)")

    @property
    def segnet_input(self) -> Triple:
        h, w, k = self.box_size
        return (h, w, k // 2) if self.segnet_z_halved else (h, w, k)


STRUCTURE_DEFAULTS: dict[StructureId, StructureConfig] = {
    StructureId.MANDIBLE: StructureConfig(StructureId.MANDIBLE, (144, 144, 112), 2,
                                          segnet_z_halved=True),
    StructureId.PAROTID_L: StructureConfig(StructureId.PAROTID_L, (96, 96, 96), 2),
    StructureId.PAROTID_R: StructureConfig(StructureId.PAROTID_R, (96, 96, 96), 2),
    StructureId.BRAINSTEM: StructureConfig(StructureId.BRAINSTEM, (56, 56, 80), 1),
    StructureId.SUBMANDIBULAR_L: StructureConfig(StructureId.SUBMANDIBULAR_L, (48, 48, 64), 2),
    StructureId.SUBMANDIBULAR_R: StructureConfig(StructureId.SUBMANDIBULAR_R, (48, 48, 64), 2),
    StructureId.OPTIC_NERVE_L: StructureConfig(StructureId.OPTIC_NERVE_L, (56, 56, 24), 1),
    StructureId.OPTIC_NERVE_R: StructureConfig(StructureId.OPTIC_NERVE_R, (56, 56, 24), 1),
    StructureId.CHIASM: StructureConfig(StructureId.CHIASM, (32, 32, 16), 1),
}


@dataclass
class TrainConfig:
    """Training protocol: one case per step, Adam with recommended settings."""

    epochs: int = 200
    batch: int = 1
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment_jitter: int = 0
    base_channels: int = 8
    levels: int = 4

    def __post_init__(self):
        if self.batch != 1:
            raise ConfigError("mini-batch size is fixed at 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.augment_jitter < 0:
            raise ConfigError("augment_jitter must be >= 0")


@dataclass
class PipelineModel:
    """Everything needed to run one structure end to end."""

    structure: StructureConfig
    crop: CropSpec
    locnet: UNet
    segnet: UNet

    def __post_init__(self):
        expected_lo = tuple(w // LOC_FACTOR for w in self.crop.window)
        if tuple(self.structure.locnet_input) != expected_lo:
            raise ConfigError(
                f"locnet_input {self.structure.locnet_input} != crop window "
                f"{self.crop.window} / {LOC_FACTOR}"
            )


def extract_target_volume(image: Volume, box: BBox, cfg: StructureConfig) -> Volume:
    """Crop the box from the frame; the mandible rule halves z by averaging."""
    if tuple(box.size) != tuple(cfg.box_size):
        raise ConfigError(f"box size {box.size} != configured {cfg.box_size}")
    v = crop_or_pad(image, box, fill=0.0)
    if cfg.segnet_z_halved:
        v = downsample_factor(v, (1, 1, 2))
    return v


def extract_target_mask(gt: Mask, box: BBox, cfg: StructureConfig) -> Mask:
    """Ground-truth window matching :func:`extract_target_volume` (majority
    vote when z is halved)."""
    if tuple(box.size) != tuple(cfg.box_size):
        raise ConfigError(f"box size {box.size} != configured {cfg.box_size}")
    m = crop_or_pad(gt, box, fill=False)
    if cfg.segnet_z_halved:
        m = downsample_factor(m, (1, 1, 2))
    return m


def _as_tensor(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=np.float32)[None, None]


def _jittered_box(box: BBox, jitter: int, dims: Triple, rng) -> BBox:
    if jitter == 0:
        return box
    shift = rng.integers(-jitter, jitter + 1, size=3)
    mins = tuple(
        int(min(max(m + s, 0), d - sz))
        for m, s, d, sz in zip(box.min, shift, dims, box.size)
    )
    return BBox(mins, box.size)


def _training_pair(stage: str, image: Volume, gt: Mask, cfg: StructureConfig,
                   jitter: int, rng):
    if stage == "loc":
        x = downsample_factor(image, (LOC_FACTOR,) * 3)
        y = make_loc_target(gt, cfg.box_size, LOC_FACTOR)
        return _as_tensor(x.data), _as_tensor(y.data)
    box = centroid_box(gt, cfg.box_size)
    box = _jittered_box(box, jitter, gt.dims, rng)
    x = extract_target_volume(image, box, cfg)
    y = extract_target_mask(gt, box, cfg)
    return _as_tensor(x.data), _as_tensor(y.data)


def train_stage(stage: str, cases: list[tuple[Volume, Mask]], cfg: StructureConfig,
                tcfg: TrainConfig) -> tuple[UNet, list[float]]:
    """Train one network (stage 'loc' or 'seg') over preprocessed cases.

    Runs ``epochs`` passes with one case per gradient step, shuffled by the
    seeded RNG.  Cases with empty ground truth are skipped with a warning.
    Returns the model and the per-step loss trace.
    """
    if stage not in ("loc", "seg"):
        raise ValueError(f"stage must be 'loc' or 'seg', got {stage!r}")
    usable = []
    for i, (image, gt) in enumerate(cases):
        if not gt.data.any():
            log.warning("case %d has an empty %s mask; skipped", i, cfg.id.value)
            continue
        usable.append((image, gt))
    if not usable:
        raise TrainError(f"no usable cases to train {stage} for {cfg.id.value}")

    net = UNet.initialized(
        UNetConfig(levels=tcfg.levels, base_channels=tcfg.base_channels),
        seed=tcfg.seed,
    )
    state = AdamState.for_params(
        net.params, net.trainable_names(),
        lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps,
    )
    rng = np.random.default_rng(tcfg.seed)
    jitter = tcfg.augment_jitter if stage == "seg" else 0
    fixed_pairs = None
    if jitter == 0:
        fixed_pairs = [_training_pair(stage, im, gt, cfg, 0, rng) for im, gt in usable]
    trace = []
    for _ in range(tcfg.epochs):
        order = rng.permutation(len(usable))
        for i in order:
            if fixed_pairs is not None:
                x, y = fixed_pairs[i]
            else:
                x, y = _training_pair(stage, *usable[i], cfg, jitter, rng)
            loss, grads = net.loss_and_grads(x, y)
            adam_step(net.params, grads, state)
            trace.append(loss)
    return net, trace


def postprocess_islands(m: Mask) -> Mask:
    """Delete 26-connected components smaller than 10% of total foreground.

    Strictly-smaller components are removed; the largest component (all of
    them, under ties) is always kept.
    """
    labels, counts = label_components(m, connectivity=26)
    if counts.size <= 1:
        return Mask(m.data.copy(), m.spacing)
    total = counts.sum()
    keep = counts >= 0.10 * total
    keep |= counts == counts.max()
    lut = np.concatenate([[False], keep])
    return Mask(lut[labels], m.spacing)


@dataclass
class InferResult:
    """Masks in both frames plus the located box for diagnostics."""

    mask_iso: Mask
    mask_raw: Mask
    box: BBox
    crop_box: BBox


def preprocess_case(image_raw: Volume, crop: CropSpec,
                    masks: dict | None = None):
    """Resample to 1 mm, crop with group margins, normalize.

    Returns (normalized cropped image, crop box, cropped masks dict).
    Masks are resampled nearest-neighbor and cropped with the same box.
    """
    iso = resample_isotropic(image_raw, 1.0, "image")
    crop_box = compute_crop_box(iso.dims, crop)
    cropped = crop_or_pad(iso, crop_box, fill=HU_MIN)
    norm = normalize_intensity(cropped)
    out_masks = {}
    if masks:
        for name, mask in masks.items():
            miso = resample_isotropic(mask, 1.0, "mask")
            out_masks[name] = crop_or_pad(miso, crop_box, fill=False)
    return norm, crop_box, out_masks


def _threshold(logits: np.ndarray, thr: float) -> np.ndarray:
    return expit(logits[0, 0]) >= thr


def _map_mask_to_raw(mask_frame: np.ndarray, crop_box: BBox, raw_dims: Triple,
                     raw_spacing, target_spacing: float = 1.0) -> np.ndarray:
    """Nearest-neighbor transfer from the cropped isotropic frame back to the
    raw grid, inverting the resample + crop geometry."""
    idx = []
    valid = []
    for axis in range(3):
        u = (np.arange(raw_dims[axis]) + 0.5) * raw_spacing[axis] / target_spacing - 0.5
        i = np.rint(u).astype(np.int64) - crop_box.min[axis]
        ok = (i >= 0) & (i < crop_box.size[axis])
        idx.append(np.clip(i, 0, crop_box.size[axis] - 1))
        valid.append(ok)
    out = mask_frame[np.ix_(idx[0], idx[1], idx[2])]
    out &= valid[0][:, None, None]
    out &= valid[1][None, :, None]
    out &= valid[2][None, None, :]
    return out


def infer_structure(image_raw: Volume, model: PipelineModel) -> InferResult:
    """Full two-stage inference on a raw image; an empty final mask is a
    valid outcome, not an error."""
    cfg = model.structure
    norm, crop_box, _ = preprocess_case(image_raw, model.crop)

    lo = downsample_factor(norm, (LOC_FACTOR,) * 3)
    loc_logits = model.locnet.predict_logits(_as_tensor(lo.data))
    loc_mask = Mask(_threshold(loc_logits, cfg.prob_threshold), lo.spacing)
    lo_box = locate_box(loc_mask, tuple(s // LOC_FACTOR for s in cfg.box_size))
    box = scale_box_up(lo_box, cfg.box_size, model.crop.window, LOC_FACTOR)

    tv = extract_target_volume(norm, box, cfg)
    seg_logits = model.segnet.predict_logits(_as_tensor(tv.data))
    seg = Mask(_threshold(seg_logits, cfg.prob_threshold), tv.spacing)
    if cfg.segnet_z_halved:
        seg = upsample_repeat(seg, (1, 1, 2))
    seg = postprocess_islands(seg)

    frame = np.zeros(model.crop.window, dtype=bool)
    paste(frame, seg.data, box)
    mask_iso = Mask(frame, (1.0, 1.0, 1.0))
    raw = _map_mask_to_raw(frame, crop_box, image_raw.dims, image_raw.spacing)
    mask_raw = Mask(raw, image_raw.spacing)
    return InferResult(mask_iso, mask_raw, box, crop_box)
