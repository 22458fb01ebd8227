"""Command-line surface: generate phantoms, preprocess, train, infer,
evaluate, locate, and run the gradient-check suite.

Every subcommand validates its flags before doing work, exits 0 on success,
and on failure prints one ``error: ...`` line to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import backend, config_io, phantom as phantom_mod, segpipe
from .errors import OarsegError
from .grids import Mask, StructureId, Volume
from .locator import locate_box
from .metrics import MetricsRecord, evaluate_pair, summarize
from .model_io import load_model, save_model
from .nn3d import UNet, UNetConfig
from .nn3d.gradcheck import LINEAR_LAYERS, check_all_layers, check_tiny_unet
from .nrrd_io import read_volume, write_volume
from .preprocess import CropSpec
from .segpipe import PipelineModel, StructureConfig, TrainConfig


def _triple(text: str, flag: str):
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise OarsegError(f"{flag}: expected three comma-separated integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise OarsegError(f"{flag}: expected integers, got {text!r}") from None


def _load_cases(data_dir: Path, structure: str):
    cases = []
    case_dirs = sorted(p for p in data_dir.iterdir() if p.is_dir())
    if not case_dirs:
        raise OarsegError(f"--data: no case directories under {data_dir}")
    for case in case_dirs:
        image, masks = phantom_mod.read_case(case, structure)
        if structure not in masks:
            raise OarsegError(f"--data: {case} has no mask_{structure}.nrrd")
        gt = masks[structure]
        if not isinstance(gt, Mask):
            raise OarsegError(f"--data: {case}/mask_{structure}.nrrd is not binary")
        cases.append((image, gt))
    return cases, [p.name for p in case_dirs]


# -- subcommands -----------------------------------------------------------


def cmd_phantom(args) -> int:
    structure = StructureId.from_name(args.structure).value
    dims = _triple(args.size, "--size")
    # the default ellipsoid ranges are tuned for a 64-voxel frame; scale them
    # so any requested frame stays feasible
    f = min(dims) / 64.0
    base = phantom_mod.PhantomStructure()
    spec = phantom_mod.PhantomSpec(
        dims=dims,
        structures=(phantom_mod.PhantomStructure(
            name=structure,
            semi_axes_mm=tuple((lo * f, hi * f) for lo, hi in base.semi_axes_mm),
            center_jitter_mm=base.center_jitter_mm * f,
        ),),
        seed=args.seed,
    )
    out = Path(args.out)
    for i in range(args.cases):
        image, masks = phantom_mod.generate_case(spec, i)
        phantom_mod.write_case(out / phantom_mod.case_dir_name(i), image, masks)
    print(f"wrote {args.cases} cases to {out}")
    return 0


def cmd_preprocess(args) -> int:
    sid = StructureId.from_name(args.structure)
    cfg = config_io.load_config(args.config)
    scfg = cfg.structure(sid)
    image, masks = phantom_mod.read_case(Path(args.infile), sid.value)
    norm, crop_box, out_masks = segpipe.preprocess_case(
        image, cfg.crop_spec(scfg.crop_group), masks
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(norm, out / "image.nrrd")
    for name, mask in out_masks.items():
        write_volume(mask, out / f"mask_{name}.nrrd")
    print(f"preprocessed {args.infile} -> {out} (crop min {crop_box.min})")
    return 0


def _model_meta(stage: str, scfg: StructureConfig, cfg, tcfg: TrainConfig) -> dict:
    return {
        "stage": stage,
        "structure": scfg.id.value,
        "box_size": list(scfg.box_size),
        "crop_group": scfg.crop_group,
        "locnet_input": list(scfg.locnet_input),
        "segnet_z_halved": scfg.segnet_z_halved,
        "prob_threshold": scfg.prob_threshold,
        "crop_window": list(cfg.crop_window),
        "margins": [[list(f) for f in group] for group in cfg.margins],
        "levels": tcfg.levels,
        "base_channels": tcfg.base_channels,
    }


def cmd_train(args) -> int:
    if args.jobs:
        backend.set_num_threads(args.jobs)
    sid = StructureId.from_name(args.structure)
    cfg = config_io.load_config(args.config)
    scfg = cfg.structure(sid)
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    cases, _ = _load_cases(Path(args.data), sid.value)
    net, trace = segpipe.train_stage(args.stage, cases, scfg, tcfg)
    save_model(net.params, _model_meta(args.stage, scfg, cfg, tcfg), args.out)
    final = trace[-1] if trace else float("nan")
    print(f"trained {args.stage} for {sid.value}: {len(trace)} steps, "
          f"final loss {final:.6f}, saved {args.out}")
    return 0


def _pipeline_from_models(structure: str, locnet_path, segnet_path) -> PipelineModel:
    sid = StructureId.from_name(structure)
    loc_params, loc_meta = load_model(locnet_path)
    seg_params, seg_meta = load_model(segnet_path)
    for meta, path, stage in ((loc_meta, locnet_path, "loc"), (seg_meta, segnet_path, "seg")):
        if meta.get("structure") != sid.value:
            raise OarsegError(
                f"{path}: trained for {meta.get('structure')!r}, not {sid.value!r}"
            )
        if meta.get("stage") != stage:
            raise OarsegError(f"{path}: is a {meta.get('stage')!r} model, expected {stage!r}")
    geo_keys = ("box_size", "crop_window", "margins", "locnet_input", "segnet_z_halved")
    for key in geo_keys:
        if loc_meta.get(key) != seg_meta.get(key):
            raise OarsegError(f"model geometry mismatch on {key!r}")
    scfg = StructureConfig(
        id=sid,
        box_size=tuple(loc_meta["box_size"]),
        crop_group=int(loc_meta["crop_group"]),
        locnet_input=tuple(loc_meta["locnet_input"]),
        segnet_z_halved=bool(loc_meta["segnet_z_halved"]),
        prob_threshold=float(loc_meta["prob_threshold"]),
    )
    margins = loc_meta["margins"][scfg.crop_group - 1]
    crop = CropSpec(tuple(loc_meta["crop_window"]),
                    tuple(tuple(f) for f in margins))

    def build(meta, params):
        ucfg = UNetConfig(levels=int(meta["levels"]),
                          base_channels=int(meta["base_channels"]))
        return UNet(ucfg, params=params)

    return PipelineModel(scfg, crop, build(loc_meta, loc_params), build(seg_meta, seg_params))


def cmd_infer(args) -> int:
    if args.jobs:
        backend.set_num_threads(args.jobs)
    model = _pipeline_from_models(args.structure, args.locnet, args.segnet)
    image_path = Path(args.image)

    def run_one(path: Path, out_path: Path):
        image = read_volume(path)
        if isinstance(image, Mask):
            raise OarsegError(f"--image: {path} is a binary mask, expected an image")
        result = segpipe.infer_structure(image, model)
        mask = result.mask_iso if args.frame == "iso" else result.mask_raw
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_volume(mask, out_path)
        print(f"{path}: box min {result.box.min} size {result.box.size}, "
              f"foreground {mask.count()} -> {out_path}")

    if image_path.is_dir():
        case_dirs = sorted(p for p in image_path.iterdir() if p.is_dir())
        if not case_dirs:
            raise OarsegError(f"--image: no case directories under {image_path}")
        out_dir = Path(args.out)
        jobs = [(c / "image.nrrd", out_dir / f"{c.name}.nrrd") for c in case_dirs]
        if args.jobs and args.jobs > 1:
            import multiprocessing as mp

            with mp.get_context("spawn").Pool(args.jobs) as pool:
                pool.starmap(_infer_worker,
                             [(args.structure, args.locnet, args.segnet, args.frame,
                               str(src), str(dst)) for src, dst in jobs])
            for _, dst in jobs:
                print(f"wrote {dst}")
        else:
            for src, dst in jobs:
                run_one(src, dst)
    else:
        run_one(image_path, Path(args.out))
    return 0


def _infer_worker(structure, locnet, segnet, frame, src, dst):
    model = _pipeline_from_models(structure, locnet, segnet)
    image = read_volume(src)
    result = segpipe.infer_structure(image, model)
    mask = result.mask_iso if frame == "iso" else result.mask_raw
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    write_volume(mask, dst)


def _read_mask(path, flag: str) -> Mask:
    v = read_volume(path)
    if isinstance(v, Volume):
        raise OarsegError(f"{flag}: {path} is not a binary mask")
    return v


def cmd_evaluate(args) -> int:
    report = Path(args.report)
    if args.pred is None and args.gt is None:
        if not args.summary:
            raise OarsegError("--pred/--gt required unless --summary is given alone")
    elif args.pred is None or args.gt is None:
        raise OarsegError("--pred and --gt must be given together")
    else:
        pred = _read_mask(args.pred, "--pred")
        gt = _read_mask(args.gt, "--gt")
        rec = evaluate_pair(pred, gt, case=args.case, structure=args.structure,
                            frame=args.frame)
        report.parent.mkdir(parents=True, exist_ok=True)
        with report.open("a") as fh:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        hd_text = "inf" if math.isinf(rec.hd95_mm) else f"{rec.hd95_mm:.4f}"
        print(f"dsc {rec.dsc:.4f} hd95 {hd_text} ppv {rec.ppv:.4f} sen {rec.sen:.4f}")
    if args.summary:
        records = []
        with report.open() as fh:
            for line in fh:
                if line.strip():
                    records.append(MetricsRecord.from_dict(json.loads(line)))
        for s in summarize(records):
            print(f"{s.structure or '(unlabeled)'}: n={s.n} "
                  f"dsc {s.dsc_mean:.4f} +/- {s.dsc_sd:.4f}  "
                  f"hd95 {s.hd95_mean:.4f} +/- {s.hd95_sd:.4f} mm  "
                  f"ppv {s.ppv_mean:.4f} +/- {s.ppv_sd:.4f}  "
                  f"sen {s.sen_mean:.4f} +/- {s.sen_sd:.4f}")
    return 0


def cmd_locate(args) -> int:
    v = read_volume(args.prob)
    if isinstance(v, Mask):
        mask = v
    else:
        mask = Mask(v.data >= 0.5, v.spacing)
    box = locate_box(mask, _triple(args.box, "--box"))
    print(f"min {box.min[0]} {box.min[1]} {box.min[2]} "
          f"size {box.size[0]} {box.size[1]} {box.size[2]}")
    return 0


def cmd_gradcheck(args) -> int:
    results = check_all_layers(seed=args.seed)
    results.append(check_tiny_unet(seed=args.seed))
    ok = True
    for r in results:
        tol = 1e-7 if r.name in LINEAR_LAYERS else 1e-3
        status = "ok" if r.max_rel_err <= tol else "FAIL"
        if r.max_rel_err > tol:
            ok = False
        print(f"{status}  {r}  (tolerance {tol:g})")
    worst = max(r.max_rel_err for r in results)
    print(f"max relative error {worst:.3e}")
    return 0 if ok else 1


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="oarseg",
        description="Two-stage 3D U-Net pipeline for organ-at-risk segmentation.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    names = [s.value for s in StructureId]

    sp = sub.add_parser("phantom", help="generate synthetic cases")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--cases", type=int, required=True, help="number of cases")
    sp.add_argument("--seed", type=int, default=0, help="base RNG seed (default 0)")
    sp.add_argument("--size", default="64,64,64", help="frame dims X,Y,Z (default 64,64,64)")
    sp.add_argument("--structure", default="brainstem", choices=names,
                    help="structure name for the masks (default brainstem)")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("preprocess", help="resample, crop, and normalize one case")
    sp.add_argument("--in", dest="infile", required=True, help="case directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--structure", required=True, choices=names,
                    help="structure (selects the crop-margin group)")
    sp.add_argument("--config", default=None,
                    help="pipeline config YAML (default $OARSEG_CONFIG or built-ins)")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train one stage for one structure")
    sp.add_argument("--stage", required=True, choices=["loc", "seg"])
    sp.add_argument("--structure", required=True, choices=names)
    sp.add_argument("--data", required=True, help="directory of preprocessed case dirs")
    sp.add_argument("--out", required=True, help="output model file")
    sp.add_argument("--epochs", type=int, default=None,
                    help="passes over the cases (default from config: 200)")
    sp.add_argument("--seed", type=int, default=None, help="RNG seed (default from config: 0)")
    sp.add_argument("--config", default=None,
                    help="pipeline config YAML (default $OARSEG_CONFIG or built-ins)")
    sp.add_argument("--jobs", type=int, default=0, help="kernel threads (default: all)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="run the full two-stage flow")
    sp.add_argument("--structure", required=True, choices=names)
    sp.add_argument("--locnet", required=True, help="locator model file")
    sp.add_argument("--segnet", required=True, help="segmentation model file")
    sp.add_argument("--image", required=True,
                    help="raw image NRRD, or a directory of case dirs for batch mode")
    sp.add_argument("--out", required=True,
                    help="output mask NRRD (batch mode: output directory)")
    sp.add_argument("--frame", choices=["iso", "raw"], default="iso",
                    help="output grid: isotropic cropped frame or the raw grid (default iso)")
    sp.add_argument("--jobs", type=int, default=0,
                    help="parallel cases in batch mode / kernel threads (default: serial)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="compare a predicted mask to gold standard")
    sp.add_argument("--pred", default=None, help="predicted mask NRRD")
    sp.add_argument("--gt", default=None, help="gold-standard mask NRRD")
    sp.add_argument("--report", required=True, help="JSON-lines report file (appended)")
    sp.add_argument("--case", default="", help="case label for the record")
    sp.add_argument("--structure", default="", help="structure label for the record")
    sp.add_argument("--frame", default="iso", help="frame label for the record (default iso)")
    sp.add_argument("--summary", action="store_true",
                    help="print per-structure mean +/- SD over the whole report")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("locate", help="sliding-box search on a probability volume")
    sp.add_argument("--prob", required=True,
                    help="probability volume or binary mask NRRD (volumes threshold at 0.5)")
    sp.add_argument("--box", required=True, help="box size H,W,K in voxels")
    sp.set_defaults(func=cmd_locate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    sp.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    sp.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OarsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
