"""Command-line entry point: dataset generation, training, rendering,
refinement, and evaluation.

Configuration precedence is CLI flag over config-file key over built-in
default, and every command dumps the effective configuration next to its
outputs. Progress goes to stderr; files are the only machine-readable
output. Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .checkpoint import CheckpointError
from .field import FieldConfig, FieldParams
from .metrics import psnr, ssim, write_metrics_report
from .refine import RefinerParams, RefineTrainConfig, RefinerConfig, refine_image
from .scenes import (
    AnalyticScene,
    Box,
    DatasetError,
    Sphere,
    load_dataset,
    make_dataset,
    toy_three_sphere_scene,
)
from .training import TrainConfig, render_dataset_view, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise DatasetError(f"config file {p} must hold a JSON object")
    return doc


def _merge_config(defaults: dict, file_cfg: dict, args: argparse.Namespace,
                  keys: list[str]) -> dict:
    """CLI flag > config file > default, per key.

    Config files may be shared between commands, so keys a command does not
    know are skipped with a warning rather than rejected.
    """
    merged = dict(defaults)
    for key, value in file_cfg.items():
        if key in defaults:
            merged[key] = value
        else:
            _log(f"note: config key '{key}' not used by this command")
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _dump_effective(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w") as fh:
        json.dump({"command": command, **config}, fh, indent=2, default=str)


def _save_render(out: Path, name: str, image: np.ndarray,
                 depth: np.ndarray | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"{name}.npy", image)
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(quantized).save(out / f"{name}.png")
    if depth is not None:
        np.save(out / f"{name}_depth.npy", depth)


# -- subcommands -----------------------------------------------------------------


_DATASET_DEFAULTS = {
    "seed": 0, "scale": 2, "views": 16, "test_views": 8, "val_views": 2,
    "hr_res": 64, "oracle_steps": 10_000, "camera_radius": 3.0,
    "tent_variant": True, "scene": "three-spheres",
}


def cmd_make_dataset(args) -> int:
    cfg = _merge_config(_DATASET_DEFAULTS, _load_config_file(args.config), args,
                        list(_DATASET_DEFAULTS))
    out = Path(args.out)
    scene = _scene_from_config(cfg)
    _dump_effective(out, "make-dataset", cfg)
    _log(f"generating {cfg['views']} train / {cfg['test_views']} test views "
         f"at {cfg['hr_res']}px (scale {cfg['scale']}) ...")
    make_dataset(scene, n_views=int(cfg["views"]), hr_res=int(cfg["hr_res"]),
                 s=int(cfg["scale"]), seed=int(cfg["seed"]), out_dir=out,
                 n_test=int(cfg["test_views"]), n_val=int(cfg["val_views"]),
                 camera_radius=float(cfg["camera_radius"]),
                 oracle_steps=int(cfg["oracle_steps"]),
                 extra_kernels=("tent",) if cfg["tent_variant"] else ())
    _log(f"dataset written under {out}")
    return EXIT_OK


def _scene_from_config(cfg: dict) -> AnalyticScene:
    spec = cfg["scene"]
    if spec == "three-spheres":
        return toy_three_sphere_scene()
    if isinstance(spec, dict):
        prims = []
        for p in spec.get("primitives", []):
            kind = p.get("kind")
            if kind == "sphere":
                prims.append(Sphere(tuple(p["center"]), float(p["radius"]),
                                    tuple(p["albedo"]), float(p["density"])))
            elif kind == "box":
                prims.append(Box(tuple(p["center"]), tuple(p["half_sizes"]),
                                 tuple(p["albedo"]), float(p["density"])))
            else:
                raise DatasetError(f"unknown primitive kind '{kind}'")
        return AnalyticScene(tuple(prims),
                             background=spec.get("background", "white"),
                             bound_radius=float(spec.get("bound_radius", 1.0)))
    raise DatasetError(f"unknown scene '{spec}'")


_TRAIN_DEFAULTS = {
    "seed": 0, "scale": 2, "epochs": 10, "batch_rays": 2048,
    "n_coarse": 64, "n_fine": 64, "lr_start": 5e-4, "lr_end": 5e-6,
    "jitter": True, "lr_role": "lr", "micro_chunk_pixels": 128,
    "field": {}, "workers": 1,
}


def _train_config(cfg: dict) -> TrainConfig:
    field = FieldConfig(**cfg["field"])
    return TrainConfig(
        s=int(cfg["scale"]), batch_rays=int(cfg["batch_rays"]),
        epochs=int(cfg["epochs"]), lr_start=float(cfg["lr_start"]),
        lr_end=float(cfg["lr_end"]), n_coarse=int(cfg["n_coarse"]),
        n_fine=int(cfg["n_fine"]), seed=int(cfg["seed"]),
        jitter=bool(cfg["jitter"]), lr_role=str(cfg["lr_role"]),
        micro_chunk_pixels=int(cfg["micro_chunk_pixels"]), field=field)


def cmd_train(args) -> int:
    cfg = _merge_config(_TRAIN_DEFAULTS, _load_config_file(args.config), args,
                        [k for k in _TRAIN_DEFAULTS if k != "field"])
    dataset = load_dataset(args.dataset)
    train_cfg = _train_config(cfg)
    out = Path(args.out)
    _dump_effective(out, "train", {**cfg, "mode": args.mode,
                                   "field": asdict(train_cfg.field),
                                   "dataset": str(args.dataset)})

    def progress(record):
        if record.get("event") == "epoch_end":
            _log(f"epoch {record['epoch']}: val psnr "
                 f"{record['val_psnr'] if record['val_psnr'] is not None else 'n/a'}")

    _log(f"training mode={args.mode} scale={train_cfg.s} "
         f"epochs={train_cfg.epochs} batch_rays={train_cfg.batch_rays}")
    train(dataset, train_cfg, args.mode, out_dir=out, progress=progress)
    _log(f"checkpoints and log written under {out}")
    return EXIT_OK


_RENDER_DEFAULTS = {
    "seed": 0, "scale": 2, "split": "test", "workers": 1,
    "n_coarse": 64, "n_fine": 64,
}


def cmd_render(args) -> int:
    cfg = _merge_config(_RENDER_DEFAULTS, _load_config_file(args.config), args,
                        list(_RENDER_DEFAULTS))
    dataset = load_dataset(args.dataset)
    params = FieldParams.load(args.ckpt)
    out = Path(args.out)
    _dump_effective(out, "render", {**cfg, "ckpt": str(args.ckpt)})
    split = cfg["split"]
    if split not in dataset.manifest.splits:
        raise DatasetError(f"dataset has no split '{split}'")
    render_cfg = TrainConfig(
        s=max(int(cfg["scale"]), 1), n_coarse=int(cfg["n_coarse"]),
        n_fine=int(cfg["n_fine"]), seed=int(cfg["seed"]), field=params.config)
    for i in range(dataset.n_views(split)):
        img, depth = render_dataset_view(params, dataset, split, i, render_cfg,
                                         scale=int(cfg["scale"]),
                                         workers=int(cfg["workers"]))
        _save_render(out, f"{split}_{i:03d}", np.clip(img, 0.0, 1.0), depth)
        _log(f"rendered {split}[{i}]")
    return EXIT_OK


_REFINE_DEFAULTS = {
    "seed": 0, "scale": 2, "reference": 0, "steps": 300, "lr": 2e-4,
    "workers": 1, "n_coarse": 64, "n_fine": 64, "base_channels": 32,
}


def cmd_refine(args) -> int:
    cfg = _merge_config(_REFINE_DEFAULTS, _load_config_file(args.config), args,
                        list(_REFINE_DEFAULTS))
    dataset = load_dataset(args.dataset)
    params = FieldParams.load(args.field_ckpt)
    out = Path(args.out)
    _dump_effective(out, "refine", {**cfg, "field_ckpt": str(args.field_ckpt),
                                    "refiner_ckpt": args.refiner_ckpt})
    manifest = dataset.manifest
    s = int(cfg["scale"])
    ref_id = int(cfg["reference"])
    if not 0 <= ref_id < dataset.n_views("train"):
        raise DatasetError(f"--reference {ref_id} outside the train split")
    render_cfg = TrainConfig(s=s, n_coarse=int(cfg["n_coarse"]),
                             n_fine=int(cfg["n_fine"]), seed=int(cfg["seed"]),
                             field=params.config)
    intr_hr = manifest.intrinsics["lr"].scaled(s)
    ref_image = dataset.load_array("train", ref_id, "hr")

    if args.refiner_ckpt is not None:
        refiner = RefinerParams.load(args.refiner_ckpt)
        _log(f"loaded refiner from {args.refiner_ckpt}")
    else:
        _log(f"rendering the reference view {ref_id} for refiner training ...")
        sr_ref, _ = render_dataset_view(params, dataset, "train", ref_id,
                                        render_cfg, scale=s,
                                        workers=int(cfg["workers"]))
        rt_cfg = RefineTrainConfig(
            steps=int(cfg["steps"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]),
            refiner=RefinerConfig(base_channels=int(cfg["base_channels"])))
        _log(f"training refiner for {rt_cfg.steps} steps ...")
        refiner, _ = train_refiner_logged(np.clip(sr_ref, 0, 1), ref_image,
                                          rt_cfg)
        refiner.save(out / "refiner.npz")

    pose_ref = dataset.pose("train", ref_id)
    for i in range(dataset.n_views("test")):
        img, depth = render_dataset_view(params, dataset, "test", i, render_cfg,
                                         scale=s, workers=int(cfg["workers"]))
        img = np.clip(img, 0.0, 1.0)
        refined = refine_image(img, depth, dataset.pose("test", i), intr_hr,
                               ref_image, pose_ref, intr_hr, refiner)
        _save_render(out, f"test_{i:03d}", refined)
        _save_render(out / "unrefined", f"test_{i:03d}", img)
        _log(f"refined test[{i}]")
    return EXIT_OK


def train_refiner_logged(sr_ref, ref_image, rt_cfg):
    from .refine import train_refiner

    def progress(record):
        if record["step"] % 50 == 0:
            _log(f"refiner step {record['step']}: loss {record['loss']:.5f}")

    return train_refiner(sr_ref, ref_image, rt_cfg, progress=progress)


_EVAL_DEFAULTS = {"method": "renders", "scene": "scene"}


def cmd_eval(args) -> int:
    cfg = _merge_config(_EVAL_DEFAULTS, _load_config_file(args.config), args,
                        list(_EVAL_DEFAULTS))
    renders = Path(args.renders)
    gt = Path(args.gt)
    out = Path(args.out)
    if not renders.is_dir():
        raise DatasetError(f"render directory not found: {renders}")
    if not gt.is_dir():
        raise DatasetError(f"ground-truth directory not found: {gt}")
    names = sorted(p.name for p in renders.glob("*.npy")
                   if not p.name.endswith("_depth.npy"))
    if not names:
        raise DatasetError(f"no .npy renders under {renders}")
    rows = []
    for view, name in enumerate(names):
        gt_path = gt / name
        if not gt_path.exists():
            raise DatasetError(f"no ground truth for {name} under {gt}")
        a = np.load(renders / name)
        b = np.load(gt_path)
        rows.append({"scene": cfg["scene"], "view": view,
                     "method": cfg["method"], "psnr": psnr(a, b),
                     "ssim": ssim(a, b)})
    _dump_effective(out, "eval", {**cfg, "renders": str(renders), "gt": str(gt)})
    write_metrics_report(rows, out / "metrics.txt", out / "metrics.json")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    _log(f"{len(rows)} views, mean psnr {mean_psnr:.3f}; report under {out}")
    return EXIT_OK


# -- argument wiring ---------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="srfields",
                     description="Train and evaluate a super-resolving "
                                 "radiance field on procedural scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flag > file > default)")
        p.add_argument("--seed", type=int, help="RNG seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-dataset", help="generate a procedural posed dataset")
    common(p)
    p.add_argument("--scale", type=int, help="LR-to-HR scale factor s")
    p.add_argument("--views", type=int, help="training view count")
    p.add_argument("--test-views", type=int, dest="test_views",
                   help="held-out view count")
    p.add_argument("--val-views", type=int, dest="val_views",
                   help="validation view count")
    p.add_argument("--hr-res", type=int, dest="hr_res",
                   help="high-resolution image size in pixels")
    p.add_argument("--oracle-steps", type=int, dest="oracle_steps",
                   help="quadrature steps per ray for ground truth")

    p = sub.add_parser("train", help="train the radiance field")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--mode", choices=["vanilla", "supersample"],
                   default="supersample", help="training objective")
    p.add_argument("--scale", type=int, help="sub-pixel grid scale s")
    p.add_argument("--epochs", type=int, help="full passes over the train split")
    p.add_argument("--batch-rays", type=int, dest="batch_rays",
                   help="rays per optimizer step")
    p.add_argument("--n-coarse", type=int, dest="n_coarse",
                   help="coarse samples per ray")
    p.add_argument("--n-fine", type=int, dest="n_fine",
                   help="fine samples per ray")
    p.add_argument("--workers", type=int, help="parallel worker count")

    p = sub.add_parser("render", help="render dataset views from a checkpoint")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="field checkpoint")
    p.add_argument("--split", help="dataset split to render")
    p.add_argument("--scale", type=int, help="render at scale x LR resolution")
    p.add_argument("--n-coarse", type=int, dest="n_coarse",
                   help="coarse samples per ray")
    p.add_argument("--n-fine", type=int, dest="n_fine",
                   help="fine samples per ray")
    p.add_argument("--workers", type=int, help="parallel worker count")

    p = sub.add_parser("refine", help="train/apply the patch refiner")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--field-ckpt", required=True, dest="field_ckpt",
                   help="trained field checkpoint")
    p.add_argument("--refiner-ckpt", dest="refiner_ckpt",
                   help="reuse an existing refiner checkpoint")
    p.add_argument("--reference", type=int,
                   help="train-split view id of the HR reference image")
    p.add_argument("--scale", type=int, help="render at scale x LR resolution")
    p.add_argument("--steps", type=int, help="refiner training steps")
    p.add_argument("--workers", type=int, help="parallel worker count")

    p = sub.add_parser("eval", help="PSNR/SSIM tables for rendered views")
    common(p)
    p.add_argument("--renders", required=True, help="directory of rendered .npy")
    p.add_argument("--gt", required=True, help="directory of ground-truth .npy")
    p.add_argument("--method", help="method label for the report")

    return parser


_COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "render": cmd_render,
    "refine": cmd_refine,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _log(f"usage error: {e}")
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (DatasetError, CheckpointError, ValueError) as e:
        _log(f"validation error: {e}")
        return EXIT_VALIDATION
    except OSError as e:
        _log(f"i/o error: {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        _log("interrupted")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
