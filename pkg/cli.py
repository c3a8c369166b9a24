"""
Command-line entry points.

    python cli.py gen-scene --seed 0 --out data/desk
    python cli.py train-internal --scene-dir data/desk --out runs/desk/internal.iesr
    python cli.py build-guidance --scene-dir data/desk --internal runs/desk/internal.iesr --out runs/desk/guidance
    python cli.py train-hr --scene-dir data/desk --internal runs/desk/internal.iesr \
        --manifest runs/desk/guidance/manifest.tsv --out runs/desk/hr.iesr
    python cli.py run-experiment --config experiment.yaml --out runs/exp
    python cli.py run-experiment --set lambda_ds=0.3 --set fusion=sum --seeds 0,1,2

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from splat_bench import (
    format_metric, generate_scene, load_ground_truth, load_views, make_initial_scene, psnr, row_payload,
    run_experiment, save_synthetic, ssim, sweep_threshold,
)
from splat_guidance import build_guidance, save_external_guidance
from splat_models import GuidanceConfig
from splat_renderer import ImageBuffer, sr_splat
from splat_trainer import load_checkpoint, load_scene, save_checkpoint, train_hr, train_internal, write_training_log
from utils.app_config import parse_overrides, resolve_experiment_spec, resolve_train_config
from utils.errors import EXIT_CONFIG_ERROR, EXIT_NUMERICAL_FAILURE, EXIT_OK, IESRError, NumericalFailureError
from utils.image_io import depth_to_png, read_image, write_fimg, write_png
from utils.scene_io import read_cameras, write_scene

logger = logging.getLogger("iesr.cli")

# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "iters": "iterations",
    "mv_views": "mv_views",
    "scale": "scale_factor",
    "seed": "seed",
    "threshold": "loss.threshold",
    "lambda_i": "loss.lambda_i",
    "lambda_e": "loss.lambda_e",
}

# flag dest -> ExperimentSpec field
EXPERIMENT_FLAGS = {
    "iters": "train.iterations",
    "mv_views": "train.mv_views",
    "threshold": "train.loss.threshold",
    "lambda_i": "train.loss.lambda_i",
    "lambda_e": "train.loss.lambda_e",
    "scale": "scale",
    "down_factor": "down_factor",
    "seed": "seed",
    "out": "output_dir",
}


def _collect(args: argparse.Namespace, mapping: Dict[str, str], extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Flag layer: mapped flags, then `extra`, then `--set` overrides."""
    flags = {}
    for dest, key in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            flags[key] = str(value) if isinstance(value, Path) else value
    flags.update(extra or {})
    flags.update(parse_overrides(getattr(args, "overrides", None) or []))
    return flags


def _view_ids(text: Optional[str]) -> Optional[List[str]]:
    return [v.strip() for v in text.split(",") if v.strip()] if text else None


def _seeds(text: Optional[str]) -> Dict[str, Any]:
    return {"seeds": [int(s) for s in text.split(",") if s.strip()]} if text else {}


def _resume(path: Optional[Path]):
    if path is None:
        return None
    model, state, meta = load_checkpoint(path)
    logger.info(f"Resuming from {path} at step {meta.get('step', 0)}")
    return model, state, int(meta.get("step", 0))


def cmd_gen_scene(args: argparse.Namespace) -> int:
    data = generate_scene(args.seed or 0, args.n_gaussians, args.layout, args.num_views, args.lr_resolution,
                          args.scale or 4, args.down_factor)
    written = save_synthetic(data, args.out)
    init = make_initial_scene(data.scene, args.seed or 0, args.init)
    written.append(write_scene(Path(args.out) / "init.txt", init))
    logger.info(f"Wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_train_internal(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args.config, _collect(args, TRAIN_FLAGS))
    views = load_views(args.scene_dir, _view_ids(args.views))
    init_path = args.init or Path(args.scene_dir) / "init.txt"
    result = train_internal(views, load_scene(init_path), cfg, quiet=args.quiet, resume=_resume(args.resume))
    save_checkpoint(args.out, result.model, result.state, result.steps, stage="internal")
    write_training_log(Path(args.out).with_suffix(".log.csv"), result.log)
    return EXIT_OK


def _guidance_config(args: argparse.Namespace, cache_dir: Path) -> GuidanceConfig:
    values: Dict[str, Any] = {"cache_dir": cache_dir}
    for name in ("source", "depth_source", "manifest", "depth_blur"):
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    if args.seed is not None:
        values["seed"] = args.seed
    return GuidanceConfig(**values)


def cmd_build_guidance(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args.config, _collect(args, TRAIN_FLAGS))
    views = load_views(args.scene_dir, _view_ids(args.views))
    gcfg = _guidance_config(args, Path(args.out))
    ground_truth = None
    if gcfg.source == "ground_truth" or gcfg.depth_source == "ground_truth":
        ground_truth = load_ground_truth(args.scene_dir, [v.view_id for v in views])
    guidance = build_guidance(views, load_scene(args.internal), cfg.scale_factor, gcfg, cfg.render, ground_truth)
    provenance = {"bicubic": "bicubic-fallback", "ground_truth": "ground-truth"}.get(gcfg.source, "ingested")
    manifest = save_external_guidance(guidance, args.out, cfg.scale_factor, provenance)
    print(manifest)
    return EXIT_OK


def cmd_train_hr(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args.config, _collect(args, TRAIN_FLAGS))
    views = load_views(args.scene_dir, _view_ids(args.views))
    internal = load_scene(args.internal)
    cache_dir = Path(args.manifest).parent if args.manifest else Path(args.out).parent / "guidance"
    gcfg = _guidance_config(args, cache_dir)
    ground_truth = None
    if gcfg.manifest is None and (gcfg.source == "ground_truth" or gcfg.depth_source == "ground_truth"):
        ground_truth = load_ground_truth(args.scene_dir, [v.view_id for v in views])
    guidance = build_guidance(views, internal, cfg.scale_factor, gcfg, cfg.render, ground_truth)
    result = train_hr(views, internal, guidance, cfg, quiet=args.quiet, resume=_resume(args.resume))
    save_checkpoint(args.out, result.model, result.state, result.steps, stage="hr")
    write_training_log(Path(args.out).with_suffix(".log.csv"), result.log)
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args.config, _collect(args, TRAIN_FLAGS))
    scene = load_scene(args.checkpoint)
    cameras = read_cameras(args.cameras)
    wanted = set(_view_ids(args.views) or [c.view_id for c in cameras])
    out = Path(args.out)
    for cam in cameras:
        if cam.view_id not in wanted:
            continue
        image, depth = sr_splat(scene, cam, args.scale or 1, cfg=cfg.render)
        write_png(out / f"{cam.view_id}.png", image.data)
        write_fimg(out / f"{cam.view_id}.fimg", image.data)
        depth_to_png(out / f"{cam.view_id}_depth.png", depth.data, depth.coverage)
    logger.info(f"Rendered {len(wanted)} views at x{args.scale or 1} into {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    a = ImageBuffer(read_image(args.image))
    b = ImageBuffer(read_image(args.reference))
    print(json.dumps({"psnr": format_metric(psnr(a, b)), "ssim": format_metric(ssim(a, b))}))
    return EXIT_OK


def cmd_run_experiment(args: argparse.Namespace) -> int:
    extra = _seeds(args.seeds)
    if args.ablation:
        extra["ablation"] = True
    spec = resolve_experiment_spec(args.config, _collect(args, EXPERIMENT_FLAGS, extra))
    report = run_experiment(spec, quiet=args.quiet)
    print(json.dumps([row_payload(r) for r in report.rows], indent=2))
    return EXIT_OK if not report.failures else EXIT_NUMERICAL_FAILURE


def cmd_sweep_threshold(args: argparse.Namespace) -> int:
    extra = _seeds(args.seeds)
    if args.thresholds:
        extra["thresholds"] = [float(t) for t in args.thresholds.split(",")]
    spec = resolve_experiment_spec(args.config, _collect(args, EXPERIMENT_FLAGS, extra))
    report = sweep_threshold(spec, quiet=args.quiet)
    for row in report.rows:
        print(f"{row.name}\t{format_metric(row.psnr)}\t{format_metric(row.ssim)}")
    return EXIT_OK if not report.failures else EXIT_NUMERICAL_FAILURE


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    from app import app

    uvicorn.run(app, host=args.host or os.getenv("HOST", "0.0.0.0"),
                port=args.port or int(os.getenv("PORT", "8000")), log_level="info")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, experiment: bool = False) -> None:
    p.add_argument("--config", type=Path, help="key = value or YAML config file")
    p.add_argument("--scale", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--lambda-i", type=float)
    p.add_argument("--lambda-e", type=float)
    p.add_argument("--mv-views", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true", help="No progress bars")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   help="Override any configuration key (repeatable, applied last)")
    if experiment:
        p.add_argument("--down-factor", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--seeds", help="Comma-separated seeds; tables then hold per-row medians")


def _add_guidance(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", choices=["ingested", "bicubic", "ground_truth"])
    p.add_argument("--depth-source", choices=["internal_noisy", "ground_truth"])
    p.add_argument("--depth-blur", type=float)
    p.add_argument("--manifest", type=Path, help="External guidance manifest (implies --source ingested)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iesr", description="Super-resolution Gaussian splatting at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="Generate a synthetic scene with LR views and HR ground truth")
    p.add_argument("--n-gaussians", type=int, default=100)
    p.add_argument("--layout", choices=["cluster", "shell", "textured-grid"], default="cluster")
    p.add_argument("--num-views", type=int, default=10)
    p.add_argument("--lr-resolution", type=int, default=32)
    p.add_argument("--init", choices=["points", "random"], default="points")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=int)
    p.add_argument("--down-factor", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train-internal", help="Stage 1: fit the internal model to the LR views")
    _add_common(p)
    p.add_argument("--scene-dir", type=Path, required=True)
    p.add_argument("--views", help="Comma-separated training view ids (default: all)")
    p.add_argument("--init", type=Path, help="Initial scene (default: <scene-dir>/init.txt)")
    p.add_argument("--resume", type=Path, help="Checkpoint to continue from")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_internal)

    p = sub.add_parser("build-guidance", help="Internal and external HR guidance for every training view")
    _add_common(p)
    _add_guidance(p)
    p.add_argument("--scene-dir", type=Path, required=True)
    p.add_argument("--views")
    p.add_argument("--internal", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_build_guidance)

    p = sub.add_parser("train-hr", help="Stage 2: fine-tune on fused HR guidance")
    _add_common(p)
    _add_guidance(p)
    p.add_argument("--scene-dir", type=Path, required=True)
    p.add_argument("--views")
    p.add_argument("--internal", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_hr)

    p = sub.add_parser("render", help="SR-splat a checkpoint into cameras")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--views")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR and SSIM of an image against a reference")
    p.add_argument("image", type=Path)
    p.add_argument("reference", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-experiment", help="Full desk-scale experiment")
    _add_common(p, experiment=True)
    p.add_argument("--ablation", action="store_true")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("sweep-threshold", help="Holdout PSNR over discrepancy thresholds")
    _add_common(p, experiment=True)
    p.add_argument("--thresholds", help="Comma-separated values, e.g. 0,0.3,0.6,0.9,1")
    p.add_argument("--ablation", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_sweep_threshold)

    p = sub.add_parser("serve", help="Start the viewer service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalFailureError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL_FAILURE
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG_ERROR
    except IESRError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (FileNotFoundError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
