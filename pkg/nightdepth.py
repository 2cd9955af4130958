"""
Nightdepth Command Line
Generate synthetic night scenes, train and evaluate depth networks, and inspect each module.
"""
import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

import mcie
import raster_io
import sbm
from geometry import GeometryError
from metrics import METRIC_NAMES, EvalConfig, MetricsError
from ndiff import NdiffError
from pbr import PBRError
from synthscene import DatasetConfig, DatasetError, SceneError, make_dataset
from train_config import ConfigError, TrainConfig

import gradcheck_sweep
import pipeline

HANDLED_ERRORS = (ConfigError, DatasetError, SceneError, GeometryError, NdiffError, PBRError, MetricsError,
                  mcie.MCIEError, sbm.StatsError, raster_io.RasterFormatError, pipeline.CheckpointError,
                  pipeline.ResolutionMismatchError, pipeline.NonFiniteLossError, OSError)


def banner(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


def _flag_names(name: str) -> List[str]:
    names = [f"--{name}"]
    if "_" in name:
        names.append(f"--{name.replace('_', '-')}")
    return names


def add_train_config_args(parser: argparse.ArgumentParser):
    """Config file, preset and one --<key> override per TrainConfig field."""
    parser.add_argument("--config", help="key = value config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        group.add_argument(*_flag_names(f.name), dest=f"cfg_{f.name}", default=None, metavar="VALUE",
                           help=f"override {f.name}")


def train_config_from_args(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)}
    return TrainConfig.load(args.config, overrides)


def cmd_synth(args):
    values = {f.name: getattr(args, f.name) for f in fields(DatasetConfig) if getattr(args, f.name) is not None}
    cfg = DatasetConfig(**values)
    banner("Synthetic Dataset")
    print(f"Output: {args.out}")
    print(f"Triplets: {cfg.num_triplets} night, {cfg.day_count} day at {cfg.height}x{cfg.width}")
    root = make_dataset(cfg, args.out, progress=not args.no_progress)
    print(f"✓ Dataset written to {root}")


def cmd_enhance(args):
    frames = [raster_io.read_png(path) for path in args.frames]
    lut = mcie.snippet_lut(frames, args.sigma, args.levels, args.histogram_source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, frame in zip(args.frames, frames):
        raster_io.write_png(out / f"{Path(path).stem}_enhanced.png", mcie.apply_lut(frame, lut))
    lut.save_text(out / "lut.txt")
    if not lut.is_monotone():
        print("⚠️  Lookup table is not monotone")
    print(f"✓ Enhanced {len(frames)} frame(s) into {out}")


def cmd_mask(args):
    checkpoint = pipeline.load_checkpoint(args.checkpoint)
    state = sbm.load_state(args.stats)
    epsilon = args.epsilon if args.epsilon is not None else checkpoint.config.epsilon
    maps = pipeline.mask_maps(checkpoint, raster_io.read_png(args.target), raster_io.read_png(args.source),
                              state, epsilon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, mask in maps.items():
        raster_io.write_mask_png(out / f"mask_{name}.png", mask)
        print(f"  {name:<9} keeps {float(mask.mean()):.1%} of pixels")
    print(f"✓ Masks written to {out}")


def cmd_train(args):
    cfg = train_config_from_args(args)
    banner("Training")
    print(f"Dataset: {args.dataset} ({args.split})")
    print(f"Modules: PBR {'on' if cfg.use_pbr else 'off'} | MCIE {'on' if cfg.use_mcie else 'off'} | "
          f"SBM {'on' if cfg.use_sbm else 'off'}")
    print("=" * 60)
    result = pipeline.train(cfg, args.dataset, args.out, split=args.split)
    if result.metrics is not None:
        print(f"\nValidation: {result.metrics.summary()}")


def cmd_eval(args):
    checkpoint = pipeline.load_checkpoint(args.checkpoint)
    base = checkpoint.config.eval_config()
    eval_cfg = EvalConfig(max_depth=args.max_depth if args.max_depth is not None else base.max_depth,
                          min_depth=args.min_depth if args.min_depth is not None else base.min_depth,
                          median_scaling=not args.no_median_scaling)
    report = pipeline.evaluate_checkpoint(checkpoint, args.dataset, args.split, eval_cfg)
    banner("Evaluation")
    for name in METRIC_NAMES:
        print(f"{name:<9} {getattr(report, name):.4f}")
    if args.json:
        Path(args.json).write_text(report.to_json())
        print(f"✓ Metrics saved to {args.json}")


def cmd_gradcheck(args):
    banner("Gradient Check")
    try:
        result = gradcheck_sweep.run_sweep(args.only, tolerance=args.tolerance, progress=True)
    except ValueError as e:
        print(f"✗ {e}")
        sys.exit(1)
    print("=" * 60)
    if not result.passed:
        print(f"✗ {len(result.failures)} of {len(result.reports)} checks above {args.tolerance:g}")
        sys.exit(1)
    print(f"✓ All {len(result.reports)} checks within {args.tolerance:g}")


def cmd_predict(args):
    depth = pipeline.predict(args.checkpoint, raster_io.read_png(args.image))
    raster_io.write_pfm(args.out, depth)
    if args.png:
        raster_io.write_png(args.png, (depth - depth.min()) / max(float(np.ptp(depth)), 1e-12))
    print(f"✓ Depth written to {args.out} (range {depth.min():.2f} to {depth.max():.2f})")


def cmd_sweep(args):
    cfg = train_config_from_args(args)
    banner(f"Sweep over {args.param}")
    results = pipeline.sweep(cfg, args.dataset, args.param, args.values)
    print("\n" + "=" * 60)
    for value, report in results:
        print(f"{args.param} {value:<10g} {report.summary()}")
    low, high = pipeline.SWEEP_RANGES[args.param]
    print(f"Recommended {args.param} range: {low:g} to {high:g}")
    if args.json:
        Path(args.json).write_text(json.dumps(
            [{"value": value, **report.as_dict()} for value, report in results], indent=2))


def cmd_ablate(args):
    cfg = train_config_from_args(args)
    banner("Ablation")
    results = pipeline.ablate(cfg, args.dataset, args.seeds)
    print("\n" + "=" * 60)
    for row, reports in results.items():
        mean_abs_rel = float(np.mean([r.abs_rel for r in reports]))
        print(f"{row:<10} abs_rel {mean_abs_rel:.4f}")
    checks = pipeline.ablation_checks(results)
    for name, ok in checks.items():
        print(f"{'✓' if ok else '⚠️ '} {name}")
    if args.json:
        Path(args.json).write_text(json.dumps(
            {"rows": {row: [r.as_dict() for r in reports] for row, reports in results.items()},
             "checks": checks}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nightdepth", description=__doc__.strip().splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="render day and night triplets")
    synth.add_argument("--out", required=True, help="dataset directory")
    for f in fields(DatasetConfig):
        synth.add_argument(*_flag_names(f.name), dest=f.name, type=f.type, default=None)
    synth.add_argument("--no-progress", action="store_true")
    synth.set_defaults(func=cmd_synth)

    enhance = sub.add_parser("enhance", help="apply the shared brightness mapping to a snippet")
    enhance.add_argument("frames", nargs="+", help="PNG frames, target first")
    enhance.add_argument("--out", required=True)
    enhance.add_argument("--sigma", type=float, default=0.008)
    enhance.add_argument("--levels", type=int, default=mcie.LEVELS)
    enhance.add_argument("--histogram-source", choices=mcie.HISTOGRAM_SOURCES, default="snippet")
    enhance.set_defaults(func=cmd_enhance)

    mask = sub.add_parser("mask", help="render auto, statistics and combined masks for a frame pair")
    mask.add_argument("--checkpoint", required=True)
    mask.add_argument("--stats", required=True, help="stats.bin written by train")
    mask.add_argument("--target", required=True)
    mask.add_argument("--source", required=True)
    mask.add_argument("--out", required=True)
    mask.add_argument("--epsilon", type=float, default=None)
    mask.set_defaults(func=cmd_mask)

    train = sub.add_parser("train", help="train depth and pose networks")
    train.add_argument("--dataset", required=True)
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--split", default="night", choices=("day", "night"))
    add_train_config_args(train)
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="metrics of a checkpoint against ground truth")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--split", default="night", choices=("day", "night"))
    evaluate.add_argument("--max-depth", type=float, default=None)
    evaluate.add_argument("--min-depth", type=float, default=None)
    evaluate.add_argument("--no-median-scaling", action="store_true")
    evaluate.add_argument("--json", help="also write the report as JSON")
    evaluate.set_defaults(func=cmd_eval)

    gradcheck = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    gradcheck.add_argument("--only", nargs="*", default=None, help="case names")
    gradcheck.add_argument("--tolerance", type=float, default=gradcheck_sweep.TOLERANCE)
    gradcheck.set_defaults(func=cmd_gradcheck)

    predict = sub.add_parser("predict", help="depth for a single frame")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--image", required=True)
    predict.add_argument("--out", required=True, help="output PFM")
    predict.add_argument("--png", help="optional normalized depth preview")
    predict.set_defaults(func=cmd_predict)

    sweep = sub.add_parser("sweep", help="train once per sigma or epsilon value")
    sweep.add_argument("--dataset", required=True)
    sweep.add_argument("--param", required=True, choices=("sigma", "epsilon"))
    sweep.add_argument("--values", required=True, type=float, nargs="+")
    sweep.add_argument("--json")
    add_train_config_args(sweep)
    sweep.set_defaults(func=cmd_sweep)

    ablate = sub.add_parser("ablate", help="train every module combination over several seeds")
    ablate.add_argument("--dataset", required=True)
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ablate.add_argument("--json")
    add_train_config_args(ablate)
    ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None):
    """Parse arguments and run one subcommand."""
    # Load environment variables
    load_dotenv()

    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except HANDLED_ERRORS as e:
        print(f"✗ {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
