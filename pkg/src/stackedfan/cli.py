"""Command-line entry point: ``stackedfan {synth,train,predict,eval,plot-ced}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_run_config
from .dataio import DataError, Sample, load_checkpoint, load_manifest, load_scheme, save_checkpoint, save_manifest
from .heatmap import LandmarkSet
from .inference import predict_landmarks
from .metrics import DEFAULT_CUTOFF, SchemeMap, UndefinedMetric, common_subset, evaluate
from .nn import ConfigError, DepthNetConfig, FanConfig
from .plotting import write_ced_svg, write_report_figures
from .synth import synth_generate
from .tensor import ShapeError
from .training import train, train_depth, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

logger = logging.getLogger("stackedfan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing_file(value: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {value}")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stackedfan", description="Stacked-hourglass facial landmark toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic face corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--asymmetry", type=float, default=0.0, help="droop strength in [0, 1]")
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="train the landmark network (and optionally the depth net)")
    p.add_argument("manifest", type=_existing_file)
    p.add_argument("--config", default="overfit", help="built-in name or JSON path")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--steps", type=int, default=None, help="overrides train.max_steps")
    p.add_argument("--depth", action="store_true", help="also train the depth net")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("predict", help="predict landmarks for a manifest")
    p.add_argument("manifest", type=_existing_file)
    p.add_argument("--model", type=_existing_file, required=True, help="landmark network checkpoint")
    p.add_argument(
        "--depth",
        nargs="?",
        const="",
        default=None,
        help="run the depth net; optional checkpoint path (default: depth.gsckpt beside --model)",
    )
    p.add_argument("--out", type=Path, required=True, help="prediction manifest to write")

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("predictions", type=_existing_file)
    p.add_argument("ground_truth", type=_existing_file)
    p.add_argument("--ced-cutoff", type=float, default=DEFAULT_CUTOFF)
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = sub.add_parser("plot-ced", help="draw CED curves from ced.csv files as SVG")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--labels", nargs="+", default=None)
    p.add_argument("--ced-cutoff", type=float, default=None, help="x-axis limit")
    p.add_argument("--out", type=Path, required=True, help="SVG file to write")
    return parser


# -- subcommands ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if not 0.0 <= args.asymmetry <= 1.0:
        raise UsageError("--asymmetry must lie in [0, 1]")
    synth_generate(args.count, tuple(args.size), args.asymmetry, args.seed, args.out)
    print(args.out / "manifest.jsonl")


def cmd_train(args) -> None:
    run = load_run_config(args.config)
    seed = run.seed if args.seed is None else args.seed
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be at least 1")
        run.train.max_steps = args.steps
    samples = load_manifest(args.manifest)
    scheme = samples[0].landmarks.scheme if samples else ""
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = run.to_dict()
    cfg["seed"] = seed
    (args.out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")

    ckpt_dir = args.out / "checkpoints" if run.train.checkpoint_every else None
    result = train(run.model, samples, run.train, run.augment, seed, gaussian=run.gaussian, checkpoint_dir=ckpt_dir)
    save_checkpoint(result.params, run.model, args.out / "fan.gsckpt", scheme, len(result.epoch_losses))
    write_loss_csv(result.log, args.out / "loss.csv")
    print(args.out / "fan.gsckpt")
    if args.depth:
        result = train_depth(
            run.depth_model, samples, run.depth_train, run.augment, run.model.heatmap_hw, seed, gaussian=run.gaussian
        )
        save_checkpoint(result.params, run.depth_model, args.out / "depth.gsckpt", scheme, len(result.epoch_losses))
        write_loss_csv(result.log, args.out / "depth_loss.csv")
        print(args.out / "depth.gsckpt")


def cmd_predict(args) -> None:
    params, meta = load_checkpoint(args.model)
    if not isinstance(meta.config, FanConfig):
        raise DataError(f"{args.model}: not a landmark network checkpoint")
    depth = None
    if args.depth is not None:
        depth_path = Path(args.depth) if args.depth else args.model.with_name("depth.gsckpt")
        if not depth_path.is_file():
            raise DataError(f"depth checkpoint {depth_path} does not exist")
        depth_params, depth_meta = load_checkpoint(depth_path)
        if not isinstance(depth_meta.config, DepthNetConfig):
            raise DataError(f"{depth_path}: not a depth net checkpoint")
        depth = (depth_params, depth_meta.config)
    samples = load_manifest(args.manifest)
    for s in samples:
        if s.landmarks.m != meta.config.m_landmarks:
            raise DataError(f"{s.image_path}: scheme has {s.landmarks.m} landmarks, model predicts {meta.config.m_landmarks}")
    images = [s.load_image() for s in samples]
    scheme = meta.scheme or (samples[0].landmarks.scheme if samples else "")
    preds = predict_landmarks(params, meta.config, images, scheme, depth)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest([Sample(s.image_path, p, s.bbox) for s, p in zip(samples, preds)], args.out)
    print(args.out)


def _align(preds: list[Sample], gts: list[Sample]) -> tuple[list[LandmarkSet], list[LandmarkSet], list[str] | None]:
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions for {len(gts)} ground-truth records")
    for k, (p, g) in enumerate(zip(preds, gts)):
        if Path(p.image_path).resolve() != Path(g.image_path).resolve():
            raise DataError(f"record {k + 1}: prediction image {p.image_path} does not match {g.image_path}")
    pa, ga = [p.landmarks for p in preds], [g.landmarks for g in gts]
    gt_scheme, pred_scheme = ga[0].scheme, pa[0].scheme
    names = load_scheme(gt_scheme).names if gt_scheme else None
    if pred_scheme and gt_scheme and pred_scheme != gt_scheme:
        mapping = SchemeMap.from_schemes(pred_scheme, gt_scheme)
        pairs = [common_subset(mapping, p, g) for p, g in zip(pa, ga)]
        pa, ga = [p for p, _ in pairs], [g for _, g in pairs]
        names = [names[j] for _, j in mapping.pairs] if names else None
    return pa, ga, names


def cmd_eval(args) -> None:
    if not 0.0 < args.ced_cutoff <= 1.0:
        raise UsageError("--ced-cutoff must lie in (0, 1]")
    preds = load_manifest(args.predictions, check_images=False)
    gts = load_manifest(args.ground_truth, check_images=False)
    if not gts:
        raise DataError(f"{args.ground_truth}: no records")
    pa, ga, names = _align(preds, gts)
    report = evaluate(pa, ga, cutoff=args.ced_cutoff)
    report.landmark_names = names
    report.write(args.out)
    if not args.no_figures:
        write_report_figures(report, args.out)
    print(f"mean NME {report.mean_nme:.6f}  AUC@{args.ced_cutoff:g} {report.auc:.6f}")


def cmd_plot_ced(args) -> None:
    if args.labels is not None and len(args.labels) != len(args.csv):
        raise UsageError(f"{len(args.labels)} labels given for {len(args.csv)} CSV files")
    if args.ced_cutoff is not None and args.ced_cutoff <= 0:
        raise UsageError("--ced-cutoff must be positive")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_ced_svg(args.csv, args.out, args.labels, args.ced_cutoff)
    print(args.out)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "plot-ced": cmd_plot_ced,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"stackedfan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, UndefinedMetric, ShapeError, OSError, ValueError) as exc:
        print(f"stackedfan {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
