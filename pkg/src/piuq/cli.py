"""Command-line entry point: ``piuq <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (DataError, DomainImage, DomainTag, ValueRange, export_dataset, load_image_directory,
                   load_manifest, make_synthetic_dataset, save_image_directory, to_raw_range, write_tensor_file)
from .evaluation import DEFAULT_SCENARIOS, Scenario, evaluate, predict, uncertainty_correlation
from .losses import Mode
from .training import CheckpointError, TrainRunConfig, grid_search_lambda, load_generator, read_checkpoint, train

OUTPUT_ROOT_ENV = "PIUQ_OUTPUT_ROOT"
log = logging.getLogger("piuq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="piuq", description=__doc__.splitlines()[0])
    parser.commands = {}
    parser.add_argument("--version", action="version", version=f"piuq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        parser.commands[name] = p
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/{name})")
        return p

    p = add("make-data", "write a synthetic phantom dataset and its manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=256, help="images per domain")
    p.add_argument("--eval-count", type=int, default=None)
    p.add_argument("--d", type=int, default=64)

    for name, help_ in (("train", "train a model"), ("grid-lambda", "grid search over the patch weight")):
        p = add(name, help_)
        p.add_argument("--config", help="run config file (YAML)")
        p.add_argument("--dataset", help="dataset manifest (overrides the config)")
        p.add_argument("--mode", choices=[m.value for m in Mode])
        p.add_argument("--lambda", dest="patch_weight", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int, help="total generator updates")
        if name == "grid-lambda":
            p.add_argument("--grid", required=True, help="comma-separated weights, e.g. 0,1,10")
            p.add_argument("--fraction", type=float, default=0.1, help="run length per candidate")

    for name, help_ in (("evaluate", "SSIM/PSNR under perturbation scenarios"),
                        ("uq-report", "residual versus scale-map correlation")):
        p = add(name, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="manifest with evaluation pairs (default: from the checkpoint)")
        p.add_argument("--seed", type=int, default=0)
        if name == "evaluate":
            p.add_argument("--scenarios", default=",".join(DEFAULT_SCENARIOS))
        else:
            p.add_argument("--samples", type=int, default=512)

    p = add("predict", "transfer a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="directory of 8-bit images")
    return parser


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(out: Path, effective: dict):
    (out / "effective_config.yaml").write_text(yaml.safe_dump(effective, sort_keys=True))
    (out / "VERSION").write_text(f"piuq {__version__}\n")


def _train_config(args) -> TrainRunConfig:
    raw = {}
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        raw = yaml.safe_load(path.read_text()) or {}
        base = path.parent
    for key in ("mode", "patch_weight", "seed"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if args.steps is not None:
        raw["generator_updates_total"] = args.steps
    if args.dataset:
        raw["dataset"] = str(Path(args.dataset).resolve())
    elif raw.get("dataset"):
        raw["dataset"] = str((base / raw["dataset"]).resolve())
    cfg = TrainRunConfig.from_dict(raw)
    if not cfg.dataset:
        raise UsageError("no dataset manifest given (use --dataset or the config's 'dataset' key)")
    return cfg


def _eval_pairs(args):
    manifest = args.dataset or read_checkpoint(args.checkpoint)["config"].get("dataset")
    if not manifest:
        raise UsageError("no dataset manifest given and none recorded in the checkpoint")
    data = load_manifest(manifest)
    if not data.eval_pairs:
        raise DataError(f"{manifest}: no ground-truth evaluation pairs")
    return data.eval_pairs


def _cmd_make_data(args, out):
    data = make_synthetic_dataset(args.seed, args.count, args.d, args.eval_count)
    manifest = export_dataset(data, out)
    _stamp(out, {"seed": args.seed, "count": args.count, "d": args.d, "eval_count": args.eval_count})
    print(manifest)


def _cmd_train(args, out):
    cfg = _train_config(args)
    _stamp(out, cfg.to_dict())
    train(cfg, load_manifest(cfg.dataset), out, progress_every=100)
    print(out / "checkpoint-final.pt")


def _cmd_grid(args, out):
    cfg = _train_config(args)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--grid must be comma-separated numbers, got {args.grid!r}") from None
    if not grid:
        raise UsageError("--grid is empty")
    _stamp(out, {**cfg.to_dict(), "grid": grid, "fraction": args.fraction})
    result = grid_search_lambda(cfg, load_manifest(cfg.dataset), grid, args.fraction, out)
    lines = ["lambda,ssim,psnr"] + [f"{r.weight:g},{r.ssim:.6f},{r.psnr:.6f}" for r in result.rows]
    (out / "grid.csv").write_text("\n".join(lines) + "\n")
    note = " (pure adversarial training)" if result.pure_adversarial else ""
    (out / "recommendation.txt").write_text(f"lambda={result.recommended:g}{note}\n")
    print("\n".join(lines))
    print(f"recommended lambda={result.recommended:g}{note}")


def _cmd_evaluate(args, out):
    try:
        scenarios = [Scenario.parse(s, args.seed) for s in args.scenarios.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    generator, mode = load_generator(args.checkpoint)
    pairs = _eval_pairs(args)
    _stamp(out, {"checkpoint": str(Path(args.checkpoint).resolve()), "scenarios": args.scenarios,
                 "seed": args.seed, "dataset": args.dataset})
    report = evaluate(generator, pairs, scenarios, mode=mode, seed=args.seed)
    report.write(out)
    print(report.to_text(), end="")


def _cmd_uq(args, out):
    generator, mode = load_generator(args.checkpoint)
    if mode is not Mode.UAPI:
        raise DataError("uq-report needs a UAPI checkpoint; PI models have no trained scale head")
    pairs = _eval_pairs(args)
    _stamp(out, {"checkpoint": str(Path(args.checkpoint).resolve()), "samples": args.samples,
                 "seed": args.seed, "dataset": args.dataset})
    stats = uncertainty_correlation(generator, pairs, mode, args.samples, args.seed)
    stats.write_scatter(out / "uncertainty_scatter.csv")
    flag = " (degenerate)" if stats.degenerate else ""
    text = f"images: {len(stats.image_ids)}\npcc: {stats.pcc:.6f}{flag}\n"
    (out / "uq_report.txt").write_text(text)
    print(text, end="")


def _cmd_predict(args, out):
    generator, mode = load_generator(args.checkpoint)
    images = load_image_directory(args.input, DomainTag.INPUT)
    _stamp(out, {"checkpoint": str(Path(args.checkpoint).resolve()), "input": str(Path(args.input).resolve())})
    raw = np.stack([to_raw_range(i.pixels) for i in images])
    pred, scale = predict(generator, raw)
    save_image_directory(
        [DomainImage(p, ValueRange.RAW, DomainTag.TARGET, i.source_id) for p, i in zip(pred, images)],
        out / "images")
    if mode is Mode.UAPI:
        write_tensor_file(out / "scale_maps.bin", scale)
        lo, hi = scale.min(axis=(1, 2, 3), keepdims=True), scale.max(axis=(1, 2, 3), keepdims=True)
        vis = 255.0 * (scale - lo) / np.where(hi > lo, hi - lo, 1.0)
        save_image_directory(
            [DomainImage(v, ValueRange.RAW, DomainTag.TARGET, i.source_id) for v, i in zip(vis, images)],
            out / "scale_maps")
    print(out)


COMMANDS = {"make-data": _cmd_make_data, "train": _cmd_train, "grid-lambda": _cmd_grid,
            "evaluate": _cmd_evaluate, "uq-report": _cmd_uq, "predict": _cmd_predict}


def run(argv=None) -> int:
    try:
        parser = _build_parser()
        args, extra = parser.parse_known_args(argv)
        if extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}\n\n"
                             f"{parser.commands[args.command].format_help()}")
        out = _out_dir(args)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (DataError, CheckpointError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
