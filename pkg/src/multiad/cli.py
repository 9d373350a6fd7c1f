"""Command-line entry point.

Every subcommand prints one JSON summary line on stdout and exits 0; any failure
prints ``{"error": <kind>, "message": <text>}`` as a single line on stderr and exits
with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, PipelineConfig
from .data import DatasetError, generate_synthetic_dataset, load_dataset_dir, load_image, write_dataset_dir
from .evaluate import evaluate, infer, write_report
from .gradsuite import CHECKS, TOLERANCE, run_check
from .imageio import ImageFormatError
from .train import TrainingError, train

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4
EXIT_GRADCHECK = 5


class CommandError(RuntimeError):
    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def cmd_gen_data(args: argparse.Namespace) -> dict:
    splits = generate_synthetic_dataset(
        args.seed, args.n_normal, args.n_anomalous, args.size, n_test_normal=args.n_test_normal
    )
    write_dataset_dir(splits, args.out)
    return {
        "out": str(args.out),
        "train": len(splits.train),
        "test_normal": sum(s.label == 0 for s in splits.eval),
        "test_anomalous": sum(s.label == 1 for s in splits.eval),
    }


def _load_config(path: Path | None) -> PipelineConfig:
    return PipelineConfig() if path is None else PipelineConfig.load(path)


def cmd_train(args: argparse.Namespace) -> dict:
    config = _load_config(args.config)
    if args.teacher_pretext:
        config = config.replace(teacher_mode="pretext")
    if args.epochs is not None:
        config = config.replace(epochs=args.epochs)
    splits = load_dataset_dir(args.data, config.input_extent, config.backbone.in_channels)
    resume = load_checkpoint(args.resume) if args.resume else None
    started = time.perf_counter()
    ckpt = train(config, splits.train, resume=resume, max_steps=args.max_steps)
    save_checkpoint(ckpt, args.out)
    last = ckpt.history[-1] if ckpt.history else {}
    return {
        "out": str(args.out),
        "steps": ckpt.step,
        "teacher_mode": ckpt.teacher_mode,
        "calibrated": ckpt.model.refinement is not None,
        "last": last,
        "seconds": round(time.perf_counter() - started, 2),
    }


def cmd_eval(args: argparse.Namespace) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    splits = load_dataset_dir(args.data, cfg.input_extent, cfg.backbone.in_channels)
    report = evaluate(ckpt, splits.eval, heatmap_dir=args.heatmaps)
    write_report(report, args.report, ckpt)
    return {
        "report": str(args.report),
        "image_auroc": report.image_auroc,
        "pixel_auroc": report.pixel_auroc,
        "n_normal": report.n_normal,
        "n_anomalous": report.n_anomalous,
    }


def cmd_infer(args: argparse.Namespace) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    image = load_image(args.image, cfg.input_extent)
    if image.shape[0] != cfg.backbone.in_channels:
        raise DatasetError(f"{args.image}: has {image.shape[0]} channels, model expects {cfg.backbone.in_channels}")
    result, norm = infer(ckpt, image, heatmap=args.heatmap)
    return {"image": str(args.image), "heatmap": str(args.heatmap), "score": result.score, **norm}


def cmd_gradcheck(args: argparse.Namespace) -> dict:
    names = [args.op] if args.op else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise CommandError("usage", f"unknown op {unknown[0]!r}; choose from {', '.join(CHECKS)}", EXIT_USAGE)
    ops = {}
    for name in names:
        res = run_check(name, args.instances, args.seed)
        ops[name] = {"worst": res.worst, "instances": len(res.errors), "skipped": res.skipped, "passed": res.passed}
    failed = [n for n, r in ops.items() if not r["passed"]]
    if failed:
        raise CommandError(
            "gradcheck",
            f"{len(failed)} op(s) exceed relative error {TOLERANCE}: "
            + ", ".join(f"{n}={ops[n]['worst']:.3g}" for n in failed),
            EXIT_GRADCHECK,
        )
    return {"tolerance": TOLERANCE, "ops": ops}


class _Parser(argparse.ArgumentParser):
    """Raises instead of printing usage, so errors stay one line."""

    def error(self, message: str):
        raise CommandError("usage", message, EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multiad", description="Teacher-student anomaly detection with adversarial distillation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a seeded synthetic texture dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-normal", type=int, default=200)
    p.add_argument("--n-anomalous", type=int, default=50)
    p.add_argument("--n-test-normal", type=int, default=None, help="defaults to --n-anomalous")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="distill a student against the frozen teacher")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None, help="JSON config (defaults when omitted)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--teacher-pretext", action="store_true", help="pre-train the teacher on rotation prediction")
    p.add_argument("--epochs", type=int, default=None, help="override the config's epoch count")
    p.add_argument("--resume", type=Path, default=None, help="continue from this checkpoint")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="image and pixel AUROC on the test split")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--heatmaps", type=Path, default=None, help="directory for per-image heatmaps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score one image and write its heatmap")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--heatmap", type=Path, required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", default=None, help=f"one of: {', '.join(CHECKS)}")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": " ".join(str(message).split())})


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CommandError as exc:
        print(_error_line(exc.kind, str(exc)), file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _emit(args.func(args))
    except CommandError as exc:
        print(_error_line(exc.kind, str(exc)), file=sys.stderr)
        return exc.code
    except (CheckpointError, ConfigError, DatasetError, ImageFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, ValueError, RuntimeError) as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
