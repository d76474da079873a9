"""
Command-line surface: python -m src.cli <command> [flags]

Every command exits 0 on success. Failures print one line
`error: <ErrorClass>: <message>` to stderr and exit 1; argparse usage errors
exit 2.
"""
import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.core.config import RunConfig, apply_overrides, load_run_config
from src.core.synth_data import generate_dataset
from src.core.tensor import UsageError
from src.utils.logging import audit_logger, logger

DEFAULT_PRESET = "desk"


class GradCheckFailed(Exception):
    pass


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_PRESET, help="Preset name in configs/ or path to a JSON run file")
    common.add_argument("--seed", type=int, help="Training seed (model init and batch order)")
    common.add_argument("--neck-window", type=int, help="Neck attention window size")
    common.add_argument("--epochs", type=int, help="Base-phase epochs")
    common.add_argument("--out", help="Run output directory")
    common.add_argument("--checkpoint", help="Checkpoint to resume from or evaluate")
    common.add_argument("--hard-negative-rate", type=float, help="Per-batch hard-negative fraction (enables the phase)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="birdswin", description="Small-bird detector with a shifted-window neck")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate synthetic datasets")
    synth.add_argument("--split", choices=["train", "val", "clutter", "all"], default="all")
    synth.add_argument("--clutter-only", action="store_true", help="Only the bird-free clutter split")
    synth.add_argument("--n-images", type=int, help="Override the split's image count")
    synth.add_argument("--data-dir", help="Override the split's output directory")

    sub.add_parser("train", parents=[common], help="Train (resumes when --checkpoint is given)")

    mine = sub.add_parser("mine-hn", parents=[common], help="Mine hard negatives into a split's manifest")
    mine.add_argument("--split-dir", help="Split to mine (default: training split)")

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("--split-dir", help="Split to evaluate (default: validation split)")

    ablate = sub.add_parser("ablate", parents=[common], help="Neck window-size ablation")
    ablate.add_argument("--sizes", type=int, nargs="+", default=[2, 3, 5])

    grad = sub.add_parser("grad-check", parents=[common], help="Finite-difference gradient suite")
    grad.add_argument("--only", help="Run only checks whose name contains this string")
    grad.add_argument("--skip-model", action="store_true", help="Skip the end-to-end model check")

    plot = sub.add_parser("plot", parents=[common], help="Loss curves and ablation chart")
    plot.add_argument("--run-dir", help="Run directory holding metrics.jsonl (default: --out)")
    plot.add_argument("--ablation-csv", help="Ablation CSV (default: <run-dir>/ablation/ablation.csv)")

    predict = sub.add_parser("predict", parents=[common], help="Write detections as JSON lines")
    predict.add_argument("--split-dir", help="Split to run on (default: validation split)")
    predict.add_argument("--output", help="Output JSONL (default: <out>/predictions.jsonl)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides.setdefault("train", {})["seed"] = args.seed
    if args.epochs is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    if args.out is not None:
        overrides.setdefault("train", {})["out_dir"] = args.out
    if args.neck_window is not None:
        overrides.setdefault("model", {}).setdefault("neck", {})["window"] = args.neck_window
    if args.hard_negative_rate is not None:
        overrides["hard_negative"] = {"rate": args.hard_negative_rate, "enabled": True}
    return apply_overrides(cfg, overrides) if overrides else cfg


def _checkpoint(args: argparse.Namespace, cfg: RunConfig) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.train.out_dir) / "model.ckpt"
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path} (train first or pass --checkpoint)")
    return path


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> None:
    splits = {
        "train": (cfg.data.train_dir, cfg.data.n_train),
        "val": (cfg.data.val_dir, cfg.data.n_val),
        "clutter": (cfg.data.clutter_dir, cfg.data.n_clutter),
    }
    selected = ["clutter"] if args.clutter_only else (list(splits) if args.split == "all" else [args.split])
    if args.data_dir and len(selected) > 1:
        raise UsageError("--data-dir needs a single --split")
    for split in selected:
        out_dir, n_images = splits[split]
        manifest = generate_dataset(cfg.data.scene, args.n_images or n_images, args.data_dir or out_dir, split=split)
        _emit({"split": split, "dir": str(args.data_dir or out_dir), "images": len(manifest.images),
               "birds": len(manifest.annotations)})


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> None:
    from src.core.trainer import train

    result = train(cfg, resume_from=args.checkpoint)
    payload = {"checkpoint": str(result.checkpoint), "metrics": str(result.metrics_path)}
    if result.report is not None:
        payload.update(result.report.summary())
    _emit(payload)


def cmd_mine(args: argparse.Namespace, cfg: RunConfig) -> None:
    from src.core.trainer import mine

    if not args.checkpoint:
        raise UsageError("mine-hn needs --checkpoint")
    mined = mine(_checkpoint(args, cfg), args.split_dir or cfg.data.train_dir, cfg)
    _emit({"hard_negatives": len(mined.hard_negatives),
           "images": len({h.image_id for h in mined.hard_negatives})})


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> None:
    from src.core.trainer import evaluate

    report = evaluate(_checkpoint(args, cfg), args.split_dir or cfg.data.val_dir, cfg, out_dir=cfg.train.out_dir)
    _emit({**report.summary(), "n_images": report.n_images, "n_gt": report.n_gt})


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig) -> None:
    from src.core.trainer import ablate_window

    for row in ablate_window(cfg, sizes=args.sizes):
        _emit(row.model_dump())


def cmd_grad_check(args: argparse.Namespace, cfg: RunConfig) -> None:
    from src.core.gradcheck_suite import run_suite

    results = run_suite(seed=cfg.train.seed, include_model=not args.skip_model, only=args.only)
    failed = [r.name for r in results if not r.passed]
    for r in results:
        _emit({"check": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance, "passed": r.passed})
    if failed:
        raise GradCheckFailed(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")


def cmd_plot(args: argparse.Namespace, cfg: RunConfig) -> None:
    from src.core.plots import render_all

    written = render_all(args.run_dir or cfg.train.out_dir, args.ablation_csv)
    _emit({"written": [str(p) for p in written]})


def cmd_predict(args: argparse.Namespace, cfg: RunConfig) -> None:
    from src.core.trainer import predict

    output = Path(args.output) if args.output else Path(cfg.train.out_dir) / "predictions.jsonl"
    dets = predict(_checkpoint(args, cfg), args.split_dir or cfg.data.val_dir, cfg, output)
    _emit({"output": str(output), "images": len(dets), "detections": sum(len(d) for d in dets.values())})


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "mine-hn": cmd_mine,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "plot": cmd_plot,
    "predict": cmd_predict,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    start = time.time()
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except Exception as e:
        message = " ".join(str(e).split())
        audit_logger.log_operation(
            operation=args.command, endpoint="cli", parameters=vars(args), success=False,
            execution_time_ms=(time.time() - start) * 1000, result_summary={}, error_message=message,
        )
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    audit_logger.log_operation(
        operation=args.command, endpoint="cli", parameters=vars(args), success=True,
        execution_time_ms=(time.time() - start) * 1000, result_summary={},
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
