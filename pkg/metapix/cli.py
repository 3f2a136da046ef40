"""
Command-line entry point.

    python -m metapix <command> [--config FILE] [key.path=value ...]

Training commands create a timestamped run directory under ``METAPIX_RUN_ROOT``
holding the config echo, ``run.log``, ``metrics.jsonl``, checkpoints and
``summary.csv``.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from loguru import logger

from metapix.core.config import get_settings
from metapix.core.errors import EXIT_OK, EXIT_USAGE, ConfigError, GradcheckFailed, handle_exception
from metapix.core.logging import setup_logging
from metapix.autodiff import PRECISIONS, default_dtype, no_grad
from metapix.data import Dataset, generate
from metapix.eval import evaluate_split, export_weight_map, write_iou_csv
from metapix.gradcheck import run_gradcheck
from metapix.losses import one_hot
from metapix.meta import SWEEPS, Trainer, resume, run_ablation, run_schedule
from metapix.meta.schedule import resolve_data_dir
from metapix.nn import read_checkpoint, weight_forward
from metapix.runs import RunDirectory
from metapix.schemas import RunConfig, load_run_config
from metapix.schemas.dataset import SPLIT_DOMAINS

TRAINING_COMMANDS = {"pretrain": "pretrain", "metapix": "metapix", "target-only": "target_only"}


def _start_logging(args: argparse.Namespace, run: Optional[RunDirectory] = None) -> None:
    settings = get_settings()
    log_path = run.path if run is not None and settings.LOG_TO_FILE else None
    setup_logging(log_path=log_path, level=args.log_level or settings.LOG_LEVEL)


def _config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, args.overrides)


def _start_run(args: argparse.Namespace, command: str, config: RunConfig) -> RunDirectory:
    run = RunDirectory.create(command, config.run_root)
    _start_logging(args, run)
    run.write_config(config)
    logger.bind(payload=json.loads(config.echo())).info(f"{command}: configuration")
    return run


def _open_dataset(config: RunConfig) -> Dataset:
    return Dataset.open(resolve_data_dir(config), ignore_id=config.ignore_id)


def _load_trained(run: RunDirectory, checkpoint: Optional[Path]) -> Tuple[RunConfig, Dataset, Trainer]:
    config = run.read_config()
    path = Path(checkpoint) if checkpoint is not None else run.latest_checkpoint()
    tensors, meta = read_checkpoint(path)
    dataset = _open_dataset(config)
    trainer = Trainer(config, dataset, mode=meta["mode"], run=None)
    trainer.restore(tensors, meta)
    logger.info(f"Loaded {path} (step {trainer.step}, mode {trainer.mode})")
    return config, dataset, trainer


def cmd_generate_data(args: argparse.Namespace) -> int:
    _start_logging(args)
    config = _config(args)
    out_dir = Path(args.out) if args.out else resolve_data_dir(config)
    manifest = generate(config.dataset, out_dir)
    logger.info(f"Dataset written to {out_dir} ({len(manifest.entries)} samples)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    _start_logging(args)
    config = _config(args)
    run = _start_run(args, args.command, config)
    dataset = _open_dataset(config)
    trainer = run_schedule(config, dataset, mode=TRAINING_COMMANDS[args.command], run=run,
                           stop_after=args.stop_after)
    _report(trainer, run)
    return EXIT_OK


def cmd_resume(args: argparse.Namespace) -> int:
    run = RunDirectory.open(args.run)
    _start_logging(args, run)
    trainer = resume(run, stop_after=args.stop_after)
    _report(trainer, run)
    return EXIT_OK


def _report(trainer: Trainer, run: RunDirectory) -> None:
    if trainer.stopped:
        logger.info(f"Stopped at step {trainer.step}; continue with: resume --run {run.path}")
        return
    final = trainer.final_evaluation()
    logger.bind(payload={"per_class_iou": final.per_class_iou}).info(
        f"Finished {trainer.mode}: target mIoU {final.miou:.4f} ({run.path})"
    )


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = RunDirectory.open(args.run)
    _start_logging(args)
    config, dataset, trainer = _load_trained(run, args.checkpoint)
    with default_dtype(PRECISIONS[config.precision]):
        result = evaluate_split(trainer.seg, dataset, args.split, SPLIT_DOMAINS[args.split], config.ignore_id)
    out = Path(args.out) if args.out else run.path / f"eval_{args.split}.csv"
    write_iou_csv(out, result.per_class_iou, result.miou)
    logger.info(f"{args.split}: mIoU {result.miou:.4f} written to {out}")
    return EXIT_OK


def cmd_export_weights(args: argparse.Namespace) -> int:
    run = RunDirectory.open(args.run)
    _start_logging(args)
    config, dataset, trainer = _load_trained(run, args.checkpoint)
    out_dir = Path(args.out) if args.out else run.path / "weights" / args.split
    count = min(args.limit, dataset.size(args.split))
    with default_dtype(PRECISIONS[config.precision]):
        for index in range(count):
            batch = dataset.load_batch(args.split, [index])
            with no_grad():
                weights = weight_forward(trainer.wnet, batch.image,
                                         one_hot(batch.label, dataset.num_classes, config.ignore_id))
            export_weight_map(weights, out_dir / f"{index:04d}.png", label=batch.label)
    logger.info(f"Exported {count} weight map(s) to {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    _start_logging(args)
    config = _config(args)
    run = _start_run(args, "gradcheck", config)
    summary = run_gradcheck(config.gradcheck)
    report = run.path / "gradcheck.json"
    report.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    if not summary.passed:
        failed = [f"{r.name}@{r.seed}" for r in summary.reports if not r.passed]
        raise GradcheckFailed(f"{len(failed)} gradient check(s) failed; see {report}", details={"failed": failed})
    logger.info(f"Gradient checks passed; report at {report}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    _start_logging(args)
    config = _config(args)
    run = _start_run(args, f"ablate-{args.sweep}", config)
    results = run_ablation(config, _open_dataset(config), args.sweep, run)
    for result in results:
        logger.info(f"{result.variant}: mIoU {result.miou:.4f}")
    return EXIT_OK


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON or YAML run configuration")
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted overrides, e.g. schedule.N2=600 network.weight_mode=per_class")


def _add_run_args(parser: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    parser.add_argument("--run", type=Path, required=True, help="run directory")
    if checkpoint:
        parser.add_argument("--checkpoint", type=Path, default=None, help="defaults to the latest checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metapix",
        description="Meta-learned pixel weighting for cross-domain segmentation.",
    )
    parser.add_argument("--log-level", default=None, help="overrides METAPIX_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", metavar="command", required=True)

    sub = commands.add_parser("generate-data", help="render the synthetic two-domain dataset")
    _add_config_args(sub)
    sub.add_argument("--out", type=Path, default=None, help="defaults to data_dir or METAPIX_DATA_ROOT")
    sub.set_defaults(func=cmd_generate_data)

    descriptions = {
        "pretrain": "joint source + target training",
        "metapix": "pretraining followed by alternating meta and weighted generations",
        "target-only": "training on the target set alone",
    }
    for name, text in descriptions.items():
        sub = commands.add_parser(name, help=text)
        _add_config_args(sub)
        sub.add_argument("--stop-after", type=int, default=None, help="halt (with a checkpoint) after N steps")
        sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("resume", help="continue a run from its latest checkpoint")
    _add_run_args(sub, checkpoint=False)
    sub.add_argument("--stop-after", type=int, default=None)
    sub.set_defaults(func=cmd_resume)

    sub = commands.add_parser("evaluate", help="per-class IoU of a checkpoint on a split")
    _add_run_args(sub)
    sub.add_argument("--split", choices=sorted(SPLIT_DOMAINS), default="target_val")
    sub.add_argument("--out", type=Path, default=None, help="CSV path (default <run>/eval_<split>.csv)")
    sub.set_defaults(func=cmd_evaluate)

    sub = commands.add_parser("export-weights", help="write weight maps of a checkpoint as PNGs")
    _add_run_args(sub)
    sub.add_argument("--split", choices=sorted(SPLIT_DOMAINS), default="source")
    sub.add_argument("--limit", type=int, default=16)
    sub.add_argument("--out", type=Path, default=None)
    sub.set_defaults(func=cmd_export_weights)

    sub = commands.add_parser("gradcheck", help="finite-difference certification of all gradients")
    _add_config_args(sub)
    sub.set_defaults(func=cmd_gradcheck)

    sub = commands.add_parser("ablate", help="split-point or weight-mode sweep")
    _add_config_args(sub)
    sub.add_argument("--sweep", choices=SWEEPS, required=True)
    sub.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exit_:
        # argparse has already printed usage or help
        return EXIT_OK if exit_.code in (0, None) else EXIT_USAGE
    if getattr(args, "stop_after", None) is not None and args.stop_after < 0:
        return handle_exception(ConfigError("--stop-after must be non-negative", details={"stop_after": args.stop_after}))
    try:
        return args.func(args)
    except (Exception, KeyboardInterrupt) as error:
        return handle_exception(error)


def run(argv: Optional[List[str]] = None) -> None:
    sys.exit(main(argv))
