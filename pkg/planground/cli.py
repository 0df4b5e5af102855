"""Command-line entry point.

Subcommands::

    planground gen-data  --seed 0 --grid 4 --objects 4-8 --count 2500 --out DIR
    planground train     --data DIR [--config FILE] [--ablation full] [--checkpoint PATH]
    planground eval      --checkpoint PATH --data DIR [--split val] [--per-instance]
    planground trace     --checkpoint PATH --instance FILE[:INDEX] --out DIR
    planground ablate    --data DIR [--seeds 0,1,2,3,4]

Machine-readable results go to stdout (or ``--out``) as JSON lines; logs go
to stderr.  Exit status is 0 on success, 1 when the operation fails and 2
for usage errors.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import IO, Any, Iterator, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .constants import ABLATIONS, GRID_SIDE, KINDS, MAX_OBJECTS, MIN_OBJECTS, TRACE_IMAGE_SCALE
from .dataset import Dataset, generate_splits, load_dataset
from .exceptions import ConfigError, DimensionMismatchError, PlanError
from .model import score_instance
from .params import EVAL
from .shapeworld import GenerationConfig, SceneConfig
from .trace import write_trace
from .trainer import TrainConfig, config_hash, evaluate, format_record, load_config, train, write_metrics
from .utils import default_data_dir, resolve_output, run_name

logger = logging.getLogger(__name__)


# ─── Argument helpers ────────────────────────────────────────────────────────


def _object_range(text: str) -> tuple[int, int]:
    """``"4-8"`` → ``(4, 8)``; ``"8"`` → ``(8, 8)``."""
    try:
        if "-" in text:
            low, high = (int(v) for v in text.split("-", 1))
        else:
            low = high = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or MIN-MAX, got {text!r}") from None
    return low, high


def _kinds(text: str) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in text.split(",") if k.strip())
    unknown = [k for k in kinds if k not in KINDS]
    if not kinds or unknown:
        raise argparse.ArgumentTypeError(f"kinds must be a comma list of {', '.join(KINDS)}")
    return kinds


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return value


def _add_training_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--hidden", type=int, dest="hidden_size", help="hidden size H")
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float, dest="learning_rate")
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--dtype", choices=("float32", "float64"))
    parser.add_argument(
        "--no-category", action="store_const", const=False, dest="use_category",
        help="drop the object-category block from proposal features",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planground",
        description="Parallel-attention referring-expression grounding on synthetic scenes.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate train/val/test shape-world datasets")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--grid", type=int, default=GRID_SIDE, help="grid side g")
    gen.add_argument(
        "--objects", type=_object_range, default=(MIN_OBJECTS, MAX_OBJECTS),
        help="objects per scene, N or MIN-MAX",
    )
    gen.add_argument("--count", type=_non_negative, default=1000, help="total instances over all splits")
    gen.add_argument("--kind", type=_kinds, default=("sentence", "dialog"), help="comma list of kinds")
    gen.add_argument("--dialog-rounds", type=int, help="force every dialog to this many rounds")
    gen.add_argument("--no-location", action="store_true", help="no absolute location words")
    gen.add_argument("--out", type=Path, help="output directory")

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", type=Path, help="directory with train.jsonl and val.jsonl")
    tr.add_argument("--ablation", choices=ABLATIONS)
    tr.add_argument("--checkpoint", type=Path, help="where to keep the best-val checkpoint")
    tr.add_argument("--out", type=Path, help="metrics file (default stdout)")
    _add_training_overrides(tr)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True, help="dataset file or directory")
    ev.add_argument("--split", default="val", choices=("train", "val", "test"))
    ev.add_argument("--ablation", choices=ABLATIONS, help="default: the checkpoint's configuration")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument(
        "--per-instance", action="store_true", help="also write each instance's proposal probabilities"
    )
    ev.add_argument("--out", type=Path)

    trc = sub.add_parser("trace", help="export step-wise attention for one instance")
    trc.add_argument("--checkpoint", type=Path, required=True)
    trc.add_argument("--instance", required=True, help="dataset FILE[:INDEX]")
    trc.add_argument("--ablation", choices=ABLATIONS, help="default: the checkpoint's configuration")
    trc.add_argument("--out", type=Path, help="output directory")
    trc.add_argument("--scale", type=int, default=TRACE_IMAGE_SCALE, help="pixels per grid cell")

    ab = sub.add_parser("ablate", help="train and compare every ablation over several seeds")
    ab.add_argument("--data", type=Path, help="directory with train.jsonl and val.jsonl")
    ab.add_argument("--seeds", type=_seeds, default=(0, 1, 2, 3, 4))
    ab.add_argument("--tolerance", type=float, default=0.005, help="allowed ordering gap")
    ab.add_argument("--checkpoints", type=Path, help="checkpoint directory")
    ab.add_argument("--out", type=Path)
    _add_training_overrides(ab)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


@contextlib.contextmanager
def _output(path: Optional[Path]) -> Iterator[IO[str]]:
    if path is None:
        yield sys.stdout
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        yield fh


def _split_path(data: Path, split: str) -> Path:
    return data / f"{split}.jsonl" if data.is_dir() else data


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    keys = ("seed", "epochs", "hidden_size", "batch_size", "learning_rate", "dropout", "dtype", "use_category")
    values = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "ablation", None) is not None:
        values["ablation"] = args.ablation
    data = getattr(args, "data", None)
    if data is not None:
        values["train_path"] = str(_split_path(data, "train"))
        values["val_path"] = str(_split_path(data, "val"))
    return values


def _datasets(config: TrainConfig) -> tuple[Dataset, Optional[Dataset]]:
    if config.train_path is None:
        raise ConfigError("no training data; pass --data or set train_path in the config")
    train_set = load_dataset(config.train_path)
    val_set = load_dataset(config.val_path) if config.val_path and Path(config.val_path).exists() else None
    return train_set, val_set


def _parse_instance_ref(ref: str) -> tuple[Path, int]:
    path, sep, index = ref.rpartition(":")
    if sep and index.isdigit() and path:
        return Path(path), int(index)
    return Path(ref), 0


# ─── Commands ────────────────────────────────────────────────────────────────


def cmd_gen_data(args: argparse.Namespace) -> int:
    low, high = args.objects
    config = GenerationConfig(
        scene=SceneConfig(grid_side=args.grid, min_objects=low, max_objects=high),
        kinds=args.kind,
        location_words=not args.no_location,
        dialog_rounds=args.dialog_rounds,
    )
    out_dir = resolve_output(args.out, "data")
    written = generate_splits(args.seed, args.count, out_dir, config, progress=not args.quiet)
    for split, dataset in written.items():
        record = {
            "count": len(dataset),
            "counts": dataset.counts(),
            "path": str(out_dir / f"{split}.jsonl"),
            "split": split,
        }
        print(format_record(record))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    train_set, val_set = _datasets(config)
    checkpoint = args.checkpoint or resolve_output(None, f"checkpoints/{config.ablation}.ckpt")
    with _output(args.out) as stream:

        def emit(record: dict[str, Any]) -> None:
            stream.write(format_record(record) + "\n")
            stream.flush()

        result = train(
            config,
            train_set,
            val_set,
            checkpoint_path=checkpoint,
            on_record=emit,
            progress=not args.quiet,
        )
        summary = {
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_accuracy,
            "checkpoint": str(checkpoint),
            "config_hash": config_hash(config),
            "split": "summary",
        }
        stream.write(format_record(summary) + "\n")
    logger.info("best checkpoint (epoch %d) at %s", result.best_epoch, checkpoint)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ablation = args.ablation or ckpt.meta.get("ablation") or "full"
    if ablation not in ABLATIONS:
        raise ConfigError(f"checkpoint names unknown ablation {ablation!r}")
    dataset = load_dataset(_split_path(args.data, args.split))
    report = evaluate(
        ckpt.params, dataset, ablation, workers=args.workers, keep_probabilities=args.per_instance
    )
    with _output(args.out) as stream:
        for index, (instance, probabilities) in enumerate(zip(dataset, report.probabilities)):
            record = {
                "index": index,
                "predicted": int(np.argmax(probabilities)),
                "probabilities": [float(p) for p in probabilities],
                "target": instance.target_index,
            }
            stream.write(format_record(record) + "\n")
        record = {"ablation": ablation, "split": args.split, **report.to_record()}
        stream.write(format_record(record) + "\n")
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ablation = args.ablation or ckpt.meta.get("ablation") or "full"
    path, index = _parse_instance_ref(args.instance)
    dataset = load_dataset(path)
    if not 0 <= index < len(dataset):
        raise ConfigError(f"{path} has {len(dataset)} instances, index {index} is out of range")
    if dataset.vocabulary.size > ckpt.params.dims.vocab_size:
        raise DimensionMismatchError("instance vocabulary does not fit the checkpoint")
    instance = dataset[index]
    output = score_instance(instance, ckpt.params, ablation, EVAL)
    out_dir = resolve_output(args.out, f"traces/{path.stem}_{index}")
    bundle = write_trace(out_dir, instance, output.trace, dataset.vocabulary, args.scale)
    print(
        format_record(
            {
                "images": len(bundle.image_paths),
                "predicted": output.trace.predicted,
                "records": str(bundle.records_path),
                "target": instance.target_index,
            }
        )
    )
    return 0


def _ordering_checks(means: dict[str, float], tolerance: float) -> dict[str, bool]:
    ge = lambda a, b: means[a] >= means[b] - tolerance  # noqa: E731
    return {
        "full>=proposal_only": ge("full", "proposal_only"),
        "proposal_only>=baseline": ge("proposal_only", "baseline"),
        "full>=image_only": ge("full", "image_only"),
        "image_only>=baseline": ge("image_only", "baseline"),
        "proposal_only>=image_only": ge("proposal_only", "image_only"),
    }


def cmd_ablate(args: argparse.Namespace) -> int:
    base = load_config(args.config, _overrides(args))
    train_set, val_set = _datasets(base)
    if val_set is None or not len(val_set):
        raise ConfigError("ablate needs a non-empty validation split")
    ckpt_dir = resolve_output(args.checkpoints, "checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    means: dict[str, float] = {}
    with _output(args.out) as stream:
        for ablation in ABLATIONS:
            accuracies = []
            for seed in args.seeds:
                config = load_config(args.config, {**_overrides(args), "ablation": ablation, "seed": seed})
                checkpoint = ckpt_dir / f"{run_name(ablation, seed, config_hash(config))}.ckpt"
                result = train(config, train_set, val_set, checkpoint_path=checkpoint, progress=not args.quiet)
                accuracy = evaluate(result.params, val_set, ablation).accuracy
                accuracies.append(accuracy)
                run = {"ablation": ablation, "accuracy": accuracy, "checkpoint": str(checkpoint), "seed": seed}
                stream.write(format_record(run) + "\n")
            mean = float(np.mean(accuracies))
            stdev = float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0
            means[ablation] = mean
            write_metrics([{"ablation": ablation, "mean": mean, "stdev": stdev, "seeds": list(args.seeds)}], stream)
        ordering = _ordering_checks(means, args.tolerance)
        stream.write(format_record({"ordering": ordering, "tolerance": args.tolerance}) + "\n")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    logger.debug("data directory: %s", default_data_dir())
    try:
        return _COMMANDS[args.command](args)
    except PlanError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return 1


__all__ = ["build_parser", "configure_logging", "main"]
