"""Optimisation loop, evaluation and metrics for the grounding model.

Training runs shuffled mini-batches of single-instance forward passes.
Each instance contributes ``loss / batch_size`` to the gradient, so the
accumulated gradient is the batch mean.  Adam updates the parameters
after every batch; the learning rate is divided by ``lr_decay_factor``
once ``lr_decay_epoch`` epochs have completed.  Parameters with the best
validation accuracy are kept (and checkpointed when a path is given).

Every run is a deterministic function of its config, datasets and seed:
one :class:`numpy.random.SeedSequence` per run is split into independent
streams for initialisation, shuffling and dropout.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .autodiff import backward, cross_entropy
from .constants import (
    ABLATIONS,
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    BATCH_SIZE,
    CATEGORY_DIM,
    DEFAULT_ABLATION,
    DROPOUT,
    EPOCHS,
    FLOAT_DIGITS,
    HIDDEN_SIZE,
    KINDS,
    LEARNING_RATE,
    LR_DECAY_EPOCH,
    LR_DECAY_FACTOR,
)
from .dataset import Dataset
from .exceptions import ConfigError, DimensionMismatchError, NonFiniteError
from .model import score_instance
from .params import EVAL, ModelDims, PlanParams, RunContext
from .shapeworld import GroundingInstance

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Scorer = Callable[[GroundingInstance], np.ndarray]

_DTYPES = ("float32", "float64")


# ─── Configuration ───────────────────────────────────────────────────────────


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters and inputs of one training run."""

    learning_rate: float = LEARNING_RATE
    lr_decay_epoch: int = LR_DECAY_EPOCH
    lr_decay_factor: float = LR_DECAY_FACTOR
    batch_size: int = BATCH_SIZE
    hidden_size: int = HIDDEN_SIZE
    dropout: float = DROPOUT
    epochs: int = EPOCHS
    seed: int = 0
    ablation: str = DEFAULT_ABLATION
    use_category: bool = True
    dtype: str = "float32"
    train_path: Optional[str] = None
    val_path: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.hidden_size < 1 or self.epochs < 0 or self.lr_decay_epoch < 0:
            raise ConfigError("hidden_size must be positive; epochs and lr_decay_epoch non-negative")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be positive")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {_DTYPES}, got {self.dtype!r}")

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def dims(self, vocab_size: int) -> ModelDims:
        return ModelDims(
            vocab_size=vocab_size,
            hidden_size=self.hidden_size,
            category_dim=CATEGORY_DIM if self.use_category else 0,
        )


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _cast(name: str, raw: str) -> Any:
    default = next(f.default for f in dataclasses.fields(TrainConfig) if f.name == name)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    if default is None:
        return text or None
    return text


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _cast(key, raw)
    return values


def load_config(
    path: Optional[PathLike] = None, overrides: Optional[Mapping[str, Any]] = None
) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``None`` values skipped)."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(config: TrainConfig) -> str:
    """Canonical ``key=value`` rendering, keys sorted."""
    items = sorted(dataclasses.asdict(config).items())
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in items)


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(format_config(config).encode("utf-8")).hexdigest()


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    if epoch > config.lr_decay_epoch:
        return config.learning_rate / config.lr_decay_factor
    return config.learning_rate


# ─── Adam ────────────────────────────────────────────────────────────────────


@dataclass
class AdamState:
    """First/second moment estimates per parameter and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def fresh(cls, params: PlanParams) -> "AdamState":
        arrays = params.arrays()
        return cls(
            m={n: np.zeros_like(a) for n, a in arrays.items()},
            v={n: np.zeros_like(a) for n, a in arrays.items()},
        )

    def copy(self) -> "AdamState":
        return dataclasses.replace(
            self,
            m={n: a.copy() for n, a in self.m.items()},
            v={n: a.copy() for n, a in self.v.items()},
        )


def adam_step(
    params: PlanParams, grads: Mapping[str, np.ndarray], state: AdamState, lr: float
) -> None:
    """One bias-corrected Adam update, in place.

    Raises:
        DimensionMismatchError: Gradient or moment shapes differ from the
            parameters.
        NonFiniteError: Any gradient holds NaN or inf; nothing is updated.
    """
    names = list(params)
    if set(grads) != set(names) or set(state.m) != set(names):
        raise DimensionMismatchError("gradients, moments and parameters name different tensors")
    bad = [n for n in names if not np.all(np.isfinite(grads[n]))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad)} at step {state.step + 1}")
    for name in names:
        shape = params[name].shape
        if grads[name].shape != shape or state.m[name].shape != shape or state.v[name].shape != shape:
            raise DimensionMismatchError(f"{name}: shape disagreement with {shape}")

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    step_size = lr / bc1
    for name in names:
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.epsilon
        data = params[name].data
        data -= (step_size * m / denom).astype(data.dtype, copy=False)


# ─── Evaluation ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EvalReport:
    """Accuracy overall and per bucket; empty buckets are absent."""

    accuracy: float
    correct: int
    total: int
    loss: Optional[float] = None
    by_kind: dict[str, float] = field(default_factory=dict)
    by_num_proposals: dict[int, float] = field(default_factory=dict)
    probabilities: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "accuracy": self.accuracy,
            "by_kind": dict(self.by_kind),
            "by_num_proposals": {str(k): v for k, v in sorted(self.by_num_proposals.items())},
            "correct": self.correct,
            "total": self.total,
        }
        if self.loss is not None:
            record["loss"] = self.loss
        return record


@dataclass
class _Tally:
    correct: int = 0
    total: int = 0
    loss: float = 0.0
    kind_hits: Counter = field(default_factory=Counter)
    kind_totals: Counter = field(default_factory=Counter)
    n_hits: Counter = field(default_factory=Counter)
    n_totals: Counter = field(default_factory=Counter)

    def add(self, instance: GroundingInstance, probabilities: np.ndarray) -> None:
        hit = int(np.argmax(probabilities)) == instance.target_index
        n = instance.scene.num_proposals
        self.total += 1
        self.correct += hit
        self.loss -= math.log(max(float(probabilities[instance.target_index]), 1e-300))
        self.kind_totals[instance.kind] += 1
        self.kind_hits[instance.kind] += hit
        self.n_totals[n] += 1
        self.n_hits[n] += hit

    def merge(self, other: "_Tally") -> None:
        self.correct += other.correct
        self.total += other.total
        self.loss += other.loss
        for mine, theirs in (
            (self.kind_hits, other.kind_hits),
            (self.kind_totals, other.kind_totals),
            (self.n_hits, other.n_hits),
            (self.n_totals, other.n_totals),
        ):
            mine.update(theirs)


def model_scorer(params: PlanParams, ablation: str = DEFAULT_ABLATION) -> Scorer:
    """Eval-mode referring distribution of ``params`` under ``ablation``."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {', '.join(ABLATIONS)}")

    def score(instance: GroundingInstance) -> np.ndarray:
        return score_instance(instance, params, ablation, EVAL).probabilities.data

    return score


def evaluate(
    params: Optional[PlanParams],
    dataset: Union[Dataset, Sequence[GroundingInstance]],
    ablation: str = DEFAULT_ABLATION,
    scorer: Optional[Scorer] = None,
    workers: int = 1,
    keep_probabilities: bool = False,
) -> EvalReport:
    """Fraction of instances whose highest-probability proposal is the target.

    ``scorer`` replaces the model; it maps an instance to a probability
    vector over its proposals.  With ``workers > 1`` instances are sharded
    across threads and the counts merged.  ``keep_probabilities`` stores
    every distribution on the report, in dataset order.
    """
    instances = list(dataset)
    if not instances:
        raise ConfigError("cannot evaluate on an empty dataset")
    if scorer is None:
        if params is None:
            raise ConfigError("evaluate needs parameters or a scorer")
        vocab = dataset.vocabulary.size if isinstance(dataset, Dataset) else 0
        if vocab > params.dims.vocab_size:
            raise DimensionMismatchError(
                f"dataset vocabulary of {vocab} exceeds model vocabulary {params.dims.vocab_size}"
            )
        scorer = model_scorer(params, ablation)

    def run_shard(shard: Sequence[int]) -> tuple[_Tally, list[tuple[int, np.ndarray]]]:
        tally = _Tally()
        kept: list[tuple[int, np.ndarray]] = []
        for index in shard:
            instance = instances[index]
            probabilities = np.asarray(scorer(instance))
            if probabilities.shape != (instance.scene.num_proposals,):
                raise DimensionMismatchError(
                    f"scorer returned shape {probabilities.shape} for "
                    f"{instance.scene.num_proposals} proposals"
                )
            tally.add(instance, probabilities)
            if keep_probabilities:
                kept.append((index, probabilities))
        return tally, kept

    indices = list(range(len(instances)))
    workers = max(1, min(workers, len(instances)))
    if workers == 1:
        tally, kept = run_shard(indices)
    else:
        shards = [indices[k::workers] for k in range(workers)]
        tally, kept = _Tally(), []
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for part, part_kept in pool.map(run_shard, shards):
                tally.merge(part)
                kept.extend(part_kept)
    kept.sort(key=lambda item: item[0])

    return EvalReport(
        accuracy=tally.correct / tally.total,
        correct=tally.correct,
        total=tally.total,
        loss=tally.loss / tally.total,
        by_kind={k: tally.kind_hits[k] / tally.kind_totals[k] for k in KINDS if tally.kind_totals[k]},
        by_num_proposals={n: tally.n_hits[n] / tally.n_totals[n] for n in sorted(tally.n_totals)},
        probabilities=tuple(p for _, p in kept),
    )


# ─── Metrics records ─────────────────────────────────────────────────────────


def _round_floats(value: Any) -> Any:
    if isinstance(value, float):
        return float(f"{value:.{FLOAT_DIGITS}g}")
    if isinstance(value, dict):
        return {k: _round_floats(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_floats(v) for v in value]
    return value


def format_record(record: Mapping[str, Any]) -> str:
    """One JSON line: sorted keys, compact separators, floats to nine digits."""
    return json.dumps(_round_floats(dict(record)), sort_keys=True, separators=(",", ":"))


def write_metrics(records: Iterable[Mapping[str, Any]], stream: IO[str]) -> None:
    for record in records:
        stream.write(format_record(record) + "\n")


# ─── Training ────────────────────────────────────────────────────────────────


@dataclass
class TrainResult:
    """Best-validation parameters, final optimiser state and the metrics history."""

    params: PlanParams
    history: list[dict[str, Any]]
    adam: AdamState
    best_epoch: int
    best_accuracy: Optional[float]
    final_params: PlanParams


def train(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Optional[Dataset] = None,
    *,
    checkpoint_path: Optional[PathLike] = None,
    on_record: Optional[Callable[[dict[str, Any]], None]] = None,
    progress: bool = False,
    params: Optional[PlanParams] = None,
) -> TrainResult:
    """Train from scratch (or from ``params``) and keep the best-val weights.

    Raises:
        ConfigError: The training set is empty.
        NonFiniteError: A loss or gradient became NaN/inf.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    dims = config.dims(train_set.vocabulary.size)
    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(3)
    if params is None:
        init_seed = int(init_seq.generate_state(1)[0])
        params = PlanParams.initialise(dims, seed=init_seed, dtype=config.numpy_dtype)
    elif params.dims != dims:
        raise DimensionMismatchError(f"initial parameters have dims {params.dims}, run needs {dims}")
    shuffle_rng = np.random.default_rng(shuffle_seq)
    ctx = RunContext(mode="train", dropout=config.dropout, rng=np.random.default_rng(dropout_seq))
    adam = AdamState.fresh(params)
    digest = config_hash(config)

    history: list[dict[str, Any]] = []
    best_params, best_epoch, best_accuracy = params.copy(), 0, None

    def emit(record: dict[str, Any]) -> None:
        history.append(record)
        if on_record is not None:
            on_record(record)

    n = len(train_set)
    logger.info(
        "training %s on %d instances for %d epochs (H=%d, batch %d)",
        config.ablation, n, config.epochs, config.hidden_size, config.batch_size,
    )
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config, epoch)
        order = shuffle_rng.permutation(n)
        total_loss, hits = 0.0, 0
        batches = range(0, n, config.batch_size)
        for start in tqdm(batches, desc=f"epoch {epoch}", unit="batch", disable=not progress):
            batch = order[start : start + config.batch_size]
            scale = 1.0 / len(batch)
            params.zero_grad()
            for idx in batch:
                instance = train_set[int(idx)]
                output = score_instance(instance, params, config.ablation, ctx)
                loss = cross_entropy(output.scores, instance.target_index)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(
                        f"non-finite loss {value} at epoch {epoch}, instance {int(idx)}"
                    )
                backward(loss * scale)
                total_loss += value
                hits += output.trace.predicted == instance.target_index
            adam_step(params, params.gradients(), adam, lr)

        record = {"epoch": epoch, "split": "train", "loss": total_loss / n, "accuracy": hits / n, "lr": lr}
        emit(record)
        logger.info("epoch %d: train loss %.4f acc %.3f (lr %g)", epoch, record["loss"], hits / n, lr)

        if val_set is not None and len(val_set):
            report = evaluate(params, val_set, config.ablation)
            emit({"epoch": epoch, "split": "val", "loss": report.loss, "accuracy": report.accuracy, "lr": lr})
            logger.info("epoch %d: val acc %.3f", epoch, report.accuracy)
            improved = best_accuracy is None or report.accuracy > best_accuracy
            if improved:
                best_params, best_epoch, best_accuracy = params.copy(), epoch, report.accuracy
        else:
            best_params, best_epoch = params.copy(), epoch
        if checkpoint_path is not None and best_epoch == epoch:
            # Imported here: checkpoint reads AdamState from this module.
            from .checkpoint import save_checkpoint

            save_checkpoint(
                best_params,
                checkpoint_path,
                adam=adam,
                config_hash=digest,
                meta={"ablation": config.ablation, "epoch": epoch, "val_accuracy": best_accuracy},
            )

    return TrainResult(best_params, history, adam, best_epoch, best_accuracy, params)


__all__ = [
    "TrainConfig",
    "parse_config_text",
    "load_config",
    "format_config",
    "config_hash",
    "lr_at_epoch",
    "AdamState",
    "adam_step",
    "EvalReport",
    "model_scorer",
    "evaluate",
    "format_record",
    "write_metrics",
    "TrainResult",
    "train",
]
