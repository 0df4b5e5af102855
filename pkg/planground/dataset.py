"""Reading and writing shape-world datasets.

A dataset is two files: ``<name>.jsonl`` with one instance per line and a
``<name>.header.json`` sidecar holding the format version, vocabulary,
generation settings and per-kind counts.  Records are written with sorted
keys and compact separators, and every float is rounded to nine
significant digits, so generation with the same seed and settings gives
byte-identical files.  The exact field layout is documented in
``docs/FORMATS.md``.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .constants import DATASET_FORMAT_VERSION, FLOAT_DIGITS, KINDS, SPLIT_FRACTIONS
from .exceptions import ConfigError, DimensionMismatchError, PlanError
from .shapeworld import (
    DEFAULT_VOCABULARY,
    ExpressionSeq,
    GenerationConfig,
    GroundingInstance,
    QAPair,
    Scene,
    SceneConfig,
    SceneObject,
    Vocabulary,
    Word,
    generate_instance,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Stable per-split stream ids; each split draws from a disjoint seed range.
SPLIT_IDS: dict[str, int] = {"train": 0, "val": 1, "test": 2}


def _round(value: float) -> float:
    return float(f"{value:.{FLOAT_DIGITS}g}")


def header_path(path: PathLike) -> Path:
    """Sidecar location for a dataset file: ``train.jsonl`` → ``train.header.json``."""
    path = Path(path)
    return path.with_name(f"{path.stem}.header.json")


# ─── Records ─────────────────────────────────────────────────────────────────


def config_to_dict(config: GenerationConfig) -> dict[str, Any]:
    return {
        "grid_side": config.scene.grid_side,
        "min_objects": config.scene.min_objects,
        "max_objects": config.scene.max_objects,
        "kinds": list(config.kinds),
        "location_words": config.location_words,
        "dialog_rounds": config.dialog_rounds,
    }


def config_from_dict(data: dict[str, Any]) -> GenerationConfig:
    try:
        scene = SceneConfig(
            grid_side=int(data["grid_side"]),
            min_objects=int(data["min_objects"]),
            max_objects=int(data["max_objects"]),
        )
        return GenerationConfig(
            scene=scene,
            kinds=tuple(data["kinds"]),
            location_words=bool(data["location_words"]),
            dialog_rounds=data["dialog_rounds"],
        )
    except KeyError as exc:
        raise ConfigError(f"generation settings lack {exc.args[0]!r}") from exc


def instance_to_record(instance: GroundingInstance) -> dict[str, Any]:
    """Plain-data form of an instance; proposal boxes are normalised to [0, 1]."""
    scene = instance.scene
    g = float(scene.grid_side)
    return {
        "expression": [list(unit.tokens) for unit in instance.expression.units],
        "grid_side": scene.grid_side,
        "kind": instance.kind,
        "objects": [
            {"col": o.col, "color": o.color, "row": o.row, "shape": o.shape, "size": o.size}
            for o in scene.objects
        ],
        "proposals": [[_round(v / g) for v in box] for box in scene.proposals],
        "target_index": instance.target_index,
    }


def record_to_instance(
    record: dict[str, Any], vocabulary: Vocabulary = DEFAULT_VOCABULARY
) -> GroundingInstance:
    """Rebuild and re-validate an instance from its record.

    Raises:
        DimensionMismatchError: Stored proposal boxes disagree with the
            object cells.
        PlanError: Any validation error of the rebuilt scene or expression.
    """
    try:
        g = int(record["grid_side"])
        objects = tuple(
            SceneObject(o["color"], o["shape"], o["size"], int(o["row"]), int(o["col"]))
            for o in record["objects"]
        )
        target = int(record["target_index"])
        kind = record["kind"]
        units_raw = record["expression"]
        stored_boxes = record["proposals"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed dataset record: {exc}") from exc
    scene = Scene(g, objects, target)
    expected = [[_round(v / g) for v in box] for box in scene.proposals]
    if stored_boxes != expected:
        raise DimensionMismatchError("stored proposal boxes do not match the object cells")
    if kind == "dialog":
        units = tuple(QAPair(tuple(int(t) for t in u)) for u in units_raw)
    else:
        if any(len(u) != 1 for u in units_raw):
            raise ConfigError(f"{kind} units must hold exactly one token")
        units = tuple(Word(int(u[0])) for u in units_raw)
    expression = ExpressionSeq(units, vocabulary.size)
    return GroundingInstance(scene, expression, kind, target)


def _dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


# ─── Dataset ─────────────────────────────────────────────────────────────────


@dataclass
class Dataset:
    """In-memory list of instances plus the header they were generated with."""

    instances: list[GroundingInstance]
    vocabulary: Vocabulary = DEFAULT_VOCABULARY
    generation: Optional[GenerationConfig] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[GroundingInstance]:
        return iter(self.instances)

    def __getitem__(self, index: int) -> GroundingInstance:
        return self.instances[index]

    @property
    def grid_side(self) -> Optional[int]:
        if self.generation is not None:
            return self.generation.scene.grid_side
        if self.instances:
            return self.instances[0].scene.grid_side
        return None

    def counts(self) -> dict[str, int]:
        """Instances per kind, kinds without instances omitted."""
        counter = Counter(inst.kind for inst in self.instances)
        return {kind: counter[kind] for kind in KINDS if counter[kind]}

    def header(self) -> dict[str, Any]:
        return {
            "count": len(self.instances),
            "counts": self.counts(),
            "format_version": DATASET_FORMAT_VERSION,
            "generation": config_to_dict(self.generation) if self.generation else None,
            "meta": self.meta,
            "vocabulary": list(self.vocabulary.tokens),
        }


def write_dataset(dataset: Dataset, path: PathLike) -> Path:
    """Write ``dataset`` and its header sidecar; returns the data file path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for instance in dataset.instances:
            fh.write(_dumps(instance_to_record(instance)) + "\n")
    header_path(path).write_text(_dumps(dataset.header()) + "\n", encoding="utf-8")
    logger.debug("wrote %d instances to %s", len(dataset), path)
    return path


def load_dataset(path: PathLike) -> Dataset:
    """Load a dataset file and its header, re-validating every instance.

    Raises:
        ConfigError: Missing files, an unknown format version or a record
            count that disagrees with the header.
    """
    path = Path(path)
    sidecar = header_path(path)
    if not path.is_file():
        raise ConfigError(f"dataset file {path} does not exist")
    if not sidecar.is_file():
        raise ConfigError(f"dataset header {sidecar} does not exist")
    try:
        header = json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"dataset header {sidecar} is not valid JSON: {exc}") from exc
    version = header.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise ConfigError(f"dataset format version {version} is not supported")
    vocabulary = Vocabulary(header["vocabulary"])
    generation = config_from_dict(header["generation"]) if header.get("generation") else None

    instances: list[GroundingInstance] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                instances.append(record_to_instance(record, vocabulary))
            except PlanError as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
    if header.get("count") is not None and header["count"] != len(instances):
        raise ConfigError(
            f"{path} holds {len(instances)} instances but its header declares {header['count']}"
        )
    logger.debug("loaded %d instances from %s", len(instances), path)
    return Dataset(instances, vocabulary, generation, dict(header.get("meta") or {}))


# ─── Generation ──────────────────────────────────────────────────────────────


def instance_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream for one instance of one split."""
    if split not in SPLIT_IDS:
        raise ConfigError(f"unknown split {split!r}")
    return np.random.default_rng(np.random.SeedSequence([seed, SPLIT_IDS[split], index]))


def generate_split(
    seed: int,
    split: str,
    count: int,
    config: GenerationConfig = GenerationConfig(),
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
    progress: bool = False,
) -> Dataset:
    """Generate ``count`` instances of ``split``; a pure function of its arguments."""
    if count < 0:
        raise ConfigError("instance count must be non-negative")
    instances = [
        generate_instance(instance_rng(seed, split, i), config, vocabulary)
        for i in tqdm(range(count), desc=split, unit="inst", disable=not progress)
    ]
    return Dataset(instances, vocabulary, config, {"seed": seed, "split": split})


def split_counts(total: int) -> dict[str, int]:
    """Partition ``total`` into train/val/test sizes; test takes the remainder."""
    if total < 0:
        raise ConfigError("instance count must be non-negative")
    train = int(round(total * SPLIT_FRACTIONS["train"]))
    val = int(round(total * SPLIT_FRACTIONS["val"]))
    val = min(val, total - train)
    return {"train": train, "val": val, "test": total - train - val}


def generate_splits(
    seed: int,
    total: int,
    out_dir: PathLike,
    config: GenerationConfig = GenerationConfig(),
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
    progress: bool = False,
    splits: Sequence[str] = ("train", "val", "test"),
) -> dict[str, Dataset]:
    """Generate and write every split to ``out_dir/<split>.jsonl``."""
    out_dir = Path(out_dir)
    sizes = split_counts(total)
    written: dict[str, Dataset] = {}
    for split in splits:
        dataset = generate_split(seed, split, sizes[split], config, vocabulary, progress)
        write_dataset(dataset, out_dir / f"{split}.jsonl")
        logger.info("%s: %d instances %s", split, len(dataset), dataset.counts())
        written[split] = dataset
    return written


__all__ = [
    "SPLIT_IDS",
    "Dataset",
    "header_path",
    "config_to_dict",
    "config_from_dict",
    "instance_to_record",
    "record_to_instance",
    "write_dataset",
    "load_dataset",
    "instance_rng",
    "generate_split",
    "split_counts",
    "generate_splits",
]
