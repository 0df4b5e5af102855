import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from planground.constants import DATASET_FORMAT_VERSION
from planground.dataset import (
    Dataset,
    generate_split,
    generate_splits,
    header_path,
    instance_to_record,
    load_dataset,
    record_to_instance,
    split_counts,
    write_dataset,
)
from planground.exceptions import ConfigError, DimensionMismatchError, NoDistinguishingExpressionError
from planground.shapeworld import GenerationConfig, SceneConfig, oracle_resolve


def test_header_path_sits_beside_data() -> None:
    assert header_path("/tmp/x/train.jsonl") == Path("/tmp/x/train.header.json")


def test_split_counts_partition_total() -> None:
    assert split_counts(2500) == {"train": 2000, "val": 250, "test": 250}
    assert split_counts(0) == {"train": 0, "val": 0, "test": 0}
    for total in range(1, 40):
        assert sum(split_counts(total).values()) == total


def test_record_round_trip() -> None:
    dataset = generate_split(0, "train", 20)
    for instance in dataset:
        assert record_to_instance(instance_to_record(instance)) == instance


def test_record_uses_normalised_boxes() -> None:
    instance = generate_split(1, "val", 1)[0]
    record = instance_to_record(instance)
    assert all(0.0 <= v <= 1.0 for box in record["proposals"] for v in box)
    assert len(record["proposals"]) == len(record["objects"])


def test_record_rejects_tampered_boxes() -> None:
    record = instance_to_record(generate_split(2, "train", 1)[0])
    record["proposals"][0][0] += 0.5
    with pytest.raises(DimensionMismatchError):
        record_to_instance(record)


def test_record_rejects_wrong_target() -> None:
    record = instance_to_record(generate_split(3, "train", 1)[0])
    record["target_index"] = (record["target_index"] + 1) % len(record["objects"])
    with pytest.raises(NoDistinguishingExpressionError):
        record_to_instance(record)


def test_write_and_load(tmp_path: Path) -> None:
    dataset = generate_split(4, "train", 15)
    path = write_dataset(dataset, tmp_path / "train.jsonl")
    loaded = load_dataset(path)
    assert loaded.instances == dataset.instances
    header = json.loads(header_path(path).read_text())
    assert header["format_version"] == DATASET_FORMAT_VERSION
    assert header["count"] == 15
    assert sum(header["counts"].values()) == 15
    assert len(header["vocabulary"]) == 26
    assert loaded.generation == GenerationConfig()


def test_generation_is_byte_identical(tmp_path: Path) -> None:
    generate_splits(7, 30, tmp_path / "a")
    generate_splits(7, 30, tmp_path / "b")
    for name in ("train.jsonl", "train.header.json", "val.jsonl", "test.header.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_splits_are_disjoint_streams() -> None:
    train = generate_split(0, "train", 5)
    val = generate_split(0, "val", 5)
    assert train.instances != val.instances


def test_empty_dataset_has_valid_header(tmp_path: Path) -> None:
    written = generate_splits(0, 0, tmp_path)
    assert all(len(d) == 0 for d in written.values())
    assert (tmp_path / "train.jsonl").read_text() == ""
    loaded = load_dataset(tmp_path / "train.jsonl")
    assert len(loaded) == 0
    assert loaded.counts() == {}


def test_load_rejects_missing_header(tmp_path: Path) -> None:
    (tmp_path / "x.jsonl").write_text("")
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "x.jsonl")


def test_load_rejects_unknown_version(tmp_path: Path) -> None:
    path = write_dataset(Dataset([]), tmp_path / "x.jsonl")
    header = json.loads(header_path(path).read_text())
    header["format_version"] = 99
    header_path(path).write_text(json.dumps(header))
    with pytest.raises(ConfigError):
        load_dataset(path)


def test_load_rejects_count_mismatch(tmp_path: Path) -> None:
    path = write_dataset(generate_split(5, "train", 3), tmp_path / "x.jsonl")
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:2]))
    with pytest.raises(ConfigError):
        load_dataset(path)


def test_generated_split_instances_verified() -> None:
    for instance in generate_split(11, "test", 50):
        assert oracle_resolve(instance.scene, instance.expression) == {instance.target_index}


def test_floats_carry_nine_significant_digits(tmp_path: Path) -> None:
    config = GenerationConfig(scene=SceneConfig(grid_side=7, min_objects=4, max_objects=8))
    path = write_dataset(generate_split(0, "train", 3, config), tmp_path / "g7.jsonl")
    record = json.loads(path.read_text().splitlines()[0])
    for box in record["proposals"]:
        for v in box:
            assert v == float(f"{v:.9g}")
    assert np.isclose(record["proposals"][0][2] - record["proposals"][0][0], 1 / 7)
