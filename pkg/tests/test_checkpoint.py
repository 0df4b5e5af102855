import logging
import struct
import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from planground.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from planground.constants import CHECKPOINT_MAGIC
from planground.dataset import generate_split
from planground.exceptions import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
)
from planground.params import ModelDims, PlanParams
from planground.trainer import AdamState, TrainConfig, adam_step, config_hash, train


def _params(hidden: int = 4, dtype=np.float32, seed: int = 0) -> PlanParams:
    return PlanParams.initialise(ModelDims(vocab_size=26, hidden_size=hidden), seed=seed, dtype=dtype)


def _stepped_adam(params: PlanParams) -> AdamState:
    state = AdamState.fresh(params)
    rng = np.random.default_rng(0)
    grads = {n: rng.normal(size=a.shape).astype(a.dtype) for n, a in params.arrays().items()}
    adam_step(params, grads, state, 1e-3)
    return state


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_save_load_save_is_byte_identical(tmp_path: Path) -> None:
    params = _params()
    adam = _stepped_adam(params)
    first = save_checkpoint(params, tmp_path / "a.ckpt", adam, "abc123", {"epoch": 3})
    loaded = load_checkpoint(first)
    second = save_checkpoint(loaded.params, tmp_path / "b.ckpt", loaded.adam, loaded.config_hash, loaded.meta)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().startswith(CHECKPOINT_MAGIC)
    assert not (tmp_path / "a.ckpt.tmp").exists()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_arrays_are_bit_identical(dtype) -> None:
    params = _params(dtype=dtype)
    adam = _stepped_adam(params)
    loaded = decode_checkpoint(encode_checkpoint(params, adam))
    for name, array in params.arrays().items():
        restored = loaded.params[name].data
        assert restored.dtype == dtype
        assert np.array_equal(restored, array)
        assert np.array_equal(loaded.adam.m[name], adam.m[name])
        assert np.array_equal(loaded.adam.v[name], adam.v[name])
    assert loaded.adam.step == 1


def test_loaded_arrays_are_writable() -> None:
    loaded = decode_checkpoint(encode_checkpoint(_params()))
    loaded.params["word.E"].data[0, 0] += 1.0


def test_without_optimiser_state() -> None:
    loaded = decode_checkpoint(encode_checkpoint(_params()))
    assert loaded.adam is None
    assert loaded.params.dims == ModelDims(vocab_size=26, hidden_size=4)


def test_meta_round_trip() -> None:
    loaded = decode_checkpoint(encode_checkpoint(_params(), meta={"ablation": "full", "val_accuracy": None}))
    assert loaded.meta == {"ablation": "full", "val_accuracy": ""}


def test_truncated_checkpoint() -> None:
    payload = encode_checkpoint(_params())
    for cut in (3, len(payload) // 2, len(payload) - 1):
        with pytest.raises(CheckpointChecksumError):
            decode_checkpoint(payload[:cut])


def test_corrupted_byte_fails_checksum() -> None:
    payload = bytearray(encode_checkpoint(_params()))
    payload[len(payload) // 2] ^= 0xFF
    with pytest.raises(CheckpointChecksumError):
        decode_checkpoint(bytes(payload))


def test_unknown_version() -> None:
    body = bytearray(encode_checkpoint(_params())[:-4])
    body[8:12] = struct.pack("<I", 2)
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(_with_crc(bytes(body)))


def test_bad_magic() -> None:
    body = bytearray(encode_checkpoint(_params())[:-4])
    body[:8] = b"NOTACKPT"
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(_with_crc(bytes(body)))


def test_hidden_size_mismatch() -> None:
    payload = encode_checkpoint(_params(hidden=64))
    with pytest.raises(CheckpointShapeError):
        decode_checkpoint(payload, expected_dims=ModelDims(vocab_size=26, hidden_size=128))


def test_config_hash_mismatch_only_warns(caplog) -> None:
    payload = encode_checkpoint(_params(), config_hash="a" * 64)
    with caplog.at_level(logging.WARNING, logger="planground.checkpoint"):
        loaded = decode_checkpoint(payload, config_hash="b" * 64)
    assert loaded.config_hash == "a" * 64
    assert any("different config" in r.getMessage() for r in caplog.records)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_training_writes_best_checkpoint(tmp_path: Path) -> None:
    config = TrainConfig(hidden_size=4, epochs=2, batch_size=4, dropout=0.0, dtype="float64")
    path = tmp_path / "run.ckpt"
    result = train(config, generate_split(0, "train", 6), generate_split(0, "val", 4), checkpoint_path=path)
    loaded = load_checkpoint(path, expected_dims=result.params.dims, config_hash=config_hash(config))
    assert loaded.config_hash == config_hash(config)
    assert loaded.meta["epoch"] == str(result.best_epoch)
    for name, array in result.params.arrays().items():
        assert np.array_equal(loaded.params[name].data, array)
