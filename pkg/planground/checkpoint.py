"""Binary checkpoints of model parameters and optimiser state.

Layout (all integers little-endian, see ``docs/FORMATS.md``)::

    magic "PLANCKPT"
    u32 format version
    u32 length + ASCII config hash
    u32 length + UTF-8 metadata, sorted ``key=value`` lines
        (``dims.*`` is the shape manifest, ``meta.*`` is free-form)
    u32 tensor count
    per tensor: u32 name length, name, u8 item size (4 or 8),
                u8 ndim, ndim × u32 shape, raw little-endian floats
    u8 has_adam; if set: u64 step, then m and v for every tensor in order
    u32 CRC-32 of everything above

Saving the same parameters twice gives identical bytes, and a load
returns arrays bit-identical to the saved ones.
"""

from __future__ import annotations

import io
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Optional, Union

import numpy as np

from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .exceptions import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    InvalidValueError,
)
from .params import ModelDims, PlanParams, param_shapes

if TYPE_CHECKING:
    from .trainer import AdamState

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_ITEM_DTYPES: dict[int, str] = {4: "<f4", 8: "<f8"}


@dataclass
class Checkpoint:
    params: PlanParams
    adam: Optional["AdamState"]
    config_hash: str
    meta: dict[str, str] = field(default_factory=dict)


# ─── Encoding ────────────────────────────────────────────────────────────────


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _array_bytes(array: np.ndarray) -> bytes:
    itemsize = array.dtype.itemsize
    if itemsize not in _ITEM_DTYPES or array.dtype.kind != "f":
        raise CheckpointError(f"cannot store dtype {array.dtype}")
    return np.ascontiguousarray(array, dtype=_ITEM_DTYPES[itemsize]).tobytes()


def _metadata_text(dims: ModelDims, meta: Mapping[str, Any]) -> str:
    lines = {f"dims.{k}": str(v) for k, v in dims.as_dict().items()}
    for key, value in meta.items():
        lines[f"meta.{key}"] = "" if value is None else str(value)
    return "".join(f"{k}={lines[k]}\n" for k in sorted(lines))


def encode_checkpoint(
    params: PlanParams,
    adam: Optional["AdamState"] = None,
    config_hash: str = "",
    meta: Optional[Mapping[str, Any]] = None,
) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(_blob(config_hash.encode("ascii")))
    out.write(_blob(_metadata_text(params.dims, meta or {}).encode("utf-8")))
    out.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        data = tensor.data
        out.write(_blob(name.encode("utf-8")))
        out.write(struct.pack("<BB", data.dtype.itemsize, data.ndim))
        out.write(struct.pack(f"<{data.ndim}I", *data.shape))
        out.write(_array_bytes(data))
    if adam is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<BQ", 1, adam.step))
        for name, tensor in params.items():
            for moments in (adam.m, adam.v):
                out.write(_array_bytes(np.asarray(moments[name], dtype=tensor.dtype)))
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(
    params: PlanParams,
    path: PathLike,
    adam: Optional["AdamState"] = None,
    config_hash: str = "",
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write a checkpoint atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(params, adam, config_hash, meta)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug("saved checkpoint %s (%d bytes)", path, len(payload))
    return path


# ─── Decoding ────────────────────────────────────────────────────────────────


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointChecksumError("checkpoint ends unexpectedly")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (length,) = self.unpack("<I")
        return self.take(length)

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        # Native-order copy; frombuffer views are read-only.
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:])


def _parse_metadata(text: str) -> tuple[dict[str, str], dict[str, str]]:
    dims: dict[str, str] = {}
    meta: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        (dims if section == "dims" else meta)[name] = value
    return dims, meta


def _dims_from(manifest: Mapping[str, str]) -> ModelDims:
    try:
        return ModelDims(**{k: int(v) for k, v in manifest.items()})
    except (TypeError, ValueError, InvalidValueError) as exc:
        raise CheckpointShapeError(f"invalid dimension manifest {dict(manifest)}: {exc}") from exc


def decode_checkpoint(
    payload: bytes,
    expected_dims: Optional[ModelDims] = None,
    config_hash: Optional[str] = None,
) -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        CheckpointChecksumError: Truncated or corrupted payload.
        CheckpointVersionError: Unknown magic or format version.
        CheckpointShapeError: The stored manifest or tensors disagree with
            ``expected_dims``.
    """
    if len(payload) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointChecksumError("checkpoint is truncated")
    body, (stored_crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) != stored_crc:
        raise CheckpointChecksumError("checkpoint checksum mismatch (truncated or corrupted)")

    reader = _Reader(body)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("not a planground checkpoint")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    stored_hash = reader.blob().decode("ascii")
    manifest, meta = _parse_metadata(reader.blob().decode("utf-8"))
    dims = _dims_from(manifest)
    if expected_dims is not None and dims != expected_dims:
        raise CheckpointShapeError(f"checkpoint holds dims {dims}, expected {expected_dims}")
    if config_hash is not None and stored_hash and config_hash != stored_hash:
        logger.warning("checkpoint was written under a different config (hash %s)", stored_hash[:12])

    shapes = param_shapes(dims)
    (count,) = reader.unpack("<I")
    if count != len(shapes):
        raise CheckpointShapeError(f"checkpoint holds {count} tensors, manifest implies {len(shapes)}")
    arrays: dict[str, np.ndarray] = {}
    layout: list[tuple[str, str, tuple[int, ...]]] = []
    for _ in range(count):
        name = reader.blob().decode("utf-8")
        itemsize, ndim = reader.unpack("<BB")
        shape = tuple(reader.unpack(f"<{ndim}I"))
        if itemsize not in _ITEM_DTYPES:
            raise CheckpointError(f"{name}: unsupported item size {itemsize}")
        if shapes.get(name) != shape:
            raise CheckpointShapeError(f"{name}: stored shape {shape}, manifest implies {shapes.get(name)}")
        arrays[name] = reader.array(_ITEM_DTYPES[itemsize], shape)
        layout.append((name, _ITEM_DTYPES[itemsize], shape))

    adam = None
    (has_adam,) = reader.unpack("<B")
    if has_adam:
        from .trainer import AdamState

        (step,) = reader.unpack("<Q")
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for name, dtype, shape in layout:
            m[name] = reader.array(dtype, shape)
            v[name] = reader.array(dtype, shape)
        adam = AdamState(m=m, v=v, step=int(step))
    if reader.pos != len(body):
        raise CheckpointChecksumError("trailing bytes after checkpoint body")

    try:
        params = PlanParams(dims, arrays)
    except (ValueError, InvalidValueError) as exc:
        raise CheckpointShapeError(str(exc)) from exc
    return Checkpoint(params, adam, stored_hash, meta)


def load_checkpoint(
    path: PathLike,
    expected_dims: Optional[ModelDims] = None,
    config_hash: Optional[str] = None,
) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(payload, expected_dims, config_hash)


__all__ = [
    "Checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]
