"""Step-by-step attention export.

A trace bundle is a directory holding ``trace.jsonl`` (one record per
expression unit) and one ASCII grayscale PGM per step showing the image
attention over the ``g × g`` grid.  Pixel intensity is
``round(α / max α · 255)`` so the most attended cell is always white;
each cell is drawn as a ``scale × scale`` block.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .constants import NORMALISATION_TOLERANCE, TRACE_IMAGE_SCALE, TRACE_TOP_PROPOSALS
from .exceptions import InvalidValueError, TraceError
from .model import AttentionTrace
from .shapeworld import DEFAULT_VOCABULARY, GroundingInstance, Vocabulary
from .trainer import format_record

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class TraceBundle:
    records_path: Path
    image_paths: tuple[Path, ...]
    records: tuple[dict[str, Any], ...]


def attention_pixels(weights: np.ndarray, grid_side: int, scale: int = TRACE_IMAGE_SCALE) -> np.ndarray:
    """Map attention weights to 0..255 intensities on an upscaled grid."""
    if scale < 1:
        raise InvalidValueError(f"scale must be at least 1, got {scale}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (grid_side * grid_side,):
        raise TraceError(f"{weights.size} weights do not cover a {grid_side}x{grid_side} grid")
    peak = float(weights.max())
    if peak <= 0:
        raise TraceError("attention weights have no positive entry")
    levels = np.floor(weights / peak * 255.0 + 0.5).astype(np.int64).reshape(grid_side, grid_side)
    return np.kron(levels, np.ones((scale, scale), dtype=np.int64))


def render_pgm(pixels: np.ndarray) -> str:
    """Plain (``P2``) PGM text for a 2-D array of 0..255 intensities."""
    height, width = pixels.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in pixels)
    return f"P2\n{width} {height}\n255\n{rows}\n"


def check_normalisation(trace: AttentionTrace, tolerance: float = NORMALISATION_TOLERANCE) -> None:
    """Raise :class:`TraceError` unless every α, β and P sums to one."""
    for t, step in enumerate(trace.steps, start=1):
        for label, weights in (
            ("image", step.image_weights),
            ("proposal", step.proposal_weights),
            ("referring", step.referring_weights),
            ("running", step.running_probabilities),
        ):
            if weights is None:
                continue
            total = float(np.sum(weights))
            if abs(total - 1.0) > tolerance or np.any(weights < 0):
                raise TraceError(f"step {t}: {label} weights sum to {total!r}")
    if abs(float(np.sum(trace.probabilities)) - 1.0) > tolerance:
        raise TraceError("final distribution does not sum to one")


def build_records(
    instance: GroundingInstance,
    trace: AttentionTrace,
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
    top_k: int = TRACE_TOP_PROPOSALS,
) -> list[dict[str, Any]]:
    """One record per unit; the last also marks prediction and ground truth.

    ``beta_top`` ranks the proposal weights after the unit has been read,
    the same weights the running distribution uses.
    """
    units = instance.expression.units
    if len(units) != len(trace):
        raise TraceError(f"trace has {len(trace)} steps for {len(units)} expression units")
    records: list[dict[str, Any]] = []
    for t, (unit, step) in enumerate(zip(units, trace.steps), start=1):
        if step.running_probabilities is None:
            raise TraceError(f"step {t} has no running distribution; trace an eval-mode pass")
        record: dict[str, Any] = {
            "step": t,
            "tokens": list(unit.tokens),
            "text": " ".join(vocabulary.decode(unit.tokens)),
            "running_p": [float(p) for p in step.running_probabilities],
        }
        if step.image_weights is not None:
            record["alpha"] = [float(a) for a in step.image_weights]
        if step.referring_weights is not None:
            # Stable sort keeps the lower proposal id first on ties.
            order = np.argsort(-step.referring_weights, kind="stable")[:top_k]
            record["beta_top"] = [
                {"proposal": int(i), "weight": float(step.referring_weights[i])} for i in order
            ]
        records.append(record)
    records[-1].update(
        {
            "final": True,
            "predicted": trace.predicted,
            "target": instance.target_index,
            "correct": trace.predicted == instance.target_index,
        }
    )
    return records


def write_trace(
    out_dir: PathLike,
    instance: GroundingInstance,
    trace: AttentionTrace,
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
    scale: int = TRACE_IMAGE_SCALE,
) -> TraceBundle:
    """Check normalisation, then write ``trace.jsonl`` and ``step_XX.pgm`` files."""
    check_normalisation(trace)
    records = build_records(instance, trace, vocabulary)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records_path = out_dir / "trace.jsonl"
    records_path.write_text("".join(format_record(r) + "\n" for r in records), encoding="utf-8")

    images: list[Path] = []
    if trace.steps and trace.steps[0].image_weights is None:
        logger.warning("configuration has no image attention; writing records without images")
    else:
        g = instance.scene.grid_side
        for t, step in enumerate(trace.steps, start=1):
            path = out_dir / f"step_{t:02d}.pgm"
            path.write_text(render_pgm(attention_pixels(step.image_weights, g, scale)), encoding="ascii")
            images.append(path)
    logger.info("wrote %d trace records and %d images to %s", len(records), len(images), out_dir)
    return TraceBundle(records_path, tuple(images), tuple(records))


def read_pgm(path: PathLike) -> np.ndarray:
    """Parse a plain PGM written by :func:`render_pgm`."""
    tokens = Path(path).read_text(encoding="ascii").split()
    if not tokens or tokens[0] != "P2":
        raise TraceError(f"{path} is not a plain PGM")
    width, height, _maxval = (int(v) for v in tokens[1:4])
    values = np.array([int(v) for v in tokens[4:]], dtype=np.int64)
    if values.size != width * height:
        raise TraceError(f"{path}: expected {width * height} pixels, found {values.size}")
    return values.reshape(height, width)


def read_records(path: PathLike) -> list[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = [
    "TraceBundle",
    "attention_pixels",
    "render_pgm",
    "check_normalisation",
    "build_records",
    "write_trace",
    "read_pgm",
    "read_records",
]
