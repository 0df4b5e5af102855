"""Feature carriers for scenes and expressions.

Scenes become a global visual grid ``V`` (one vector per cell) and one
proposal feature ``p_i = [u_i; s_i; c_i]`` per object.  Expressions
become one hidden-size vector per unit: words go through the shared
embedding table and its MLP, question/answer pairs additionally through
a dedicated LSTM whose last hidden state represents the pair.

The visual features are a deterministic attribute signature rather than
CNN activations: one-hot colour, shape and size blocks followed by the
two cell-centre coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, constant, matmul, slice_along
from .constants import ATTRIBUTE_DIM, CATEGORY_DIM, COLORS, SHAPES, SIZES, SPATIAL_DIM, VISUAL_DIM
from .exceptions import DimensionMismatchError, ExpressionParseError, InvalidBoxError, VocabularyError
from .params import EVAL, PlanParams, RunContext, lstm_step, mlp, stack_lstm
from .shapeworld import Box, ExpressionSeq, QAPair, Scene, SceneObject, Word

_BLOCKS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("color", COLORS),
    ("shape", SHAPES),
    ("size", SIZES),
)


@dataclass(frozen=True)
class VisualGrid:
    """``K = g²`` cell vectors of width ``D_v``."""

    cells: np.ndarray
    grid_side: int

    def __post_init__(self) -> None:
        if self.cells.ndim != 2 or self.cells.shape[0] != self.grid_side**2:
            raise DimensionMismatchError(
                f"grid of side {self.grid_side} needs {self.grid_side ** 2} cells, "
                f"got array of shape {self.cells.shape}"
            )
        if not np.all(np.isfinite(self.cells)):
            raise DimensionMismatchError("grid features must be finite")

    @property
    def num_cells(self) -> int:
        return int(self.cells.shape[0])


@dataclass(frozen=True)
class ProposalFeature:
    visual: np.ndarray
    spatial: np.ndarray
    category: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.spatial.shape != (SPATIAL_DIM,):
            raise InvalidBoxError(f"spatial vector must have {SPATIAL_DIM} entries")

    def vector(self, use_category: bool = True) -> np.ndarray:
        parts = [self.visual, self.spatial]
        if use_category and self.category is not None:
            parts.append(self.category)
        return np.concatenate(parts)


@dataclass(frozen=True)
class ExpressionEmbedding:
    """Vectors ``m_1 .. m_L``, each a ``1 × H`` tensor."""

    vectors: tuple[Tensor, ...]

    def __len__(self) -> int:
        return len(self.vectors)


# ─── Spatial encoding ────────────────────────────────────────────────────────


def encode_spatial(box: Box, image_dims: tuple[float, float]) -> np.ndarray:
    """Return ``[x_min, y_min, x_max, y_max, x_c, y_c, w, h]`` in image-centred units.

    The image spans ``[-1, 1]`` on both axes with its centre at the origin.

    Raises:
        InvalidBoxError: The box has zero area or leaves the image.
    """
    width, height = image_dims
    x_min, y_min, x_max, y_max = (float(v) for v in box)
    if x_max <= x_min or y_max <= y_min:
        raise InvalidBoxError(f"degenerate box {box}")
    if x_min < 0 or y_min < 0 or x_max > width or y_max > height:
        raise InvalidBoxError(f"box {box} lies outside a {width}x{height} image")
    x0, x1 = 2.0 * x_min / width - 1.0, 2.0 * x_max / width - 1.0
    y0, y1 = 2.0 * y_min / height - 1.0, 2.0 * y_max / height - 1.0
    return np.array(
        [x0, y0, x1, y1, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0],
        dtype=np.float64,
    )


# ─── Visual features ─────────────────────────────────────────────────────────


def attribute_signature(obj: Optional[SceneObject]) -> np.ndarray:
    """Concatenated colour/shape/size one-hots, all zero for an empty cell."""
    signature = np.zeros(ATTRIBUTE_DIM, dtype=np.float64)
    if obj is None:
        return signature
    offset = 0
    for name, values in _BLOCKS:
        signature[offset + values.index(getattr(obj, name))] = 1.0
        offset += len(values)
    return signature


def decode_attributes(vector: np.ndarray) -> Optional[dict[str, str]]:
    """Argmax per attribute block; ``None`` when the block is empty."""
    attributes: dict[str, str] = {}
    offset = 0
    for name, values in _BLOCKS:
        block = vector[offset : offset + len(values)]
        if not np.any(block):
            return None
        attributes[name] = values[int(np.argmax(block))]
        offset += len(values)
    return attributes


def _cell_centre(row: int, col: int, grid_side: int) -> tuple[float, float]:
    return (2.0 * (col + 0.5) / grid_side - 1.0, 2.0 * (row + 0.5) / grid_side - 1.0)


def synth_visual_features(scene: Scene) -> tuple[VisualGrid, list[ProposalFeature]]:
    """Deterministic stand-in for CNN features of ``scene``.

    Grid cells carry the signature of the object on them (zeros when empty)
    plus the cell-centre coordinates.  Each proposal's visual part is its
    object's signature with the coordinate slots left at zero, so
    attribute-identical objects differ only in their spatial vectors.
    """
    g = scene.grid_side
    cells = np.zeros((g * g, VISUAL_DIM), dtype=np.float64)
    for row in range(g):
        for col in range(g):
            k = row * g + col
            cells[k, :ATTRIBUTE_DIM] = attribute_signature(scene.object_at(row, col))
            cells[k, ATTRIBUTE_DIM:] = _cell_centre(row, col, g)
    proposals = []
    for obj, box in zip(scene.objects, scene.proposals):
        visual = np.zeros(VISUAL_DIM, dtype=np.float64)
        visual[:ATTRIBUTE_DIM] = attribute_signature(obj)
        category = np.zeros(CATEGORY_DIM, dtype=np.float64)
        category[SHAPES.index(obj.shape)] = 1.0
        proposals.append(ProposalFeature(visual, encode_spatial(box, scene.image_dims), category))
    return VisualGrid(cells, g), proposals


def proposal_matrix(proposals: Sequence[ProposalFeature], use_category: bool = True) -> np.ndarray:
    """Stack proposal vectors into an ``N × D_p`` array."""
    if not proposals:
        raise DimensionMismatchError("at least one proposal is required")
    return np.stack([p.vector(use_category) for p in proposals])


# ─── Expression encoding ─────────────────────────────────────────────────────


def embed_tokens(tokens: Sequence[int], params: PlanParams, ctx: RunContext = EVAL) -> Tensor:
    """One-hot × embedding table, then the word MLP, one row per token."""
    vocab_size = params.dims.vocab_size
    if not tokens:
        raise ExpressionParseError("no tokens to embed")
    bad = [t for t in tokens if not 0 <= t < vocab_size]
    if bad:
        raise VocabularyError(f"token id {bad[0]} outside vocabulary of {vocab_size}")
    one_hot = np.zeros((len(tokens), vocab_size), dtype=params.dtype)
    one_hot[np.arange(len(tokens)), list(tokens)] = 1.0
    embedded = matmul(constant(one_hot), params["word.E"])
    return mlp(embedded, params["word.W"], params["word.b"], ctx)


def embed_word(token: int, params: PlanParams, ctx: RunContext = EVAL) -> Tensor:
    """Embedding of a single token as a ``1 × H`` row."""
    return embed_tokens([token], params, ctx)


def _run_qa_lstm(rows: Tensor, params: PlanParams, stacked: tuple[Tensor, Tensor]) -> Tensor:
    hidden = params.dims.hidden_size
    h = constant(np.zeros((1, hidden), dtype=params.dtype))
    c = constant(np.zeros((1, hidden), dtype=params.dtype))
    for k in range(rows.shape[0]):
        h, c = lstm_step(slice_along(rows, k, k + 1), h, c, params, "qa.lstm", stacked)
    return h


def encode_qa_pair(pair: QAPair, params: PlanParams, ctx: RunContext = EVAL) -> Tensor:
    """Run the QA LSTM over the pair's word embeddings; return the last ``h``."""
    if not pair.tokens:
        raise ExpressionParseError("cannot encode an empty QA pair")
    rows = embed_tokens(pair.tokens, params, ctx)
    return _run_qa_lstm(rows, params, stack_lstm(params, "qa.lstm"))


def encode_expression(
    seq: ExpressionSeq, params: PlanParams, ctx: RunContext = EVAL
) -> ExpressionEmbedding:
    """Encode each unit independently; the output keeps the sequence length.

    Every token of the expression is embedded in one pass and the rows are
    then handed out unit by unit.
    """
    if seq.vocabulary_size > params.dims.vocab_size:
        raise DimensionMismatchError(
            f"expression vocabulary {seq.vocabulary_size} exceeds model vocabulary "
            f"{params.dims.vocab_size}"
        )
    rows = embed_tokens([tok for unit in seq.units for tok in unit.tokens], params, ctx)
    stacked = None
    vectors = []
    offset = 0
    for unit in seq.units:
        if isinstance(unit, Word):
            vectors.append(slice_along(rows, offset, offset + 1))
            offset += 1
        else:
            if stacked is None:
                stacked = stack_lstm(params, "qa.lstm")
            width = len(unit.tokens)
            vectors.append(_run_qa_lstm(slice_along(rows, offset, offset + width), params, stacked))
            offset += width
    return ExpressionEmbedding(tuple(vectors))


def encode_scene(scene: Scene, use_category: bool = True) -> tuple[VisualGrid, np.ndarray]:
    """Grid plus the stacked proposal matrix for ``scene``."""
    grid, proposals = synth_visual_features(scene)
    return grid, proposal_matrix(proposals, use_category)


__all__ = [
    "VisualGrid",
    "ProposalFeature",
    "ExpressionEmbedding",
    "encode_spatial",
    "attribute_signature",
    "decode_attributes",
    "synth_visual_features",
    "proposal_matrix",
    "embed_tokens",
    "embed_word",
    "encode_qa_pair",
    "encode_expression",
    "encode_scene",
]
