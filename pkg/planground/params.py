"""Learned weights of the grounding model and the layers built from them.

:class:`PlanParams` owns every trainable :class:`~planground.autodiff.Tensor`
by name.  The naming scheme groups weights by the part of the network
that uses them:

``word.*``   shared word-embedding table and its MLP
``qa.lstm``  encoder for question/answer pairs
``lang.lstm`` attention-free language LSTM (ablations)
``img.*``    image-level attention and its LSTM
``prop.*``   proposal projection MLP, proposal-level attention and its LSTM
``base.*``   fusion MLP of the attention-free image side (ablations)
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Optional

import numpy as np

from .autodiff import Mode, Tensor, concat, constant, dropout, lstm_cell, matmul, slice_along, tanh
from .constants import CATEGORY_DIM, DROPOUT, HIDDEN_SIZE, SPATIAL_DIM, VISUAL_DIM
from .exceptions import DimensionMismatchError, InvalidValueError

logger = logging.getLogger(__name__)

LSTM_GATES: tuple[str, ...] = ("i", "f", "o", "c")


@dataclass(frozen=True)
class ModelDims:
    """Sizes that determine every parameter shape."""

    vocab_size: int
    hidden_size: int = HIDDEN_SIZE
    visual_dim: int = VISUAL_DIM
    category_dim: int = CATEGORY_DIM
    attention_dim: Optional[int] = None

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.hidden_size, self.visual_dim) < 1 or self.category_dim < 0:
            raise InvalidValueError(f"invalid model dimensions {self}")
        if self.attention_dim is None:
            object.__setattr__(self, "attention_dim", self.hidden_size)

    @property
    def proposal_dim(self) -> int:
        return self.visual_dim + SPATIAL_DIM + self.category_dim

    @property
    def use_category(self) -> bool:
        return self.category_dim > 0

    def as_dict(self) -> dict[str, int]:
        return {k: int(v) for k, v in asdict(self).items()}


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Shape manifest for ``dims`` in canonical order."""
    h, a = dims.hidden_size, dims.attention_dim
    shapes: dict[str, tuple[int, ...]] = {
        "word.E": (dims.vocab_size, h),
        "word.W": (h, h),
        "word.b": (1, h),
    }
    lstm_inputs = {
        "qa.lstm": h,
        "lang.lstm": h,
        "img.lstm": h + dims.visual_dim,
        "prop.lstm": h + h,
    }
    for prefix, in_dim in lstm_inputs.items():
        for gate in LSTM_GATES:
            shapes[f"{prefix}.{gate}.W"] = (in_dim + h, h)
            shapes[f"{prefix}.{gate}.b"] = (1, h)
    shapes.update(
        {
            "img.W_v": (dims.visual_dim, a),
            "img.W_h": (h, a),
            "img.b": (1, a),
            "img.w_e": (a, 1),
            "prop.W_in": (dims.proposal_dim, h),
            "prop.b_in": (1, h),
            "prop.W_p": (h, a),
            "prop.W_h": (h, a),
            "prop.b": (1, a),
            "prop.w_e": (a, 1),
            "base.W_fuse": (h + dims.visual_dim, h),
            "base.b_fuse": (1, h),
        }
    )
    return shapes


class PlanParams:
    """Named collection of every trainable tensor.

    Args:
        dims: Model dimensions.
        arrays: One array per name of :func:`param_shapes`.
    """

    def __init__(self, dims: ModelDims, arrays: Mapping[str, np.ndarray]) -> None:
        expected = param_shapes(dims)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise DimensionMismatchError(f"parameter names differ: missing {missing}, extra {extra}")
        self.dims = dims
        self._tensors: dict[str, Tensor] = {}
        for name, shape in expected.items():
            array = np.asarray(arrays[name])
            if array.shape != shape:
                raise DimensionMismatchError(f"{name}: expected shape {shape}, got {array.shape}")
            if not np.all(np.isfinite(array)):
                raise InvalidValueError(f"{name} contains non-finite values")
            self._tensors[name] = Tensor(array, requires_grad=True, name=name)

    @classmethod
    def initialise(cls, dims: ModelDims, seed: int = 0, dtype: np.dtype = np.float32) -> "PlanParams":
        """Uniform ``(-a, a)`` weights with ``a = 1 / sqrt(fan_in)``, zero biases."""
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(dims).items():
            if shape[0] == 1:
                arrays[name] = np.zeros(shape, dtype=dtype)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(dims, arrays)

    # ------------------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    @property
    def dtype(self) -> np.dtype:
        return self._tensors["word.E"].dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        """Current gradients, zeros for tensors the last pass did not reach."""
        return {
            name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in self._tensors.items()
        }

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def copy(self) -> "PlanParams":
        return PlanParams(self.dims, {n: a.copy() for n, a in self.arrays().items()})

    def astype(self, dtype: np.dtype) -> "PlanParams":
        return PlanParams(self.dims, {n: a.astype(dtype) for n, a in self.arrays().items()})


# ─── Layers ──────────────────────────────────────────────────────────────────


@dataclass
class RunContext:
    """Mode, dropout rate and random source for one forward pass."""

    mode: Mode = "eval"
    dropout: float = DROPOUT
    rng: Optional[np.random.Generator] = field(default=None, repr=False)


EVAL = RunContext()


def ones(rows: int, cols: int, like: Tensor) -> Tensor:
    return constant(np.ones((rows, cols), dtype=like.dtype))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ W + b`` with the bias row repeated for every row of ``x``."""
    out = matmul(x, weight)
    if x.shape[0] != 1:
        bias = matmul(ones(x.shape[0], 1, bias), bias)
    return out + bias


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map followed by tanh."""
    return tanh(affine(x, weight, bias))


def mlp(x: Tensor, weight: Tensor, bias: Tensor, ctx: RunContext = EVAL) -> Tensor:
    """One MLP layer: affine, tanh, then dropout."""
    return dropout(dense(x, weight, bias), ctx.dropout, ctx.mode, ctx.rng)


def stack_lstm(params: PlanParams, prefix: str) -> tuple[Tensor, Tensor]:
    """Gate weights and biases of ``prefix`` side by side, in :data:`LSTM_GATES` order."""
    weight = concat([params[f"{prefix}.{gate}.W"] for gate in LSTM_GATES], axis=1)
    bias = concat([params[f"{prefix}.{gate}.b"] for gate in LSTM_GATES], axis=1)
    return weight, bias


def lstm_step(
    x: Tensor,
    h: Tensor,
    c: Tensor,
    params: PlanParams,
    prefix: str,
    stacked: Optional[tuple[Tensor, Tensor]] = None,
) -> tuple[Tensor, Tensor]:
    """One step of a standard LSTM cell.

    Every gate reads the concatenation ``[x; h]``.  ``stacked`` takes the
    output of :func:`stack_lstm` so loops can build it once.  Returns
    ``(h', c')``.
    """
    xh = concat([x, h], axis=1)
    expected = params[f"{prefix}.i.W"].shape[0]
    if xh.shape != (1, expected):
        raise DimensionMismatchError(
            f"{prefix}: input and state give width {xh.shape[1]}, cell expects {expected}"
        )
    weight, bias = stacked if stacked is not None else stack_lstm(params, prefix)
    hidden = c.shape[1]
    out = lstm_cell(xh, c, weight, bias)
    return slice_along(out, 0, hidden, axis=1), slice_along(out, hidden, 2 * hidden, axis=1)


__all__ = [
    "LSTM_GATES",
    "ModelDims",
    "param_shapes",
    "PlanParams",
    "RunContext",
    "EVAL",
    "ones",
    "affine",
    "dense",
    "mlp",
    "stack_lstm",
    "lstm_step",
]
