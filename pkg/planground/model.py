"""Recurrent parallel attention over an image grid and object proposals.

Two LSTMs read the expression units ``m_1 .. m_L`` in step.  Before each
step the image branch attends over the grid cells and the proposal branch
attends over the projected proposals, both keyed on their own previous
hidden state; the attended context is concatenated to ``m_t`` as the
LSTM input.

The referring scorer runs after the last unit.  The proposal weights it
uses are the ones the proposal branch computes from its state once
``m_L`` has been read, i.e. the attention it would take for a following
unit.  Each proposal is scaled by its weight and compared by dot product
with the image branch's final hidden state; a softmax over those scores
gives the distribution over candidates.

The ablation configurations replace a disabled branch by its
attention-free counterpart: a plain LSTM over the expression whose last
state is fused with the mean-pooled grid (image side), and unweighted
proposal vectors (proposal side).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .autodiff import Tensor, concat, constant, matmul, mul, reshape, softmax, tanh
from .constants import ABLATIONS
from .encoding import (
    ExpressionEmbedding,
    ProposalFeature,
    VisualGrid,
    encode_expression,
    encode_scene,
    proposal_matrix,
)
from .exceptions import ConfigError, DimensionMismatchError, InvalidShapeError
from .params import EVAL, PlanParams, RunContext, affine, dense, lstm_step, mlp, ones, stack_lstm
from .shapeworld import GroundingInstance

logger = logging.getLogger(__name__)

Proposals = Union[np.ndarray, Sequence[ProposalFeature]]


class Attention(NamedTuple):
    """Attended context, normalised weights and the scores behind them."""

    context: Tensor
    weights: Tensor
    scores: Tensor


@dataclass
class RecurrentState:
    """LSTM state of one branch plus what it attended to on its last step."""

    h: Tensor
    c: Tensor
    z: Optional[Tensor] = None
    attention: Optional[Tensor] = None
    scores: Optional[Tensor] = None

    @classmethod
    def zeros(cls, hidden_size: int, dtype: np.dtype) -> "RecurrentState":
        return cls(
            h=constant(np.zeros((1, hidden_size), dtype=dtype)),
            c=constant(np.zeros((1, hidden_size), dtype=dtype)),
        )


@dataclass(frozen=True)
class StepTrace:
    """What both branches looked at while reading one unit.

    ``proposal_weights`` is the attention that fed this step's LSTM input;
    ``referring_weights`` is the proposal attention after the unit has been
    read.  ``running_probabilities`` is the referring distribution the model
    would output if the expression ended at this step; train-mode passes
    leave it ``None`` on every step but the last.
    """

    image_weights: Optional[np.ndarray]
    image_scores: Optional[np.ndarray]
    proposal_weights: Optional[np.ndarray]
    proposal_scores: Optional[np.ndarray]
    running_probabilities: Optional[np.ndarray]
    referring_weights: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AttentionTrace:
    steps: tuple[StepTrace, ...]
    probabilities: np.ndarray
    predicted: int

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class PlanOutput:
    scores: Tensor
    probabilities: Tensor
    trace: AttentionTrace


# ─── Attention ───────────────────────────────────────────────────────────────


class AttentionSource(NamedTuple):
    """One branch's attention inputs with the key projection precomputed."""

    features: Tensor
    keys: Tensor
    w_hidden: Tensor
    bias: Tensor
    w_score: Tensor


_ATTENTION_PARAMS: dict[str, tuple[str, str, str, str]] = {
    "image": ("img.W_v", "img.W_h", "img.b", "img.w_e"),
    "proposal": ("prop.W_p", "prop.W_h", "prop.b", "prop.w_e"),
}


def attention_source(branch: str, features: Tensor, params: PlanParams) -> AttentionSource:
    if features.ndim != 2 or features.shape[0] == 0:
        raise InvalidShapeError("cannot attend over an empty set")
    w_key, w_hidden, bias, w_score = (params[name] for name in _ATTENTION_PARAMS[branch])
    return AttentionSource(features, matmul(features, w_key), w_hidden, bias, w_score)


def attend(source: AttentionSource, h_prev: Tensor) -> Attention:
    """``e_i = w · tanh(W_k f_i + W_h h + b)``, softmax, then ``Σ weight_i f_i``."""
    n = source.features.shape[0]
    query = affine(h_prev, source.w_hidden, source.bias)
    hidden = tanh(source.keys + matmul(ones(n, 1, query), query))
    scores = reshape(matmul(hidden, source.w_score), (n,))
    weights = softmax(scores)
    context = matmul(reshape(weights, (1, n)), source.features)
    return Attention(context, weights, scores)


def _grid_tensor(grid: Union[VisualGrid, Tensor], params: PlanParams) -> Tensor:
    if isinstance(grid, Tensor):
        return grid
    if grid.cells.shape[1] != params.dims.visual_dim:
        raise DimensionMismatchError(
            f"grid cells have width {grid.cells.shape[1]}, model expects {params.dims.visual_dim}"
        )
    return constant(grid.cells, dtype=params.dtype)


def image_attend(grid: Union[VisualGrid, Tensor], h_prev: Tensor, params: PlanParams) -> Attention:
    """Soft attention over the ``K`` grid cells; ``z = Σ α_i v_i``."""
    return attend(attention_source("image", _grid_tensor(grid, params), params), h_prev)


def proposal_attend(proposals: Tensor, h_prev: Tensor, params: PlanParams) -> Attention:
    """Soft attention over the ``N`` projected proposals; ``z′ = Σ β_i p_i``."""
    return attend(attention_source("proposal", proposals, params), h_prev)


def project_proposals(proposals: Proposals, params: PlanParams) -> Tensor:
    """Map raw ``[u; s; c]`` rows to hidden-size vectors with the proposal MLP.

    The projection carries no dropout: the same vectors key the proposal
    attention and enter the referring scores.
    """
    if isinstance(proposals, np.ndarray):
        raw = proposals
    else:
        raw = proposal_matrix(proposals, params.dims.use_category)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise InvalidShapeError(f"proposals must be a non-empty N x D matrix, got {raw.shape}")
    if raw.shape[1] != params.dims.proposal_dim:
        raise DimensionMismatchError(
            f"proposal vectors have width {raw.shape[1]}, model expects {params.dims.proposal_dim}"
        )
    return dense(constant(raw, dtype=params.dtype), params["prop.W_in"], params["prop.b_in"])


# ─── Recurrence ──────────────────────────────────────────────────────────────

_BRANCHES: dict[str, str] = {"image": "img.lstm", "proposal": "prop.lstm"}


def _advance(
    m_t: Tensor,
    state: RecurrentState,
    attention: Attention,
    params: PlanParams,
    prefix: str,
    stacked: Optional[tuple[Tensor, Tensor]] = None,
) -> RecurrentState:
    x = concat([m_t, attention.context], axis=1)
    h, c = lstm_step(x, state.h, state.c, params, prefix, stacked)
    return RecurrentState(h, c, attention.context, attention.weights, attention.scores)


def attended_step(
    branch: str,
    m_t: Tensor,
    state: RecurrentState,
    context_source: Union[VisualGrid, Tensor],
    params: PlanParams,
) -> RecurrentState:
    """Attend with ``h_{t-1}``, then run one LSTM step on ``[m_t; z_t]``."""
    if branch not in _BRANCHES:
        raise ConfigError(f"unknown branch {branch!r}")
    if m_t.shape != (1, params.dims.hidden_size):
        raise DimensionMismatchError(f"unit vector has shape {m_t.shape}")
    features = _grid_tensor(context_source, params) if branch == "image" else context_source
    attention = attend(attention_source(branch, features, params), state.h)
    return _advance(m_t, state, attention, params, _BRANCHES[branch])


def plain_step(
    m_t: Tensor,
    state: RecurrentState,
    params: PlanParams,
    stacked: Optional[tuple[Tensor, Tensor]] = None,
) -> RecurrentState:
    """Attention-free language LSTM step used by the ablations."""
    h, c = lstm_step(m_t, state.h, state.c, params, "lang.lstm", stacked)
    return RecurrentState(h, c)


def _refer(query: Tensor, proposals: Tensor, weights: Optional[Tensor]) -> Tensor:
    """Dot product of ``query`` with every (optionally weight-scaled) proposal."""
    n, hidden = proposals.shape
    if weights is not None:
        spread = matmul(reshape(weights, (n, 1)), ones(1, hidden, proposals))
        proposals = mul(proposals, spread)
    return reshape(matmul(proposals, reshape(query, (hidden, 1))), (n,))


# ─── Forward passes ──────────────────────────────────────────────────────────


def _copy(t: Optional[Tensor]) -> Optional[np.ndarray]:
    return None if t is None else t.data.copy()


def run(
    config: str,
    grid: VisualGrid,
    proposals: Proposals,
    embedding: ExpressionEmbedding,
    params: PlanParams,
    ctx: RunContext = EVAL,
) -> PlanOutput:
    """Score every proposal under the given ablation configuration."""
    if config not in ABLATIONS:
        raise ConfigError(f"unknown ablation {config!r}; choose from {', '.join(ABLATIONS)}")
    if len(embedding) == 0:
        raise InvalidShapeError("expression embedding is empty")
    use_image = config in ("image_only", "full")
    use_proposal = config in ("proposal_only", "full")

    cells = _grid_tensor(grid, params)
    projected = project_proposals(proposals, params)
    hidden, dtype = params.dims.hidden_size, params.dtype
    image_state = RecurrentState.zeros(hidden, dtype)
    proposal_state = RecurrentState.zeros(hidden, dtype)
    language_state = RecurrentState.zeros(hidden, dtype)

    if use_image:
        image_source = attention_source("image", cells, params)
        image_lstm = stack_lstm(params, "img.lstm")
    else:
        language_lstm = stack_lstm(params, "lang.lstm")
        pooled = constant(grid.cells.mean(axis=0, keepdims=True), dtype=dtype)
    if use_proposal:
        proposal_source = attention_source("proposal", projected, params)
        proposal_lstm = stack_lstm(params, "prop.lstm")
        pending = attend(proposal_source, proposal_state.h)

    steps: list[StepTrace] = []
    last = len(embedding) - 1
    referring: Optional[Attention] = None
    for t, m_t in enumerate(embedding.vectors):
        if use_image:
            attention = attend(image_source, image_state.h)
            image_state = _advance(m_t, image_state, attention, params, "img.lstm", image_lstm)
        else:
            language_state = plain_step(m_t, language_state, params, language_lstm)
        if use_proposal:
            proposal_state = _advance(m_t, proposal_state, pending, params, "prop.lstm", proposal_lstm)
            # Keyed on the state after m_t; the next step attends with it.
            referring = attend(proposal_source, proposal_state.h)
            pending = referring

        running: Optional[np.ndarray] = None
        if t == last or ctx.mode == "eval":
            # Intermediate steps only feed the trace, so they never see dropout.
            step_ctx = ctx if t == last else EVAL
            if use_image:
                query = image_state.h
            else:
                fused = concat([language_state.h, pooled], axis=1)
                query = mlp(fused, params["base.W_fuse"], params["base.b_fuse"], step_ctx)
            scores = _refer(query, projected, referring.weights if use_proposal else None)
            probabilities = softmax(scores)
            running = probabilities.data.copy()
        steps.append(
            StepTrace(
                image_weights=_copy(image_state.attention) if use_image else None,
                image_scores=_copy(image_state.scores) if use_image else None,
                proposal_weights=_copy(proposal_state.attention) if use_proposal else None,
                proposal_scores=_copy(proposal_state.scores) if use_proposal else None,
                running_probabilities=running,
                referring_weights=_copy(referring.weights) if use_proposal else None,
            )
        )

    final = probabilities.data.copy()
    trace = AttentionTrace(tuple(steps), final, int(np.argmax(final)))
    return PlanOutput(scores, probabilities, trace)


def forward(
    grid: VisualGrid,
    proposals: Proposals,
    embedding: ExpressionEmbedding,
    params: PlanParams,
    ctx: RunContext = EVAL,
) -> tuple[Tensor, AttentionTrace]:
    """Full parallel-attention model: ``(P, trace)``."""
    output = run("full", grid, proposals, embedding, params, ctx)
    return output.probabilities, output.trace


def forward_ablation(
    config: str,
    grid: VisualGrid,
    proposals: Proposals,
    embedding: ExpressionEmbedding,
    params: PlanParams,
    ctx: RunContext = EVAL,
) -> tuple[Tensor, AttentionTrace]:
    """``baseline``, ``image_only``, ``proposal_only`` or ``full``."""
    output = run(config, grid, proposals, embedding, params, ctx)
    return output.probabilities, output.trace


def score_instance(
    instance: GroundingInstance,
    params: PlanParams,
    config: str = "full",
    ctx: RunContext = EVAL,
) -> PlanOutput:
    """Encode ``instance`` and run the model on it."""
    grid, proposals = encode_scene(instance.scene, params.dims.use_category)
    embedding = encode_expression(instance.expression, params, ctx)
    return run(config, grid, proposals, embedding, params, ctx)


__all__ = [
    "Attention",
    "AttentionSource",
    "RecurrentState",
    "StepTrace",
    "AttentionTrace",
    "PlanOutput",
    "attention_source",
    "attend",
    "image_attend",
    "proposal_attend",
    "project_proposals",
    "attended_step",
    "plain_step",
    "run",
    "forward",
    "forward_ablation",
    "score_instance",
]
