import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from planground.dataset import generate_split
from planground.exceptions import InvalidValueError, TraceError
from planground.model import AttentionTrace, StepTrace, score_instance
from planground.params import ModelDims, PlanParams
from planground.shapeworld import GenerationConfig
from planground.trace import (
    attention_pixels,
    build_records,
    check_normalisation,
    read_pgm,
    read_records,
    render_pgm,
    write_trace,
)


def _params(hidden: int = 6) -> PlanParams:
    return PlanParams.initialise(ModelDims(vocab_size=26, hidden_size=hidden), seed=1, dtype=np.float64)


def _dialog_instance():
    return generate_split(0, "test", 1, GenerationConfig(kinds=("dialog",), dialog_rounds=5))[0]


def test_attention_pixels_are_linear_in_weight() -> None:
    pixels = attention_pixels(np.array([0.5, 0.25, 0.25, 0.0]), 2, scale=1)
    assert pixels.tolist() == [[255, 128], [128, 0]]


def test_attention_pixels_upscale() -> None:
    pixels = attention_pixels(np.full(9, 1 / 9), 3, scale=4)
    assert pixels.shape == (12, 12)
    assert np.all(pixels == 255)


def test_attention_pixels_reject_bad_input() -> None:
    with pytest.raises(TraceError):
        attention_pixels(np.ones(5) / 5, 2)
    with pytest.raises(InvalidValueError):
        attention_pixels(np.ones(4) / 4, 2, scale=0)


def test_pgm_round_trip(tmp_path: Path) -> None:
    pixels = np.arange(12).reshape(3, 4) * 20
    path = tmp_path / "x.pgm"
    path.write_text(render_pgm(pixels))
    assert path.read_text().startswith("P2\n4 3\n255\n")
    assert np.array_equal(read_pgm(path), pixels)


def test_write_trace_one_image_and_record_per_step(tmp_path: Path) -> None:
    instance = _dialog_instance()
    trace = score_instance(instance, _params()).trace
    bundle = write_trace(tmp_path, instance, trace, scale=2)
    assert len(bundle.image_paths) == 5
    assert [p.name for p in bundle.image_paths] == [f"step_0{t}.pgm" for t in range(1, 6)]

    records = read_records(bundle.records_path)
    assert len(records) == 5
    assert [r["step"] for r in records] == [1, 2, 3, 4, 5]
    assert all("final" not in r for r in records[:-1])
    last = records[-1]
    assert last["final"] is True
    assert last["target"] == instance.target_index
    assert last["predicted"] == trace.predicted
    assert last["correct"] == (trace.predicted == instance.target_index)
    assert last["running_p"] == pytest.approx(list(trace.probabilities), abs=1e-8)

    g = instance.scene.grid_side
    for path, step in zip(bundle.image_paths, trace.steps):
        pixels = read_pgm(path)
        assert pixels.shape == (2 * g, 2 * g)
        assert pixels.max() == 255
        expected = np.floor(step.image_weights / step.image_weights.max() * 255 + 0.5)
        assert np.array_equal(pixels[::2, ::2].ravel(), expected.astype(np.int64))


def test_records_rank_top_proposals() -> None:
    instance = generate_split(4, "test", 1)[0]
    trace = score_instance(instance, _params()).trace
    records = build_records(instance, trace, top_k=3)
    for record, step in zip(records, trace.steps):
        top = record["beta_top"]
        assert len(top) == min(3, instance.scene.num_proposals)
        weights = [entry["weight"] for entry in top]
        assert weights == sorted(weights, reverse=True)
        assert top[0]["proposal"] == int(np.argmax(step.referring_weights))
        assert len(record["alpha"]) == instance.scene.grid_side**2
        assert record["text"]


def test_baseline_trace_writes_no_images(tmp_path: Path, caplog) -> None:
    instance = _dialog_instance()
    trace = score_instance(instance, _params(), "baseline").trace
    with caplog.at_level(logging.WARNING, logger="planground.trace"):
        bundle = write_trace(tmp_path, instance, trace)
    assert bundle.image_paths == ()
    assert not list(tmp_path.glob("*.pgm"))
    assert len(read_records(bundle.records_path)) == 5
    assert any("no image attention" in r.getMessage() for r in caplog.records)


def test_unnormalised_weights_are_rejected(tmp_path: Path) -> None:
    bad = StepTrace(
        image_weights=np.array([0.6, 0.6]),
        image_scores=None,
        proposal_weights=None,
        proposal_scores=None,
        running_probabilities=np.array([0.5, 0.5]),
    )
    trace = AttentionTrace((bad,), np.array([0.5, 0.5]), 0)
    with pytest.raises(TraceError):
        check_normalisation(trace)


def test_step_count_must_match_expression() -> None:
    instance = _dialog_instance()
    trace = score_instance(instance, _params()).trace
    short = AttentionTrace(trace.steps[:2], trace.probabilities, trace.predicted)
    with pytest.raises(TraceError):
        build_records(instance, short)
