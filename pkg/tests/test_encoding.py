import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from planground.autodiff import Tensor, constant
from planground.constants import ATTRIBUTE_DIM, CATEGORY_DIM, SPATIAL_DIM, VISUAL_DIM
from planground.encoding import (
    attribute_signature,
    decode_attributes,
    embed_tokens,
    embed_word,
    encode_expression,
    encode_qa_pair,
    encode_scene,
    encode_spatial,
    synth_visual_features,
)
from planground.exceptions import DimensionMismatchError, ExpressionParseError, InvalidBoxError, VocabularyError
from planground.params import ModelDims, PlanParams, lstm_step
from planground.shapeworld import ExpressionSeq, QAPair, Scene, SceneObject, Word, generate_scene


def _params(hidden: int = 8, seed: int = 0) -> PlanParams:
    return PlanParams.initialise(ModelDims(vocab_size=26, hidden_size=hidden), seed=seed, dtype=np.float64)


def _scene() -> Scene:
    objects = (
        SceneObject("red", "circle", "small", 0, 0),
        SceneObject("blue", "square", "large", 2, 3),
        SceneObject("red", "circle", "small", 3, 1),
    )
    return Scene(4, objects, 0)


def test_encode_spatial_full_image() -> None:
    s = encode_spatial((0.0, 0.0, 4.0, 4.0), (4.0, 4.0))
    assert np.allclose(s, [-1, -1, 1, 1, 0, 0, 2, 2])


def test_encode_spatial_top_left_cell() -> None:
    s = encode_spatial((0.0, 0.0, 1.0, 1.0), (4.0, 4.0))
    assert np.allclose(s, [-1, -1, -0.5, -0.5, -0.75, -0.75, 0.5, 0.5])


def test_encode_spatial_recovers_box() -> None:
    rng = np.random.default_rng(4)
    for _ in range(20):
        x0, y0 = rng.uniform(0, 4, size=2)
        x1, y1 = x0 + rng.uniform(0.1, 2), y0 + rng.uniform(0.1, 2)
        dims = (8.0, 6.0)
        s = encode_spatial((x0, y0, x1, y1), dims)
        back = ((s[:4] + 1.0) / 2.0) * np.array([dims[0], dims[1], dims[0], dims[1]])
        assert np.allclose(back, [x0, y0, x1, y1], atol=1e-12)
        assert s[6] == pytest.approx(s[2] - s[0])


@pytest.mark.parametrize(
    "box",
    [(1.0, 1.0, 1.0, 2.0), (2.0, 1.0, 1.0, 2.0), (-0.5, 0.0, 1.0, 1.0), (0.0, 0.0, 5.0, 1.0)],
)
def test_encode_spatial_rejects_bad_boxes(box) -> None:
    with pytest.raises(InvalidBoxError):
        encode_spatial(box, (4.0, 4.0))


def test_attribute_signature_round_trip() -> None:
    obj = SceneObject("yellow", "triangle", "large", 0, 0)
    sig = attribute_signature(obj)
    assert sig.sum() == 3
    assert decode_attributes(sig) == obj.attributes
    assert decode_attributes(attribute_signature(None)) is None


def test_synth_visual_features_layout() -> None:
    scene = _scene()
    grid, proposals = synth_visual_features(scene)
    assert grid.cells.shape == (16, VISUAL_DIM)
    assert grid.num_cells == 16
    assert len(proposals) == scene.num_proposals
    # Empty cells carry only their coordinates.
    assert not np.any(grid.cells[1, :ATTRIBUTE_DIM])
    # Occupied cell of object 1 (row 2, col 3).
    assert decode_attributes(grid.cells[2 * 4 + 3]) == scene.objects[1].attributes
    for p in proposals:
        assert p.spatial.shape == (SPATIAL_DIM,)
        assert p.category.shape == (CATEGORY_DIM,)
        assert p.vector().shape == (VISUAL_DIM + SPATIAL_DIM + CATEGORY_DIM,)
        assert p.vector(use_category=False).shape == (VISUAL_DIM + SPATIAL_DIM,)


def test_identical_objects_differ_only_in_spatial_part() -> None:
    _, proposals = synth_visual_features(_scene())
    a, b = proposals[0], proposals[2]
    assert np.array_equal(a.visual, b.visual)
    assert np.array_equal(a.category, b.category)
    assert not np.array_equal(a.spatial, b.spatial)


def test_synth_visual_features_deterministic() -> None:
    scene = generate_scene(np.random.default_rng(9))
    g1, p1 = synth_visual_features(scene)
    g2, p2 = synth_visual_features(scene)
    assert np.array_equal(g1.cells, g2.cells)
    assert all(np.array_equal(a.vector(), b.vector()) for a, b in zip(p1, p2))


def test_encode_scene_matrix_shape() -> None:
    grid, matrix = encode_scene(_scene(), use_category=False)
    assert matrix.shape == (3, VISUAL_DIM + SPATIAL_DIM)
    assert grid.grid_side == 4


def test_embed_word_shape_and_bounds() -> None:
    params = _params()
    assert embed_word(3, params).shape == (1, 8)
    with pytest.raises(VocabularyError):
        embed_word(26, params)


def test_embed_word_matches_manual_computation() -> None:
    params = _params()
    arrays = params.arrays()
    expected = np.tanh(arrays["word.E"][5:6] @ arrays["word.W"] + arrays["word.b"])
    assert np.allclose(embed_word(5, params).data, expected, atol=1e-12)


def test_encode_qa_pair_matches_manual_lstm() -> None:
    params = _params()
    pair = QAPair((0, 1, 2))
    h = constant(np.zeros((1, 8)))
    c = constant(np.zeros((1, 8)))
    for token in pair.tokens:
        h, c = lstm_step(embed_word(token, params), h, c, params, "qa.lstm")
    assert np.allclose(encode_qa_pair(pair, params).data, h.data, atol=1e-12)


def test_encode_expression_length_matches_units() -> None:
    params = _params()
    words = ExpressionSeq((Word(0), Word(4), Word(9)))
    dialog = ExpressionSeq.from_rounds(["is it red ? yes".split(), "is it a circle ? no".split()])
    assert len(encode_expression(words, params)) == 3
    assert len(encode_expression(dialog, params)) == 2
    assert all(v.shape == (1, 8) for v in encode_expression(dialog, params).vectors)


def test_encode_expression_rejects_larger_vocabulary() -> None:
    params = PlanParams.initialise(ModelDims(vocab_size=10, hidden_size=4), dtype=np.float64)
    with pytest.raises(DimensionMismatchError):
        encode_expression(ExpressionSeq((Word(0),)), params)


def test_encode_expression_differentiable() -> None:
    params = _params()
    out = encode_expression(ExpressionSeq.from_words(["red", "circle"]), params)
    assert all(isinstance(v, Tensor) and v.requires_grad for v in out.vectors)


def test_attribute_decoding_round_trips_over_scenes() -> None:
    rng = np.random.default_rng(11)
    for _ in range(1000):
        scene = generate_scene(rng)
        grid, proposals = synth_visual_features(scene)
        g = scene.grid_side
        for obj, proposal in zip(scene.objects, proposals):
            assert decode_attributes(attribute_signature(obj)) == obj.attributes
            assert decode_attributes(proposal.visual) == obj.attributes
            assert decode_attributes(grid.cells[obj.row * g + obj.col]) == obj.attributes
        empty = [k for k in range(g * g) if scene.object_at(k // g, k % g) is None]
        assert all(decode_attributes(grid.cells[k]) is None for k in empty)


def test_synth_visual_features_is_injective() -> None:
    rng = np.random.default_rng(12)
    seen: dict[bytes, tuple[SceneObject, ...]] = {}
    for _ in range(300):
        scene = generate_scene(rng)
        grid, proposals = synth_visual_features(scene)
        key = grid.cells.tobytes() + np.stack([p.vector() for p in proposals]).tobytes()
        assert seen.setdefault(key, scene.objects) == scene.objects
    base = _scene()
    recoloured = Scene(4, (SceneObject("green", "circle", "small", 0, 0), *base.objects[1:]), 0)
    assert not np.array_equal(synth_visual_features(base)[0].cells, synth_visual_features(recoloured)[0].cells)


def test_encode_expression_follows_unit_order() -> None:
    params = _params()
    rounds = ["is it red ? yes".split(), "is it a circle ? no".split(), "is it small ? yes".split()]
    dialog = ExpressionSeq.from_rounds(rounds)
    words = ExpressionSeq((Word(3), Word(7), Word(1), Word(12)))
    for expression, order in ((dialog, (2, 0, 1)), (words, (3, 1, 0, 2))):
        permuted = ExpressionSeq(tuple(expression.units[i] for i in order))
        original = encode_expression(expression, params).vectors
        shuffled = encode_expression(permuted, params).vectors
        for position, index in enumerate(order):
            assert np.allclose(shuffled[position].data, original[index].data, atol=1e-12)


def test_zero_embedding_gives_zero_vector() -> None:
    params = _params()
    params["word.E"].data[...] = 0.0
    params["word.b"].data[...] = 0.0
    for token in (0, 7, 25):
        assert np.array_equal(embed_word(token, params).data, np.zeros((1, 8)))


def test_zero_qa_lstm_gives_zero_vector() -> None:
    params = _params()
    for name in params:
        if name.startswith("qa.lstm."):
            params[name].data[...] = 0.0
    pair = QAPair((0, 1, 2, 3))
    assert np.array_equal(encode_qa_pair(pair, params).data, np.zeros((1, 8)))


def test_embed_tokens_matches_per_word_embedding() -> None:
    params = _params()
    rows = embed_tokens([4, 0, 4, 19], params).data
    for row, token in zip(rows, (4, 0, 4, 19)):
        assert np.allclose(row, embed_word(token, params).data[0], atol=1e-12)
    with pytest.raises(VocabularyError):
        embed_tokens([1, 26], params)
    with pytest.raises(ExpressionParseError):
        embed_tokens([], params)
