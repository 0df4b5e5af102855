import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from planground.autodiff import (
    Tensor,
    backward,
    concat,
    cross_entropy,
    dropout,
    elementwise,
    lstm_cell,
    matmul,
    numerical_gradient,
    relative_error,
    reshape,
    slice_along,
    softmax,
    tensor_sum,
)
from planground.exceptions import InvalidShapeError, InvalidValueError, PlanError


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_gradients(build, leaves, tol=1e-4) -> None:
    """Compare backward() against central differences for every leaf."""
    for leaf in leaves:
        leaf.grad = None
    backward(build())
    for leaf in leaves:
        numeric = numerical_gradient(lambda: build().item(), leaf.data)
        assert relative_error(leaf.grad, numeric) < tol


def _dims(rng, count: int) -> list[int]:
    return [int(d) for d in rng.integers(1, 6, size=count)]


# One loss-building recipe per op; shapes are drawn from the seed and each
# loss reduces to a scalar through a random projection so every output
# entry matters.
def _case_matmul(rng):
    m, k, n = _dims(rng, 3)
    a, b = _leaf(rng, m, k), _leaf(rng, k, n)
    w = Tensor(rng.normal(size=(m, n)))
    return (lambda: tensor_sum(elementwise("mul", matmul(a, b), w))), [a, b]


def _case_add(rng):
    shape = _dims(rng, 2)
    a, b = _leaf(rng, *shape), _leaf(rng, *shape)
    w = Tensor(rng.normal(size=shape))
    return (lambda: tensor_sum(elementwise("mul", elementwise("add", a, b), w))), [a, b]


def _case_scalar_broadcast(rng):
    shape = _dims(rng, 2)
    a, s = _leaf(rng, *shape), _leaf(rng, 1)
    w = Tensor(rng.normal(size=shape))
    return (lambda: tensor_sum(elementwise("mul", elementwise("mul", a, s), w))), [a, s]


def _case_tanh(rng):
    (n,) = _dims(rng, 1)
    a = _leaf(rng, n)
    w = Tensor(rng.normal(size=n))
    return (lambda: tensor_sum(elementwise("mul", elementwise("tanh", a), w))), [a]


def _case_sigmoid(rng):
    (n,) = _dims(rng, 1)
    a = _leaf(rng, n)
    w = Tensor(rng.normal(size=n))
    return (lambda: tensor_sum(elementwise("mul", elementwise("sigmoid", a), w))), [a]


def _case_softmax(rng):
    n = int(rng.integers(2, 8))
    a = _leaf(rng, n)
    w = Tensor(rng.normal(size=n))
    return (lambda: tensor_sum(elementwise("mul", softmax(a), w))), [a]


def _case_concat(rng):
    rows, left, right = _dims(rng, 3)
    a, b = _leaf(rng, rows, left), _leaf(rng, rows, right)
    w = Tensor(rng.normal(size=(rows, left + right)))
    return (lambda: tensor_sum(elementwise("mul", concat([a, b], axis=1), w))), [a, b]


def _case_reshape(rng):
    rows, cols = _dims(rng, 2)
    a = _leaf(rng, rows, cols)
    w = Tensor(rng.normal(size=(cols, rows)))
    return (lambda: tensor_sum(elementwise("mul", reshape(a, (cols, rows)), w))), [a]


def _case_slice(rng):
    rows, cols = _dims(rng, 2)
    axis = int(rng.integers(2))
    extent = (rows, cols)[axis]
    start = int(rng.integers(extent))
    stop = int(rng.integers(start + 1, extent + 1))
    a = _leaf(rng, rows, cols)
    piece = (stop - start, cols) if axis == 0 else (rows, stop - start)
    w = Tensor(rng.normal(size=piece))
    return (lambda: tensor_sum(elementwise("mul", slice_along(a, start, stop, axis), w))), [a]


def _case_lstm_cell(rng):
    rows, width, hidden = _dims(rng, 3)
    xh, c = _leaf(rng, rows, width), _leaf(rng, rows, hidden)
    weight, bias = _leaf(rng, width, 4 * hidden), _leaf(rng, 1, 4 * hidden)
    w = Tensor(rng.normal(size=(rows, 2 * hidden)))
    return (lambda: tensor_sum(elementwise("mul", lstm_cell(xh, c, weight, bias), w))), [xh, c, weight, bias]


def _case_dropout(rng):
    shape = _dims(rng, 2)
    a = _leaf(rng, *shape)
    w = Tensor(rng.normal(size=shape))
    mask_seed = int(rng.integers(1 << 30))

    def build():
        out = dropout(a, 0.3, "train", np.random.default_rng(mask_seed))
        return tensor_sum(elementwise("mul", out, w))

    return build, [a]


def _case_cross_entropy_logits(rng):
    n = int(rng.integers(2, 8))
    a = _leaf(rng, n)
    target = int(rng.integers(n))
    return (lambda: cross_entropy(a, target)), [a]


def _case_cross_entropy_probs(rng):
    n = int(rng.integers(2, 8))
    a = _leaf(rng, n)
    target = int(rng.integers(n))
    return (lambda: cross_entropy(softmax(a), target, from_logits=False)), [a]


CASES = [
    _case_matmul,
    _case_add,
    _case_scalar_broadcast,
    _case_tanh,
    _case_sigmoid,
    _case_softmax,
    _case_concat,
    _case_reshape,
    _case_slice,
    _case_lstm_cell,
    _case_dropout,
    _case_cross_entropy_logits,
    _case_cross_entropy_probs,
]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[6:])
def test_op_gradients_match_finite_differences(case, seed: int) -> None:
    build, leaves = case(np.random.default_rng(seed))
    _check_gradients(build, leaves)


def test_matmul_gradient_at_seed_seven() -> None:
    rng = np.random.default_rng(7)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    _check_gradients(lambda: tensor_sum(matmul(a, b)), [a, b], tol=1e-6)


def test_tanh_gradient_at_point_three() -> None:
    x = Tensor(np.array([0.3]), requires_grad=True)
    _check_gradients(lambda: tensor_sum(elementwise("tanh", x)), [x], tol=1e-6)
    assert x.grad[0] == pytest.approx(1.0 - np.tanh(0.3) ** 2, rel=1e-12)


def test_softmax_gradient_at_one_two_three() -> None:
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    w = Tensor(np.array([0.5, -1.0, 2.0]))
    _check_gradients(lambda: tensor_sum(elementwise("mul", softmax(x), w)), [x], tol=1e-6)


def test_matmul_example_values() -> None:
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_identity_and_zero_operands() -> None:
    m = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert matmul(Tensor(np.eye(2)), m).data.tolist() == [[3.0, 4.0], [5.0, 6.0]]
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]])).data.tolist() == [[0.0]]


def test_tanh_and_sigmoid_at_zero() -> None:
    zeros = Tensor(np.zeros((2, 3)))
    assert np.array_equal(elementwise("tanh", zeros).data, np.zeros((2, 3)))
    assert np.array_equal(elementwise("sigmoid", zeros).data, np.full((2, 3), 0.5))


def test_slice_rejects_bad_range() -> None:
    with pytest.raises(InvalidShapeError):
        slice_along(Tensor(np.ones((2, 3))), 2, 2, axis=0)
    with pytest.raises(InvalidShapeError):
        slice_along(Tensor(np.ones((2, 3))), 0, 4, axis=1)


def test_lstm_cell_matches_gate_equations() -> None:
    rng = np.random.default_rng(4)
    xh, c = rng.normal(size=(2, 5)), rng.normal(size=(2, 3))
    weight, bias = rng.normal(size=(5, 12)), rng.normal(size=(1, 12))
    out = lstm_cell(Tensor(xh), Tensor(c), Tensor(weight), Tensor(bias)).data
    pre = xh @ weight + bias

    def gate(k: int) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-pre[:, 3 * k : 3 * k + 3]))

    c_new = gate(1) * c + gate(0) * np.tanh(pre[:, 9:])
    assert np.allclose(out[:, 3:], c_new, atol=1e-12)
    assert np.allclose(out[:, :3], gate(2) * np.tanh(c_new), atol=1e-12)


def test_lstm_cell_rejects_mismatched_weights() -> None:
    with pytest.raises(InvalidShapeError):
        lstm_cell(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 2))), Tensor(np.ones((4, 6))), Tensor(np.ones((1, 8))))


def test_matmul_rejects_mismatched_inner_dims() -> None:
    with pytest.raises(InvalidShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_rejects_incompatible_shapes() -> None:
    with pytest.raises(InvalidShapeError):
        elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_elementwise_unknown_op() -> None:
    with pytest.raises(InvalidValueError):
        elementwise("relu", Tensor([1.0]))


def test_softmax_uniform_and_shift_invariant() -> None:
    assert np.allclose(softmax(Tensor(np.zeros(4))).data, 0.25)
    x = np.array([0.3, -1.2, 2.5])
    assert np.allclose(softmax(Tensor(x)).data, softmax(Tensor(x + 1000.0)).data, atol=1e-12)


def test_softmax_large_inputs_stay_finite() -> None:
    out = softmax(Tensor(np.array([1000.0, 0.0, -1000.0]))).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)


def test_softmax_widely_spread_entries_stay_positive() -> None:
    out = softmax(Tensor(np.array([0.0, -800.0, -2000.0]))).data
    assert np.all(out > 0.0)
    assert out.sum() == pytest.approx(1.0, abs=1e-6)
    assert out[0] == 1.0


def test_softmax_rejects_non_finite_input() -> None:
    with pytest.raises(InvalidValueError):
        softmax(Tensor(np.array([1.0, np.nan])))


def test_softmax_rejects_empty_vector() -> None:
    with pytest.raises(InvalidShapeError):
        softmax(Tensor(np.zeros(0)))


def test_cross_entropy_uniform_logits() -> None:
    loss = cross_entropy(Tensor(np.zeros(4)), 2)
    assert loss.item() == pytest.approx(np.log(4.0))


def test_cross_entropy_target_out_of_range() -> None:
    with pytest.raises(InvalidValueError):
        cross_entropy(Tensor(np.zeros(3)), 3)


def test_concat_single_part_is_identity() -> None:
    a = Tensor(np.ones((1, 2)))
    assert concat([a], axis=1) is a


def test_dropout_eval_mode_is_identity() -> None:
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert dropout(x, 0.4, "eval") is x


def test_dropout_train_mode_scales_survivors() -> None:
    rng = np.random.default_rng(0)
    values = rng.uniform(1.0, 2.0, size=100_000)
    out = dropout(Tensor(values), 0.4, "train", np.random.default_rng(1)).data
    kept = out != 0
    assert np.mean(~kept) == pytest.approx(0.4, abs=0.01)
    assert np.allclose(out[kept], values[kept] / 0.6)
    assert out.mean() == pytest.approx(values.mean(), rel=0.02)


def test_dropout_rate_zero_is_identity_in_both_modes() -> None:
    x = Tensor(np.arange(4.0))
    assert dropout(x, 0.0, "train", np.random.default_rng(0)) is x
    assert dropout(x, 0.0, "eval") is x


def test_dropout_rejects_unknown_mode_even_at_rate_zero() -> None:
    with pytest.raises(InvalidValueError, match="mode"):
        dropout(Tensor(np.ones(3)), 0.0, "predict")


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_invalid_rate(rate: float) -> None:
    with pytest.raises(InvalidValueError):
        dropout(Tensor(np.ones(3)), rate, "train", np.random.default_rng(0))


def test_dropout_train_mode_needs_rng() -> None:
    with pytest.raises(InvalidValueError):
        dropout(Tensor(np.ones(3)), 0.5, "train")


def test_dropout_gradient_uses_mask() -> None:
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=8), requires_grad=True)
    out = dropout(x, 0.5, "train", np.random.default_rng(1))
    backward(tensor_sum(out))
    mask = out.data / x.data
    assert np.allclose(x.grad, mask)


def test_backward_requires_scalar() -> None:
    with pytest.raises(InvalidShapeError):
        backward(Tensor(np.ones(3), requires_grad=True))


def test_backward_accumulates_across_calls() -> None:
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    w = Tensor(np.array([3.0, -1.0]))

    def loss():
        return tensor_sum(elementwise("mul", a, w))

    backward(loss())
    first = a.grad.copy()
    backward(loss())
    assert np.allclose(a.grad, 2 * first)


def test_shared_subexpression_gradient_counted_once_per_use() -> None:
    a = Tensor(np.array([0.5, -0.3]), requires_grad=True)
    t = elementwise("tanh", a)
    backward(tensor_sum(elementwise("add", t, t)))
    assert np.allclose(a.grad, 2 * (1 - np.tanh(a.data) ** 2))


def test_constants_receive_no_gradient() -> None:
    a = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.ones(2))
    backward(tensor_sum(elementwise("mul", a, c)))
    assert c.grad is None


def test_errors_share_a_root() -> None:
    assert issubclass(InvalidShapeError, PlanError)
    assert issubclass(InvalidShapeError, ValueError)
