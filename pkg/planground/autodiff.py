"""Minimal dense-tensor computation graph with reverse-mode gradients.

The module provides exactly the operations the grounding model needs:
matrix products, elementwise add/mul/tanh/sigmoid, a stabilised softmax,
concatenation, slicing, reshaping, summation, a fused cross-entropy,
inverted dropout and a fused LSTM cell.  Every operation is a
:class:`Function` subclass; applying it to :class:`Tensor` inputs records
the function on the output so that :func:`backward` can replay the graph
in reverse topological order.

Broadcasting is deliberately limited to two cases: operands of equal
shape, and a single-element operand combined with a tensor of any shape.

A graph and its tensors belong to one thread during forward/backward.
Nothing in this module keeps global state, so independent graphs may be
built and differentiated concurrently.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Literal, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, logsumexp, softmax as _softmax

from .exceptions import InvalidShapeError, InvalidValueError

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]
ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class Function:
    """Base class for differentiable operations.

    Subclasses implement :meth:`forward` on raw arrays and :meth:`backward`,
    which maps the gradient of the loss with respect to the output to one
    gradient per input (``None`` for inputs that need none).
    """

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        """Run the forward pass and wrap the result in a graph node."""
        func = cls(*inputs)
        out_data = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = any(t.requires_grad for t in inputs)
        # Only nodes on a path to a trainable leaf keep their creator.
        return Tensor(out_data, requires_grad=requires_grad, _creator=func if requires_grad else None)


class Tensor:
    """A dense array participating in reverse-mode differentiation.

    Args:
        data: Values of the tensor.  Floating arrays keep their precision;
            anything else is converted to double precision.
        requires_grad: Whether gradients should be accumulated into
            :attr:`grad` during :func:`backward`.
        name: Optional label, used by parameter containers and in errors.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _creator: Optional[Function] = None,
    ) -> None:
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad: bool = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._creator = _creator

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operators
    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, _lift(-1.0, self))

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, -_lift(other, self))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    """Wrap ``data`` as a tensor that never receives gradients."""
    return Tensor(np.asarray(data, dtype=dtype) if dtype is not None else data)


def _lift(value: Union[Tensor, float], like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back onto a single-element operand."""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise InvalidShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ─── Operations ──────────────────────────────────────────────────────────────


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise InvalidShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad @ self.b.T, self.a.T @ grad


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(grad * self.b, self.a.shape), _reduce_to(grad * self.a, self.b.shape)


class Tanh(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * (1.0 - self.y * self.y),)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.y = expit(x)
        return self.y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.y * (1.0 - self.y),)


class Softmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 1 or x.size == 0:
            raise InvalidShapeError(f"softmax expects a non-empty vector, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidValueError("softmax input contains NaN or infinite values")
        # scipy subtracts the maximum before exponentiating.  Entries that
        # underflow are floored at the smallest normal number; the largest
        # entry still rounds to 1 once every other one is below epsilon.
        self.y = np.maximum(_softmax(x), np.finfo(x.dtype).tiny)
        return self.y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        y = self.y
        return (y * (grad - np.dot(grad, y)),)


class Concat(Function):
    def forward(self, *parts: np.ndarray, axis: int = 0) -> np.ndarray:
        first = parts[0]
        for part in parts[1:]:
            if part.ndim != first.ndim:
                raise InvalidShapeError("concat: parts differ in rank")
            off_axis = [d for d in range(first.ndim) if d != axis % first.ndim]
            if any(part.shape[d] != first.shape[d] for d in off_axis):
                raise InvalidShapeError(
                    f"concat: shapes {first.shape} and {part.shape} differ off axis {axis}"
                )
        self.axis = axis
        self.offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]
        return np.concatenate(parts, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(grad, self.offsets, axis=self.axis))


class Slice(Function):
    def forward(self, x: np.ndarray, start: int = 0, stop: int = 0, axis: int = 0) -> np.ndarray:
        if x.ndim != 2 or axis not in (0, 1) or not 0 <= start < stop <= x.shape[axis]:
            raise InvalidShapeError(f"slice: [{start}:{stop}] along axis {axis} of {x.shape}")
        self.in_shape, self.start, self.stop, self.axis = x.shape, start, stop, axis
        return x[start:stop] if axis == 0 else x[:, start:stop]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        if self.axis == 0:
            out[self.start : self.stop] = grad
        else:
            out[:, self.start : self.stop] = grad
        return (out,)


class LSTMCell(Function):
    """Standard LSTM cell on stacked gate weights.

    Inputs are ``[x; h]`` (``R × D``), the cell state ``c`` (``R × H``),
    the gate weights ``W`` (``D × 4H``, column blocks ``i, f, o, c``) and
    the bias row ``b`` (``1 × 4H``).  The output is ``[h'; c']`` side by
    side, ``R × 2H``.
    """

    def forward(self, xh: np.ndarray, c: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        hidden = c.shape[1]
        if (
            xh.ndim != 2
            or w.shape != (xh.shape[1], 4 * hidden)
            or b.shape != (1, 4 * hidden)
            or c.shape[0] != xh.shape[0]
        ):
            raise InvalidShapeError(
                f"lstm_cell: input {xh.shape}, cell {c.shape}, weights {w.shape}, bias {b.shape}"
            )
        pre = xh @ w + b
        i = expit(pre[:, :hidden])
        f = expit(pre[:, hidden : 2 * hidden])
        o = expit(pre[:, 2 * hidden : 3 * hidden])
        g = np.tanh(pre[:, 3 * hidden :])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        self.saved = (xh, c, w, i, f, o, g, tanh_c)
        return np.concatenate([o * tanh_c, c_new], axis=1)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        xh, c, w, i, f, o, g, tanh_c = self.saved
        hidden = c.shape[1]
        dh, dc = grad[:, :hidden], grad[:, hidden:]
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        d_pre = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c * f * (1.0 - f),
                dh * tanh_c * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ],
            axis=1,
        )
        return d_pre @ w.T, dc * f, xh.T @ d_pre, d_pre.sum(axis=0, keepdims=True)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: tuple[int, ...] = ()) -> np.ndarray:
        if int(np.prod(shape)) != x.size:
            raise InvalidShapeError(f"reshape: cannot view {x.shape} as {shape}")
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(self.in_shape),)


class Sum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.in_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(self.in_shape, grad.item(), dtype=grad.dtype),)


class CrossEntropy(Function):
    def forward(self, x: np.ndarray, target: int = 0, from_logits: bool = True) -> np.ndarray:
        if x.ndim != 1:
            raise InvalidShapeError(f"cross_entropy expects a vector, got shape {x.shape}")
        if not 0 <= target < x.size:
            raise InvalidValueError(f"target {target} out of range for {x.size} classes")
        self.x, self.target, self.from_logits = x, target, from_logits
        if from_logits:
            return np.asarray(logsumexp(x) - x[target], dtype=x.dtype)
        with np.errstate(divide="ignore"):
            return np.asarray(-np.log(x[target]), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if self.from_logits:
            local = _softmax(self.x)
            local[self.target] -= 1.0
        else:
            local = np.zeros_like(self.x)
            local[self.target] = -1.0 / self.x[self.target]
        return (local * grad,)


class Dropout(Function):
    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        self.mask = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.mask,)


# ─── Functional API ──────────────────────────────────────────────────────────


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``m×k`` and a ``k×n`` tensor."""
    return MatMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


_ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Apply one of ``add``, ``mul``, ``tanh`` or ``sigmoid`` by name."""
    try:
        func = _ELEMENTWISE[op]
    except KeyError:
        raise InvalidValueError(f"unknown elementwise op {op!r}") from None
    return func(*operands)


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over a vector."""
    return Softmax.apply(x)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate ``parts`` along ``axis``."""
    if not parts:
        raise InvalidShapeError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    return Concat.apply(*parts, axis=axis)


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def slice_along(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Rows (``axis=0``) or columns (``axis=1``) ``start:stop`` of a matrix."""
    return Slice.apply(x, start=int(start), stop=int(stop), axis=axis)


def lstm_cell(xh: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused LSTM cell; returns ``[h'; c']`` concatenated along columns."""
    return LSTMCell.apply(xh, c, weight, bias)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum every element of ``x`` into a scalar."""
    return Sum.apply(x)


def cross_entropy(x: Tensor, target: int, *, from_logits: bool = True) -> Tensor:
    """Negative log-probability of ``target``.

    With ``from_logits`` the softmax is fused into the loss
    (``logsumexp(x) - x[target]``); otherwise ``x`` already holds a
    probability distribution and the loss is ``-log x[target]``.
    """
    return CrossEntropy.apply(x, target=int(target), from_logits=from_logits)


def dropout(
    x: Tensor,
    rate: float,
    mode: Mode = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Inverted dropout.

    In ``"train"`` mode each entry is zeroed with probability ``rate`` and
    survivors are scaled by ``1 / (1 - rate)``; ``"eval"`` mode is the
    identity.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise InvalidValueError(f"unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise InvalidValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return Dropout.apply(x, mask=mask)


# ─── Reverse pass ────────────────────────────────────────────────────────────


def _topological_order(root: Tensor) -> list[Tensor]:
    """Return the gradient-carrying ancestors of ``root``, inputs first."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._creator is not None:
            for parent in node._creator.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-carrying ancestor of ``loss``.

    Gradients accumulate: calling :func:`backward` twice without zeroing
    doubles every gradient.
    """
    if loss.size != 1:
        raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # Contributions from this pass only; stored grads are updated as each
    # node is reached so repeated passes add exactly one gradient each.
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.grad is None:
            node.grad = np.array(grad, dtype=node.dtype, copy=True)
        else:
            node.grad += grad
        func = node._creator
        if func is None:
            continue
        for parent, parent_grad in zip(func.inputs, func.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


# ─── Gradient checking ───────────────────────────────────────────────────────


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``fn`` with respect to ``array``.

    ``array`` is perturbed in place and restored after each evaluation, so it
    must be the very buffer ``fn`` reads from.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + h
        plus = fn()
        array[idx] = original - h
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``‖a − n‖ / (‖a‖ + ‖n‖)``, or ``0`` when both vanish."""
    diff = float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    if scale < 1e-12:
        return diff
    return diff / scale


__all__ = [
    "Mode",
    "Function",
    "Tensor",
    "constant",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "elementwise",
    "softmax",
    "concat",
    "reshape",
    "slice_along",
    "lstm_cell",
    "tensor_sum",
    "cross_entropy",
    "dropout",
    "backward",
    "numerical_gradient",
    "relative_error",
]
