"""The closed set of differentiable ops used by the model and the losses.

Every op computes its value eagerly with numpy. When any operand is traced,
the result is recorded on that operand's tape together with its
vector-Jacobian product.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.special import log_softmax as _log_softmax

from ..errors import DataError, DimensionError, NumericError, UsageError
from .tape import Tape, Tensor

ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    """An untraced tensor (no gradient flows into it)."""
    return Tensor(x)


def _tape_of(op: str, inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for tensor in inputs:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise UsageError(f"{op}: operands are traced on different tapes")
    return tape


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced a non-finite value")
    value = np.asarray(value, dtype=np.float64)
    if value.base is None:
        value.flags.writeable = False
    tape = _tape_of(op, inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(op, inputs, value, vjp)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """(..., k) @ (k, n) -> (..., n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.value, b.value
    k, n = B.shape

    def vjp(g):
        da = g @ B.T
        db = A.reshape(-1, k).T @ g.reshape(-1, n)
        return da, db

    return _emit("matmul", (a, b), A @ B, vjp)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    A, B = a.value, b.value
    return _emit(
        "mul", (a, b), A * B,
        lambda g: (_unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)),
    )


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = expit(x.value)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value <= 0.0):
        raise NumericError("log of a non-positive value")
    X = x.value
    return _emit("log", (x,), np.log(X), lambda g: (g / X,))


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Max-subtracted log-softmax along `axis`."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.value)):
        raise NumericError("log_softmax: non-finite logits")
    y = _log_softmax(x.value, axis=axis)
    p = np.exp(y)
    return _emit("log_softmax", (x,), y, lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.value)):
        raise NumericError("softmax: non-finite logits")
    y = np.exp(_log_softmax(x.value, axis=axis))
    return _emit("softmax", (x,), y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def sum(x: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.sum(x.value, axis=axis), vjp)


def mean(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else x.shape[axis]
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", (x,), np.mean(x.value, axis=axis), vjp)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, value, vjp)


def gather(table: ArrayLike, ids) -> Tensor:
    """Rows of `table` selected by integer `ids` (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"gather: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"gather: id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        grad = np.zeros(shape)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit("gather", (table,), table.value[ids], vjp)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _emit("reshape", (x,), value, lambda g: (g.reshape(old),))


def attach_loss(logits: Tensor, output) -> Tensor:
    """Scalar node whose gradient w.r.t. `logits` is `output.grad_logits`.

    `output` is a divergences.LossOutput computed from `logits.value`.
    """
    grad_logits = np.asarray(output.grad_logits)
    if grad_logits.shape != logits.shape:
        raise DimensionError(f"attach_loss: gradient {grad_logits.shape} vs logits {logits.shape}")
    return _emit("loss", (logits,), np.asarray(output.value, dtype=np.float64), lambda g: (g * grad_logits,))
