"""Central finite-difference verification of tape gradients."""

from typing import Callable, Optional

import numpy as np

from ..errors import ConfigError, UsageError
from .tape import Tape, Tensor

MAX_EPS = 1e-3


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1, |analytic|) over coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise UsageError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / scale))


def numeric_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    eps: float = 1e-5,
    coordinates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of a scalar function; only `coordinates` (flat
    indices) are probed when given, the rest stay zero."""
    if not 0.0 < eps <= MAX_EPS:
        raise ConfigError(f"eps must lie in (0, {MAX_EPS}], got {eps}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if coordinates is None else coordinates
    for i in probe:
        saved = flat[i]
        flat[i] = saved + eps
        upper = fn(x)
        flat[i] = saved - eps
        lower = fn(x)
        flat[i] = saved
        grad[i] = (upper - lower) / (2.0 * eps)
    return grad.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Compare the tape gradient of scalar `f` at `x` with central differences.

    :param f: builds a scalar Tensor from its input using numerics.ops
    :param x: point to check at
    :param eps: finite-difference step, in (0, 1e-3]
    :return: max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if not 0.0 < eps <= MAX_EPS:
        raise ConfigError(f"eps must lie in (0, {MAX_EPS}], got {eps}")
    tape = Tape()
    leaf = tape.watch(x, name="x")
    loss = f(leaf)
    tape.backward(loss)
    analytic = tape.grad(leaf)

    def value_at(point: np.ndarray) -> float:
        return f(Tensor(point)).item()

    numeric = numeric_gradient(value_at, leaf.value, eps)
    return max_relative_error(analytic, numeric)
