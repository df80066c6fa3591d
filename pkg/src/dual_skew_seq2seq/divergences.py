"""Cross entropy, KL, skew and dual skew divergences over a vocabulary.

Losses take model logits of shape (N, V) (one row per target position) and
return the value together with its gradient w.r.t. those logits. Every log
argument is floored as log(x + epsilon).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.special import log_softmax

from .errors import ConfigError, DataError, DimensionError

log = logging.getLogger(__name__)

EPSILON = 1e-12
DEFAULT_ALPHA = 0.01
DISTRIBUTION_TOLERANCE = 1e-9


class LossKind(str, Enum):
    XENT = "xent"
    XENT_SMOOTH = "xent_smooth"
    DSD = "dsd"
    CDSD = "cdsd"


class Aggregation(str, Enum):
    """How per-position skew values are folded into the controller sample u(t)."""
    MEAN_PER_TOKEN = "mean_per_token"
    SUM_PER_SENTENCE = "sum_per_sentence"


@dataclass(frozen=True)
class SkewConfig:
    alpha: float = DEFAULT_ALPHA
    epsilon: float = EPSILON

    def __post_init__(self) -> None:
        _check_alpha(self.alpha)
        if not self.epsilon > 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad_logits: np.ndarray
    # unweighted loss of each row, useful for per-sentence diagnostics
    per_row: np.ndarray


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")


def _check_beta(beta: float) -> None:
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")


def _check_pair(first: np.ndarray, second: np.ndarray) -> None:
    if first.shape != second.shape:
        raise DimensionError(f"distributions differ in shape: {first.shape} vs {second.shape}")
    if first.shape[-1] < 2:
        raise DimensionError("a vocabulary needs at least two entries")


def _check_distribution(rows: np.ndarray, name: str) -> None:
    if np.any(rows < 0.0) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > DISTRIBUTION_TOLERANCE):
        raise DataError(f"{name} rows must be nonnegative and sum to 1")


def one_hot(targets, vocab_size: int) -> np.ndarray:
    return smoothed_targets(targets, vocab_size, 0.0)


def smoothed_targets(targets, vocab_size: int, smoothing: float) -> np.ndarray:
    """(1 - smoothing) on the target id, smoothing / (V - 1) on every other id."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must lie in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab_size):
        raise DataError(f"target id out of range for vocabulary of {vocab_size}")
    q = np.full(targets.shape + (vocab_size,), smoothing / (vocab_size - 1))
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    return q


def token_weights(sentence_ids) -> np.ndarray:
    """Row weights for a per-sentence token mean followed by a batch mean."""
    sentence_ids = np.asarray(sentence_ids)
    if sentence_ids.size == 0:
        raise DataError("no target positions")
    _, inverse, counts = np.unique(sentence_ids, return_inverse=True, return_counts=True)
    return 1.0 / (counts[inverse] * len(counts))


def _row_weights(n_rows: int, weights: Optional[np.ndarray]) -> np.ndarray:
    if n_rows == 0:
        raise DataError("empty batch")
    if weights is None:
        return np.full(n_rows, 1.0 / n_rows)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_rows,):
        raise DimensionError(f"weights shape {weights.shape} does not match {n_rows} rows")
    return weights


def _softmax_rows(logits) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return np.exp(log_softmax(logits, axis=-1))


def _through_softmax(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - np.sum(p * grad_p, axis=-1, keepdims=True))


def cross_entropy(
    logits,
    targets,
    smoothing: float = 0.0,
    weights: Optional[np.ndarray] = None,
    epsilon: float = EPSILON,
) -> LossOutput:
    """-sum_k q_k log(p_k + epsilon), averaged with `weights` (default: row mean)."""
    p = _softmax_rows(logits)
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != p.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {p.shape[0]} rows")
    q = smoothed_targets(targets, p.shape[-1], smoothing)
    w = _row_weights(p.shape[0], weights)

    rows = -np.sum(q * np.log(p + epsilon), axis=-1)
    grad_p = -q / (p + epsilon)
    grad = _through_softmax(p, grad_p) * w[:, None]
    return LossOutput(value=float(np.dot(w, rows)), grad_logits=grad, per_row=rows)


def kl(q, p, direction: str = "forward", epsilon: float = EPSILON) -> Union[float, np.ndarray]:
    """D_KL(Q||P) ("forward") or D_KL(P||Q) ("reverse"), summed over the last axis."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _check_pair(q, p)
    if direction == "forward":
        first, second = q, p
    elif direction == "reverse":
        first, second = p, q
    else:
        raise ConfigError(f"direction must be 'forward' or 'reverse', got {direction!r}")
    return np.sum(first * (np.log(first + epsilon) - np.log(second + epsilon)), axis=-1)


def skew_divergence(first, second, alpha: float = DEFAULT_ALPHA, epsilon: float = EPSILON) -> Union[float, np.ndarray]:
    """D_KL(first || alpha * first + (1 - alpha) * second), over the last axis."""
    _check_alpha(alpha)
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    _check_pair(first, second)
    mixture = alpha * first + (1.0 - alpha) * second
    return np.sum(first * (np.log(first + epsilon) - np.log(mixture + epsilon)), axis=-1)


def dsd_loss(
    logits,
    q,
    alpha: float = DEFAULT_ALPHA,
    beta: float = 0.5,
    weights: Optional[np.ndarray] = None,
    epsilon: float = EPSILON,
) -> LossOutput:
    """Dual skew divergence in its computational form.

    Per row, with y = q and p = softmax(logits):
        -[ beta * y.log((1-a) p + a y)
           - (1-beta) * p.log(p)
           + (1-beta) * p.log((1-a) y + a p) ]
    The H(Q) term is omitted; it carries no gradient.
    """
    _check_alpha(alpha)
    _check_beta(beta)
    p = _softmax_rows(logits)
    y = np.atleast_2d(np.asarray(q, dtype=np.float64))
    _check_pair(y, p)
    _check_distribution(y, "Q")
    w = _row_weights(p.shape[0], weights)

    toward_data = (1.0 - alpha) * p + alpha * y + epsilon
    toward_model = (1.0 - alpha) * y + alpha * p + epsilon
    log_p = np.log(p + epsilon)
    log_model = np.log(toward_model)

    rows = -(
        beta * np.sum(y * np.log(toward_data), axis=-1)
        - (1.0 - beta) * np.sum(p * log_p, axis=-1)
        + (1.0 - beta) * np.sum(p * log_model, axis=-1)
    )
    grad_p = -(
        beta * y * (1.0 - alpha) / toward_data
        - (1.0 - beta) * (log_p + p / (p + epsilon))
        + (1.0 - beta) * (log_model + alpha * p / toward_model)
    )
    grad = _through_softmax(p, grad_p) * w[:, None]
    return LossOutput(value=float(np.dot(w, rows)), grad_logits=grad, per_row=rows)


def cdsd_loss(
    logits,
    q,
    alpha: float = DEFAULT_ALPHA,
    beta_t: float = 1.0,
    weights: Optional[np.ndarray] = None,
    epsilon: float = EPSILON,
) -> LossOutput:
    """dsd_loss with the controller's beta(t) as balanced weight."""
    return dsd_loss(logits, q, alpha=alpha, beta=beta_t, weights=weights, epsilon=epsilon)


def sample_divergence(
    p,
    q,
    alpha: float = DEFAULT_ALPHA,
    aggregation: Aggregation = Aggregation.MEAN_PER_TOKEN,
    sentence_ids=None,
    epsilon: float = EPSILON,
) -> float:
    """The controller's sample u(t): skew(Q, P) folded over a batch."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape[0] == 0:
        raise DataError("empty batch")
    per_row = skew_divergence(q, p, alpha, epsilon)
    aggregation = Aggregation(aggregation)
    if sentence_ids is None:
        # no grouping given: each row is its own sentence for the mean,
        # the whole batch is one sentence for the sum
        if aggregation is Aggregation.MEAN_PER_TOKEN:
            sentence_ids = np.arange(p.shape[0])
        else:
            sentence_ids = np.zeros(p.shape[0], dtype=np.int64)
    sentence_ids = np.asarray(sentence_ids)
    if sentence_ids.shape != (p.shape[0],):
        raise DimensionError("sentence_ids must give one id per row")

    if aggregation is Aggregation.MEAN_PER_TOKEN:
        return float(np.dot(token_weights(sentence_ids), per_row))
    _, inverse = np.unique(sentence_ids, return_inverse=True)
    totals = np.bincount(inverse, weights=per_row)
    return float(totals.mean())


def loss_for_kind(
    kind: LossKind,
    logits,
    targets,
    *,
    smoothing: float = 0.0,
    alpha: float = DEFAULT_ALPHA,
    beta: Optional[float] = None,
    weights: Optional[np.ndarray] = None,
    epsilon: float = EPSILON,
) -> LossOutput:
    """Dispatch a schedule phase's loss; DSD/cDSD use one-hot Q unless smoothing is set."""
    kind = LossKind(kind)
    if kind is LossKind.XENT:
        return cross_entropy(logits, targets, 0.0, weights, epsilon)
    if kind is LossKind.XENT_SMOOTH:
        return cross_entropy(logits, targets, smoothing, weights, epsilon)
    if beta is None:
        raise ConfigError(f"{kind.value} needs a balanced weight")
    vocab_size = np.shape(logits)[-1]
    q = smoothed_targets(np.asarray(targets).reshape(-1), vocab_size, smoothing)
    return dsd_loss(logits, q, alpha, beta, weights, epsilon)
