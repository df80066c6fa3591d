"""Finite-difference checks for every training loss and for the full model."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .corpus import ParallelCorpus, make_batch
from .divergences import LossKind, loss_for_kind
from .numerics import grad_check, ops
from .numerics.tape import Tape, Tensor
from .seq2seq import Seq2SeqConfig, Seq2SeqParams, forward_teacher_forced, init_params

log = logging.getLogger(__name__)

LOSS_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
EPS = 1e-5


@dataclass(frozen=True)
class GradCheck:
    name: str
    # one trial: returns the max relative error at a random point
    trial: Callable[[np.random.Generator], float]
    trials: int = 100
    tolerance: float = LOSS_TOLERANCE


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def line(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return f"{self.name:<16} max_rel_err={self.max_error:.3e}  tol={self.tolerance:.0e}  {verdict}"


@dataclass(frozen=True)
class SuiteReport:
    results: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> List[str]:
        return [r.line() for r in self.results]


def loss_trial(
    kind: LossKind,
    smoothing: float = 0.0,
    beta: Optional[float] = None,
    vocab_size: int = 8,
    n_rows: int = 4,
) -> Callable[[np.random.Generator], float]:
    def trial(rng: np.random.Generator) -> float:
        logits = rng.normal(scale=1.5, size=(n_rows, vocab_size))
        targets = rng.integers(0, vocab_size, size=n_rows)
        # cDSD sees a controller-range beta that changes every trial
        b = rng.uniform(0.85, 0.95) if kind is LossKind.CDSD else beta

        def f(x: Tensor) -> Tensor:
            return ops.attach_loss(x, loss_for_kind(kind, x.value, targets, smoothing=smoothing, beta=b))

        return grad_check(f, logits, eps=EPS)

    return trial


def _model_loss(params: Seq2SeqParams, batch, tape: Optional[Tape] = None):
    trace = forward_teacher_forced(params, batch, tape)
    output = loss_for_kind(LossKind.DSD, trace.logits.value, trace.targets, smoothing=0.1, beta=0.5)
    return trace, output


def model_trial(samples: int = 20) -> Callable[[np.random.Generator], float]:
    """Gradient of a DSD loss through the whole encoder-decoder, probed at
    `samples` random parameter coordinates on a two-sentence batch."""

    def trial(rng: np.random.Generator) -> float:
        config = Seq2SeqConfig(
            src_vocab=8, tgt_vocab=8, emb_dim=4, hidden_dim=5, attn_dim=3, seed=int(rng.integers(2**31))
        )
        params = init_params(config)
        # larger weights than the default init so gradients are not tiny
        params = params.with_arrays({name: a * 5.0 for name, a in params.arrays.items()})
        pairs = tuple(
            (tuple(int(t) for t in rng.integers(4, 8, size=length)), tuple(int(t) for t in rng.integers(4, 8, size=length)))
            for length in (3, 2)
        )
        batch = make_batch(ParallelCorpus(pairs, 8, 8), [0, 1])

        tape = Tape()
        trace, output = _model_loss(params, batch, tape)
        tape.backward(ops.attach_loss(trace.logits, output))

        worst = 0.0
        names = params.names()
        for _ in range(samples):
            name = names[int(rng.integers(len(names)))]
            index = int(rng.integers(params[name].size))
            analytic = tape.grad(trace.weights[name]).reshape(-1)[index]
            values = []
            for sign in (1.0, -1.0):
                array = params[name].copy()
                array.reshape(-1)[index] += sign * EPS
                values.append(_model_loss(params.with_arrays({name: array}), batch)[1].value)
            numeric = (values[0] - values[1]) / (2.0 * EPS)
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
        return worst

    return trial


def default_checks() -> List[GradCheck]:
    return [
        GradCheck("xent", loss_trial(LossKind.XENT)),
        GradCheck("xent_smooth0.1", loss_trial(LossKind.XENT_SMOOTH, smoothing=0.1)),
        GradCheck("dsd_beta0", loss_trial(LossKind.DSD, beta=0.0)),
        GradCheck("dsd_beta0.5", loss_trial(LossKind.DSD, beta=0.5)),
        GradCheck("dsd_beta1", loss_trial(LossKind.DSD, beta=1.0)),
        GradCheck("cdsd", loss_trial(LossKind.CDSD)),
        GradCheck("model_dsd", model_trial(), trials=3, tolerance=MODEL_TOLERANCE),
    ]


def run_suite(checks: Optional[Sequence[GradCheck]] = None, seed: int = 0) -> SuiteReport:
    """Run every check over its trials; a check's error is its worst trial."""
    results = []
    for check in checks if checks is not None else default_checks():
        rng = np.random.default_rng([seed, len(results)])
        worst = max(check.trial(rng) for _ in range(check.trials))
        results.append(CheckResult(check.name, worst, check.tolerance))
        log.debug(f"** gradcheck {check.name}: {worst:.3e}")
    return SuiteReport(results)
