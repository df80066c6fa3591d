"""Nonlinear PI controller that tunes the balanced weight beta(t).

The controller holds the sampled divergence u(t) = skew(Q, P) near a set
point u*. With e(t) = u* - u(t):

    beta(t) = clamp(K_p / (1 + exp(e(t))) - K_i * sum_{j<=t} e(j) + beta_min,
                    beta_min, beta_max)

A divergence below the set point (e > 0) lowers beta(t), which shifts the
loss toward the model's own distribution; a divergence above it raises
beta(t) toward the data distribution. There is no derivative term.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Deque, Dict, List, Optional, Sequence

from scipy.special import expit

from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerConfig:
    """Gains and bounds.

    Attributes:
        set_point: target value u* for the divergence sample. None means
            "measure it from the ML phase"; a controller cannot run until it
            is resolved.
        k_p: gain of the sigmoid-shaped proportional term.
        k_i: gain of the integral term.
        beta_min: lower bound of beta(t), also the proportional offset.
        beta_max: upper bound of beta(t).
        window: errors are committed to the integral once per `window` steps.
        beta_init: beta(0), reported before the first step.
        anti_windup: stop integrating errors that push a clamped output
            further into saturation.
    """
    set_point: Optional[float] = None
    k_p: float = 0.01
    k_i: float = 0.0001
    beta_min: float = 0.85
    beta_max: float = 0.95
    window: int = 1
    beta_init: float = 1.0
    anti_windup: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta_min < self.beta_max <= 1.0:
            raise ConfigError(
                f"need 0 <= beta_min < beta_max <= 1, got {self.beta_min} and {self.beta_max}"
            )
        if self.k_p < 0.0 or self.k_i < 0.0:
            raise ConfigError("controller gains must be nonnegative")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.set_point is not None and not math.isfinite(self.set_point):
            raise ConfigError("set point must be finite")

    def with_set_point(self, set_point: float) -> "ControllerConfig":
        return replace(self, set_point=float(set_point))


@dataclass
class ControllerState:
    t: int = 0
    integral: float = 0.0
    last_beta: float = 1.0
    # errors of the current window not yet committed to the integral
    pending: Deque[float] = field(default_factory=deque)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "integral": self.integral,
            "last_beta": self.last_beta,
            "pending": list(self.pending),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ControllerState":
        return cls(
            t=int(data["t"]),
            integral=float(data["integral"]),
            last_beta=float(data["last_beta"]),
            pending=deque(float(e) for e in data.get("pending", [])),
        )


@dataclass(frozen=True)
class ControllerStep:
    t: int
    u: float
    error: float
    beta: float


class BetaController:
    """Single-owner PI controller; one per training run."""

    def __init__(self, config: ControllerConfig, state: Optional[ControllerState] = None) -> None:
        if config.set_point is None:
            raise ConfigError("controller set point is not resolved")
        self.config = config
        self.state = state if state is not None else ControllerState(last_beta=config.beta_init)
        self.logger = logging.getLogger(__name__)

    def proportional(self, error: float) -> float:
        # K_p / (1 + exp(e)) without overflow for large |e|
        return self.config.k_p * float(expit(-error))

    def _output(self, error: float, integral: float) -> float:
        return self.proportional(error) - self.config.k_i * integral + self.config.beta_min

    def step(self, u: float) -> ControllerStep:
        if not math.isfinite(u):
            raise NumericError("divergence sample is not finite", step=self.state.t)
        cfg, state = self.config, self.state
        error = cfg.set_point - u

        state.pending.append(error)
        integral = state.integral
        if len(state.pending) >= cfg.window:
            committed = sum(state.pending)
            candidate = self._output(error, integral + committed)
            winding_up = (candidate > cfg.beta_max and committed < 0.0) or (
                candidate < cfg.beta_min and committed > 0.0
            )
            if not (cfg.anti_windup and winding_up):
                integral += committed
            state.pending.clear()

        beta = min(cfg.beta_max, max(cfg.beta_min, self._output(error, integral)))
        record = ControllerStep(t=state.t, u=float(u), error=error, beta=beta)
        state.integral = integral
        state.last_beta = beta
        state.t += 1
        return record


def controller_init(config: ControllerConfig) -> BetaController:
    return BetaController(config)


def controller_step(controller: BetaController, u_t: float) -> float:
    return controller.step(u_t).beta


def simulate(config: ControllerConfig, u_sequence: Sequence[float]) -> List[ControllerStep]:
    """Replay a divergence trajectory through a fresh controller."""
    if len(u_sequence) == 0:
        raise DataError("simulate needs at least one divergence sample")
    controller = BetaController(config)
    return [controller.step(float(u)) for u in u_sequence]
