"""Adam and plain SGD over named parameter arrays, plus global-norm clipping.

Optimizers return fresh arrays; callers swap them into the parameter set.
"""

import logging
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

log = logging.getLogger(__name__)

Arrays = Mapping[str, np.ndarray]


def _check_grads(params: Arrays, grads: Arrays, step: Optional[int]) -> None:
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise DimensionError(f"missing gradient for {name}")
        if np.shape(grad) != np.shape(param):
            raise DimensionError(f"{name}: gradient shape {np.shape(grad)} vs parameter {np.shape(param)}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for {name}", step=step)


def global_norm(grads: Arrays) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Arrays, max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients together so their global norm is at most `max_norm`."""
    total_norm = global_norm(grads)
    if max_norm is None or total_norm <= max_norm:
        return dict(grads), total_norm
    scale = max_norm / total_norm
    return {name: g * scale for name, g in grads.items()}, total_norm


class Optimizer:
    kind = "base"

    def step(self, params: Arrays, grads: Arrays, lr: float, step: Optional[int] = None) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "state": {}, "buffers": {}}

    def load_state_dict(self, sd: Dict[str, Any]) -> None:
        if sd.get("kind") != self.kind:
            raise DimensionError(f"cannot load {sd.get('kind')} state into {self.kind}")


class SGD(Optimizer):
    kind = "sgd"

    def step(self, params: Arrays, grads: Arrays, lr: float, step: Optional[int] = None) -> Dict[str, np.ndarray]:
        _check_grads(params, grads, step)
        return {name: p - lr * grads[name] for name, p in params.items()}


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Arrays, grads: Arrays, lr: float, step: Optional[int] = None) -> Dict[str, np.ndarray]:
        _check_grads(params, grads, step)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        updated = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            if m.shape != p.shape:
                raise DimensionError(f"Adam moment shape mismatch for {name}")
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self.m[name], self.v[name] = m, v

            # bias correction
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            updated[name] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated

    def state_dict(self) -> Dict[str, Any]:
        buffers = {f"m/{name}": m for name, m in self.m.items()}
        buffers.update({f"v/{name}": v for name, v in self.v.items()})
        return {
            "kind": self.kind,
            "state": {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps},
            "buffers": buffers,
        }

    def load_state_dict(self, sd: Dict[str, Any]) -> None:
        super().load_state_dict(sd)
        state = sd["state"]
        self.t = int(state["t"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.m, self.v = {}, {}
        for key, array in sd.get("buffers", {}).items():
            slot, name = key.split("/", 1)
            (self.m if slot == "m" else self.v)[name] = np.array(array, dtype=np.float64)


def make_optimizer(kind: str) -> Optimizer:
    if kind == "adam":
        return Adam()
    if kind == "sgd":
        return SGD()
    raise ConfigError(f"unknown optimizer {kind!r}")


def adam_step(params: Arrays, grads: Arrays, state: Adam, lr: float, step: Optional[int] = None) -> Dict[str, np.ndarray]:
    return state.step(params, grads, lr, step)


def sgd_step(params: Arrays, grads: Arrays, lr: float, step: Optional[int] = None) -> Dict[str, np.ndarray]:
    return SGD().step(params, grads, lr, step)
