"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .autodiff import ContractError
from .nn import ConfigError, Param


@dataclass(frozen=True)
class OptimHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


class AdamW:
    """One optimizer instance per parameter group; moments are keyed by parameter name."""

    def __init__(self, hyper: OptimHyper):
        self.hyper = hyper
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Param]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient; call zero_grads/backward first")
        h = self.hyper
        self.t += 1
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for name, p in params.items():
            adamw_update(p, self.m.setdefault(name, np.zeros_like(p.value)),
                         self.v.setdefault(name, np.zeros_like(p.value)), h, bc1, bc2)


def adamw_update(p: Param, m: np.ndarray, v: np.ndarray, h: OptimHyper, bc1: float, bc2: float) -> None:
    """In-place moment and parameter update for one tensor."""
    g = p.grad
    m *= h.beta1
    m += (1.0 - h.beta1) * g
    v *= h.beta2
    v += (1.0 - h.beta2) * (g * g)
    m_hat = m / bc1
    v_hat = v / bc2
    update = h.lr * m_hat / (np.sqrt(v_hat) + h.eps)
    if h.weight_decay:
        update = update + h.lr * h.weight_decay * p.value
    p.value -= update


def adamw_step(params: Dict[str, Param], state: AdamW, hyper: OptimHyper = None) -> None:
    """Functional entry point: one AdamW step over ``params`` using ``state``'s moments."""
    if hyper is not None and hyper != state.hyper:
        state.hyper = hyper
    state.step(params)
