"""The ConsistentFeature regularizer.

The training set is split once into sides A and B. A discriminator head learns
to score A features at +1 and B features at -1 (hinge loss on raw scores), and
the backbone is penalized, on B samples only, for features the discriminator
can tell apart.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Deque, NamedTuple, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import SIDE_A, SIDE_B
from .nn import ConfigError, Model, discriminate


@dataclass(frozen=True)
class CFConfig:
    p: float = 0.5
    weight: float = 0.1
    history_len: int = 100
    desc_channel: int = 64
    warm_up: int = 1600
    shut_off: Optional[int] = None
    literal_penalty_sign: bool = False

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ConfigError(f"cf.p must lie in (0, 1), got {self.p}")
        if self.weight < 0:
            raise ConfigError(f"cf.weight must be >= 0, got {self.weight}")
        if self.history_len < 0:
            raise ConfigError(f"cf.history_len must be >= 0, got {self.history_len}")
        if self.desc_channel < 1:
            raise ConfigError(f"cf.desc_channel must be >= 1, got {self.desc_channel}")
        if self.warm_up < 0:
            raise ConfigError(f"cf.warm_up must be >= 0, got {self.warm_up}")
        if self.shut_off is not None and self.shut_off <= self.warm_up:
            raise ConfigError(f"cf.shut_off ({self.shut_off}) must exceed cf.warm_up ({self.warm_up})")


class FeatureHistoryBuffer:
    """Bounded FIFO of detached feature batches, one queue per side."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ConfigError(f"history capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self._sides = {SIDE_A: deque(), SIDE_B: deque()}

    def queue(self, side: int) -> Deque[np.ndarray]:
        if side not in self._sides:
            raise ConfigError(f"unknown side {side!r}")
        return self._sides[side]

    def __len__(self) -> int:
        return sum(len(q) for q in self._sides.values())

    def push(self, side: int, features: Union[Tensor, np.ndarray]) -> None:
        if isinstance(features, Tensor):
            if features.tracked:
                raise ContractError("history only stores detached features")
            features = features.data
        q = self.queue(side)
        if self.capacity == 0:
            return
        q.append(np.array(features, copy=True))
        while len(q) > self.capacity:
            q.popleft()

    def sample(self, side: int, rng: Union[np.random.Generator, int]) -> Optional[np.ndarray]:
        q = self.queue(side)
        if not q:
            return None
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        return q[int(rng.integers(len(q)))]


def push_history(buf: FeatureHistoryBuffer, side: int, features) -> None:
    buf.push(side, features)


def sample_history(buf: FeatureHistoryBuffer, side: int, seed) -> Optional[np.ndarray]:
    return buf.sample(side, seed)


def hinge_disc_loss(scores_a: Tensor, scores_b: Tensor) -> Tensor:
    """``mean(relu(1 - a)) + mean(relu(1 + b))``: A is pushed to >= 1, B to <= -1."""
    if scores_a.data.size == 0 or scores_b.data.size == 0:
        raise ContractError("hinge loss needs at least one score per side")
    loss_a = ad.mean(ad.relu(ad.add_scalar(ad.scalar_mul(scores_a, -1.0), 1.0)))
    loss_b = ad.mean(ad.relu(ad.add_scalar(scores_b, 1.0)))
    return ad.add(loss_a, loss_b)


def generator_reg_term(scores_b: Tensor, cfg: CFConfig) -> Tensor:
    """Backbone-side penalty on B scores, before multiplying by ``cfg.weight``.

    The default, ``-mean(scores_b)``, rewards B features that score like A
    features. ``literal_penalty_sign`` flips it to ``+mean(scores_b)``.
    """
    if scores_b.data.size == 0:
        raise ContractError("generator penalty needs at least one B score")
    m = ad.mean(scores_b)
    return m if cfg.literal_penalty_sign else ad.scalar_mul(m, -1.0)


class CFActivity(NamedTuple):
    disc_trains: bool
    gen_penalized: bool


def cf_active(step: int, cfg: CFConfig) -> CFActivity:
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    before_off = cfg.shut_off is None or step < cfg.shut_off
    return CFActivity(before_off, before_off and step >= cfg.warm_up)


def cf_step(model: Model, features, sides: np.ndarray, buf: FeatureHistoryBuffer,
            cfg: CFConfig, opt_d, rng: np.random.Generator) -> Optional[float]:
    """One discriminator update on detached features; returns the hinge loss or None if skipped.

    The step is skipped when a side has neither current rows nor history.
    Current features are pushed to the history afterwards.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    sides = np.asarray(sides)
    current = {s: feats[sides == s] for s in (SIDE_A, SIDE_B)}

    batches = {}
    for s in (SIDE_A, SIDE_B):
        parts = [current[s]] if len(current[s]) else []
        past = buf.sample(s, rng) if cfg.history_len > 0 else None
        if past is not None:
            parts.append(past)
        batches[s] = parts

    loss_value = None
    if batches[SIDE_A] and batches[SIDE_B]:
        tape = ad.Tape()
        params = model.bind(tape, groups=("D",))
        scores = {}
        for s, parts in batches.items():
            x = Tensor(parts[0]) if len(parts) == 1 else Tensor(np.concatenate(parts, axis=0))
            scores[s] = discriminate(model, x, params)
        loss = hinge_disc_loss(scores[SIDE_A], scores[SIDE_B])
        grads = ad.backward(tape, loss)
        model.zero_grads("D")
        model.accumulate(grads, params, "D")
        model.apply_grads("D", opt_d)
        loss_value = loss.item()

    for s in (SIDE_A, SIDE_B):
        if len(current[s]):
            buf.push(s, current[s])
    return loss_value
