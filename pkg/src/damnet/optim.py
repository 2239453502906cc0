"""Stochastic gradient descent with momentum on the parameter delta.

The update is the literal heavy-ball recurrence
``W_new = W + mu * (W - W_prev) - lr * grad``; the stored state is the last
applied delta, so a replay of the recurrence reproduces the trajectory
exactly. Two learning-rate schedules: polynomial decay and
divide-by-ten-on-plateau driven by validation scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class ConstantSchedule:
    kind: str = "constant"


@dataclass
class PolySchedule:
    max_iter: int
    power: float = 0.9
    kind: str = "poly"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigError("poly schedule needs max_iter >= 1")


@dataclass
class PlateauSchedule:
    factor: float = 10.0
    patience: int = 3
    min_improve: float = 0.001
    kind: str = "plateau"

    def __post_init__(self):
        if self.factor <= 1 or self.patience < 1:
            raise ConfigError("plateau schedule needs factor > 1, patience >= 1")


def schedule_from_dict(d: dict):
    kind = d.get("kind", "constant")
    if kind == "constant":
        return ConstantSchedule()
    if kind == "poly":
        return PolySchedule(max_iter=int(d["max_iter"]),
                            power=float(d.get("power", 0.9)))
    if kind == "plateau":
        return PlateauSchedule(factor=float(d.get("factor", 10.0)),
                               patience=int(d.get("patience", 3)),
                               min_improve=float(d.get("min_improve", 0.001)))
    raise ConfigError(f"unknown schedule kind {kind!r}")


class SgdState:
    """Momentum SGD over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, mu: float, gamma: float, schedule=None):
        if not 0.0 <= mu < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if gamma <= 0:
            raise ConfigError("learning rate must be positive")
        self.mu = float(mu)
        self.gamma = float(gamma)
        self.schedule = schedule if schedule is not None else ConstantSchedule()
        self.iter = 0
        self.prev_delta: list[np.ndarray] | None = None
        self.training_complete = False
        # plateau bookkeeping
        self._best_score = None
        self._stalled = 0
        self._drops = 0

    def current_lr(self) -> float:
        s = self.schedule
        if isinstance(s, PolySchedule):
            if self.iter >= s.max_iter:
                self.training_complete = True
                return 0.0
            return self.gamma * (1.0 - self.iter / s.max_iter) ** s.power
        if isinstance(s, PlateauSchedule):
            return self.gamma / s.factor ** self._drops
        return self.gamma

    def observe_validation(self, score: float) -> None:
        """Feed a validation score to the plateau schedule (no-op otherwise)."""
        s = self.schedule
        if not isinstance(s, PlateauSchedule):
            return
        if self._best_score is None or score - self._best_score >= s.min_improve:
            self._best_score = max(score, self._best_score or score)
            self._stalled = 0
        else:
            self._stalled += 1
            if self._stalled >= s.patience:
                self._drops += 1
                self._stalled = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        """Apply one update to every parameter array, in place."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        if self.prev_delta is None:
            self.prev_delta = [np.zeros_like(p) for p in params]
        if len(self.prev_delta) != len(params):
            raise ValueError("optimizer state does not match parameter list")
        lr = self.current_lr()
        for p, g, d in zip(params, grads, self.prev_delta):
            if p.shape != g.shape or p.shape != d.shape:
                raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        for i, (p, g) in enumerate(zip(params, grads)):
            delta = self.mu * self.prev_delta[i] - lr * g
            p += delta
            self.prev_delta[i] = delta
        self.iter += 1
        return params

    def state_arrays(self) -> list[np.ndarray]:
        return [] if self.prev_delta is None else self.prev_delta

    def load_state(self, deltas: list[np.ndarray], iteration: int,
                   drops: int = 0) -> None:
        self.prev_delta = [np.asarray(d, dtype=np.float64) for d in deltas]
        self.iter = int(iteration)
        self._drops = int(drops)
