"""Adam and SGD updates applied in place to lists of float64 arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimizerError(FloatingPointError):
    """Non-finite gradient handed to an optimizer."""


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    momentum: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list, repr=False)
    v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")

    def scheduled_lr(self, epoch: int) -> float:
        """Inverse-time decay: lr / (1 + decay * epoch)."""
        return self.learning_rate / (1.0 + self.decay * epoch)


def _check(grads: list[np.ndarray]) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState, lr: float | None = None):
    """One bias-corrected Adam update; ``params`` are modified in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    _check(grads)
    lr = state.learning_rate if lr is None else lr
    b1, b2 = state.betas
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState, lr: float | None = None):
    """Plain (optionally momentum) gradient descent; ``params`` are modified in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    _check(grads)
    lr = state.learning_rate if lr is None else lr
    state.t += 1
    if state.momentum:
        if not state.m:
            state.m = [np.zeros_like(p) for p in params]
        for p, g, m in zip(params, grads, state.m):
            m *= state.momentum
            m -= lr * g
            p += m
    else:
        for p, g in zip(params, grads):
            p -= lr * g
    return params, state


def step(params, grads, state: OptimizerState, lr: float | None = None):
    return (adam_step if state.kind == "adam" else sgd_step)(params, grads, state, lr)
