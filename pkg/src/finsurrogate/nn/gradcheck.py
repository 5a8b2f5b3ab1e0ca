"""Central finite-difference verification of network gradients."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..rng import stream
from .functional import mse_loss
from .layers import Network


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dominating."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def loss_and_grads(net: Network, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    out = net.forward(x)
    loss, dout = mse_loss(y.reshape(out.shape), out)
    net.backward(dout)
    return loss, [g.copy() for g in net.grads()]


def grad_check(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float | Sequence[float] = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences of the MSE loss
    over ``n_samples`` randomly chosen parameter entries (all of them if fewer).

    With several step sizes each entry keeps its best agreement. A perturbation
    that carries some ReLU input or pooling winner across a kink spoils the
    difference quotient for that step only, while a wrong gradient disagrees at
    every step.
    """
    steps = np.atleast_1d(np.asarray(epsilon, dtype=np.float64))
    _, grads = loss_and_grads(net, x, y)
    params = net.params()
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = stream(seed, "misc", 7)
    picks = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k].reshape(-1)
        idx = flat - offsets[k]
        old = p[idx]
        analytic = grads[k].reshape(-1)[idx]
        best = np.inf
        for eps in steps:
            p[idx] = old + eps
            lp, _ = mse_loss(y.reshape(-1, 1), net.forward(x))
            p[idx] = old - eps
            lm, _ = mse_loss(y.reshape(-1, 1), net.forward(x))
            p[idx] = old
            best = min(best, float(relative_error(analytic, (lp - lm) / (2 * eps))))
        worst = max(worst, best)
    return worst
