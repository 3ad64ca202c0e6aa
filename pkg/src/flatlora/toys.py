"""Closed-form toy losses for smoothing, basin-selection and landscape checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream


@dataclass
class DoubleWell:
    """Sharp deep well at ``w_sharp`` plus a wide shallower well at ``w_wide``.

    L(w) = -a·exp(-(w-w_sharp)²/2s_sharp²) - b·exp(-(w-w_wide)²/2s_wide²) + k/2·(w-w_wide)²
    """
    a: float = 1.5
    w_sharp: float = -1.0
    s_sharp: float = 0.05
    b: float = 1.0
    w_wide: float = 1.0
    s_wide: float = 0.5
    k: float = 0.3

    def loss(self, w):
        w = np.asarray(w, dtype=np.float64)
        g1 = np.exp(-((w - self.w_sharp) ** 2) / (2 * self.s_sharp ** 2))
        g2 = np.exp(-((w - self.w_wide) ** 2) / (2 * self.s_wide ** 2))
        return -self.a * g1 - self.b * g2 + 0.5 * self.k * (w - self.w_wide) ** 2

    def grad(self, w):
        w = np.asarray(w, dtype=np.float64)
        g1 = np.exp(-((w - self.w_sharp) ** 2) / (2 * self.s_sharp ** 2))
        g2 = np.exp(-((w - self.w_wide) ** 2) / (2 * self.s_wide ** 2))
        return (self.a * g1 * (w - self.w_sharp) / self.s_sharp ** 2
                + self.b * g2 * (w - self.w_wide) / self.s_wide ** 2
                + self.k * (w - self.w_wide))

    def basin(self, w):
        """'sharp' or 'wide', whichever centre is closer."""
        return "sharp" if abs(w - self.w_sharp) < abs(w - self.w_wide) else "wide"


def smoothed_loss(loss, w_grid, sigma, samples=20_000, seed=0):
    """Monte-Carlo E_z L(w + σz), z ~ N(0,1), one shared draw set for every w."""
    z = RngStream(seed).child("smooth").normal(samples)
    w_grid = np.asarray(w_grid, dtype=np.float64)
    out = np.empty_like(w_grid)
    for i, w in enumerate(w_grid):
        out[i] = loss(w + sigma * z).mean()
    return out


def curvature_proxy(values, h):
    """max |second difference| / h² over a uniform grid."""
    v = np.asarray(values)
    return float(np.max(np.abs(v[2:] - 2 * v[1:-1] + v[:-2])) / h ** 2)


def noisy_descent(toy, w0, sigma, steps=4000, lr=0.005, seed=0, tail=500):
    """Gradient descent on L(w + ε) with ε ~ N(0, σ²w²) (filter scaling for one weight).

    Returns the mean of the last ``tail`` iterates.
    """
    z = RngStream(seed).child("noisy_descent").normal(steps)
    w = float(w0)
    trace = np.empty(steps)
    for t in range(steps):
        eps = sigma * abs(w) * z[t]
        w -= lr * float(toy.grad(w + eps))
        trace[t] = w
    return float(trace[-tail:].mean())


class QuadraticToy:
    """L(W) = h·‖W - W*‖²_F evaluated at W; exposes the landscape probe interface."""

    def __init__(self, weights, minimum=None, curvature=1.0):
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self.minimum = ({k: np.zeros_like(v) for k, v in self.weights.items()}
                        if minimum is None else {k: np.asarray(v, dtype=np.float64)
                                                 for k, v in minimum.items()})
        self.curvature = float(curvature)

    def probe_weights(self):
        return {k: v.copy() for k, v in self.weights.items()}

    def probe_loss(self, data=None, offsets=None):
        offsets = offsets or {}
        total = 0.0
        for k, w in self.weights.items():
            cur = w + offsets[k] if k in offsets else w
            total += self.curvature * float(np.sum((cur - self.minimum[k]) ** 2))
        return total
