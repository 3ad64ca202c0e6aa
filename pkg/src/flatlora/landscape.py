"""Loss-surface probes around merged weights.

Any object exposing ``probe_weights() -> {name: matrix}`` and
``probe_loss(data, offsets) -> float`` can be probed; offsets are added to
the named weights for one evaluation and never written into them.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NonFiniteError
from .rng import RngStream


@dataclass
class Direction:
    tensors: dict
    filter_normalized: bool = False
    seed_label: tuple = ()

    def scaled(self, a):
        return {k: a * v for k, v in self.tensors.items()}


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    values: np.ndarray
    betas: np.ndarray | None = None
    dataset_id: str = ""
    snapshot_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return 1 if self.betas is None else 2

    @property
    def origin(self):
        i = len(self.alphas) // 2
        return float(self.values[i] if self.dims == 1 else self.values[i, len(self.betas) // 2])

    def rows(self):
        if self.dims == 1:
            return [(float(a), None, float(v)) for a, v in zip(self.alphas, self.values)]
        return [(float(a), float(b), float(self.values[i, j]))
                for i, a in enumerate(self.alphas) for j, b in enumerate(self.betas)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "beta", "loss"])
            for a, b, v in self.rows():
                w.writerow([repr(a), "" if b is None else repr(b), repr(v)])

    def to_json(self, path=None):
        doc = {
            "dims": self.dims,
            "alphas": self.alphas.tolist(),
            "betas": None if self.betas is None else self.betas.tolist(),
            "values": [v if math.isfinite(v) else "inf" for v in self.values.reshape(-1).tolist()],
            "dataset_id": self.dataset_id,
            "snapshot_id": self.snapshot_id,
            "meta": self.meta,
        }
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def filter_normalized_direction(model, seed, label=0):
    """Gaussian direction with each row rescaled to the matching weight row's norm."""
    stream = RngStream(int(seed)).child("direction", label)
    out = {}
    for name, w in model.probe_weights().items():
        w = np.asarray(w)
        d = stream.child(name).normal(w.size).reshape(w.shape)
        if w.ndim == 1:
            w, d = w[:, None], d[:, None]
        wn = np.linalg.norm(w, axis=1)
        dn = np.linalg.norm(d, axis=1)
        factor = np.divide(wn, dn, out=np.zeros_like(wn), where=dn > 0)
        out[name] = (d * factor[:, None]).reshape(np.asarray(model.probe_weights()[name]).shape)
    return Direction(out, True, (int(seed), label))


def _safe_loss(model, data, offsets):
    try:
        v = model.probe_loss(data, offsets)
    except (NonFiniteError, FloatingPointError):
        return math.inf
    return v if math.isfinite(v) else math.inf


def symmetric_axis(k, radius):
    if k < 1 or k % 2 == 0:
        raise ContractError("grid resolution must be odd so the origin is a grid point")
    h = k // 2
    if h == 0:
        return np.zeros(1)
    half = radius * np.arange(1, h + 1) / h
    return np.concatenate([-half[::-1], [0.0], half])


def loss_surface(model, data, dirs, k=None, radius=1.0, dataset_id="", snapshot_id=""):
    """L(W′ + α·d₁ (+ β·d₂)) on a symmetric grid over [-radius, radius]."""
    if isinstance(dirs, Direction):
        dirs = [dirs]
    if len(dirs) not in (1, 2):
        raise ContractError("loss_surface takes one or two directions")
    if k is None:
        k = 201 if len(dirs) == 1 else 41
    axis = symmetric_axis(k, radius)
    mid = k // 2
    clean = _safe_loss(model, data, None)
    if len(dirs) == 1:
        vals = np.empty(k)
        for i, a in enumerate(axis):
            vals[i] = clean if i == mid else _safe_loss(model, data, dirs[0].scaled(a))
        return LandscapeGrid(axis, vals, None, dataset_id, snapshot_id, {"radius": radius})
    d1, d2 = dirs
    vals = np.empty((k, k))
    for i, a in enumerate(axis):
        for j, b in enumerate(axis):
            if i == mid and j == mid:
                vals[i, j] = clean
                continue
            off = {n: a * d1.tensors[n] + b * d2.tensors[n] for n in d1.tensors}
            vals[i, j] = _safe_loss(model, data, off)
    return LandscapeGrid(axis, vals, axis.copy(), dataset_id, snapshot_id, {"radius": radius})


def sharpness_metric(model, data, radius, samples, seed=0):
    """Mean over filter-normalised directions d of max(L(W′±radius·d)) − L(W′)."""
    if samples < 1:
        raise ContractError("samples must be >= 1")
    if radius == 0:
        return 0.0
    base = _safe_loss(model, data, None)
    total = 0.0
    for s in range(samples):
        d = filter_normalized_direction(model, seed, s)
        up = _safe_loss(model, data, d.scaled(radius))
        down = _safe_loss(model, data, d.scaled(-radius))
        total += max(up, down) - base
    return total / samples


def generalization_gap(train, test):
    """Per-step (train acc − test acc) and (test loss − train loss).

    ``train``/``test`` are dicts with equal-length ``step``, ``acc`` and ``loss`` lists.
    """
    if list(train["step"]) != list(test["step"]):
        raise ContractError("train and test series are not aligned on step")
    for key in ("acc", "loss"):
        if len(train[key]) != len(train["step"]) or len(test[key]) != len(test["step"]):
            raise ContractError(f"series '{key}' length differs from steps")
    return {
        "step": list(train["step"]),
        "acc_gap": [a - b for a, b in zip(train["acc"], test["acc"])],
        "loss_gap": [b - a for a, b in zip(train["loss"], test["loss"])],
    }
