"""Synthetic classification datasets with deterministic train/test splits."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError

KINDS = ("gaussian_blobs", "two_spirals", "token_sequence_parity")


@dataclass
class DatasetSpec:
    kind: str = "gaussian_blobs"
    size: int = 2000
    classes: int = 2
    noise: float = 1.0
    label_noise: float = 0.0  # fraction of *training* labels reassigned at random
    train_frac: float = 0.5
    seed: int = 0
    dim: int = 2
    separation: float = 2.0
    seq_len: int = 16
    vocab_size: int = 8
    marked: int = 4

    def validate(self):
        bad = []
        if self.kind not in KINDS:
            bad.append("kind")
        if self.size < self.classes:
            bad.append("size")
        if self.classes < 2:
            bad.append("classes")
        if not 0 < self.train_frac < 1:
            bad.append("train_frac")
        if not 0 <= self.label_noise <= 1:
            bad.append("label_noise")
        if self.noise < 0:
            bad.append("noise")
        if self.kind == "two_spirals" and self.classes != 2:
            bad.append("classes")
        if self.kind == "token_sequence_parity":
            if self.classes != 2:
                bad.append("classes")
            if not 1 <= self.marked <= self.seq_len or self.vocab_size < 2:
                bad.append("marked")
        if bad:
            raise ConfigError("invalid dataset spec", bad)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError("unknown dataset fields", unknown)
        return cls(**d)


def _blobs(spec, rng):
    k, n = spec.classes, spec.size
    y = np.arange(n) % k
    rng.shuffle(y)
    ang = 2 * np.pi * np.arange(k) / k
    centers = np.zeros((k, spec.dim))
    centers[:, 0] = spec.separation * np.cos(ang)
    if spec.dim > 1:
        centers[:, 1] = spec.separation * np.sin(ang)
    x = centers[y] + spec.noise * rng.standard_normal((n, spec.dim))
    return x, y


def _spirals(spec, rng):
    n = spec.size
    y = np.arange(n) % 2
    rng.shuffle(y)
    t = 0.5 + 2.5 * np.pi * rng.random(n)
    x = np.stack([t * np.cos(t + np.pi * y), t * np.sin(t + np.pi * y)], axis=1) / (np.pi)
    x = x + spec.noise * rng.standard_normal((n, 2))
    return x, y


def _parity(spec, rng):
    n, L = spec.size, spec.seq_len
    tokens = rng.integers(0, spec.vocab_size, size=(n, L))
    marked = np.sort(rng.choice(L, size=spec.marked, replace=False))
    y = tokens[:, marked].sum(axis=1) % 2
    return tokens, y


def make_dataset(spec):
    """((x_train, y_train), (x_test, y_test)); identical bytes for identical specs."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian_blobs":
        x, y = _blobs(spec, rng)
    elif spec.kind == "two_spirals":
        x, y = _spirals(spec, rng)
    else:
        x, y = _parity(spec, rng)
    n_train = int(round(spec.size * spec.train_frac))
    n_train = min(max(n_train, 1), spec.size - 1)
    perm = rng.permutation(spec.size)
    tr, te = perm[:n_train], perm[n_train:]
    x_tr, y_tr = x[tr], y[tr].astype(np.int64)
    if spec.label_noise > 0:
        flip = rng.random(n_train) < spec.label_noise
        y_tr = y_tr.copy()
        y_tr[flip] = rng.integers(0, spec.classes, size=int(flip.sum()))
    return (x_tr, y_tr), (x[te], y[te].astype(np.int64))


def batches(n, batch_size, steps, seed):
    """Deterministic index batches: reshuffled epochs, ``steps`` batches total."""
    rng = np.random.default_rng(seed)
    out, perm, pos = [], rng.permutation(n), 0
    bs = min(batch_size, n)
    for _ in range(steps):
        if pos + bs > n:
            perm, pos = rng.permutation(n), 0
        out.append(perm[pos:pos + bs])
        pos += bs
    return out
