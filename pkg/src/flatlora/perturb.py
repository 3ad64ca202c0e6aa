"""Filter-norm-scaled random weight perturbations with exact seed replay.

A perturbation is never stored. A :class:`PerturbationRecord` keeps the
stream label, the strength and one norm per filter; :func:`sample_perturbation`
turns it back into the same noise matrix every time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, StateError
from .rng import RngStream, derive_key

DEFAULT_SIGMA = 0.05
SCHEDULE_KINDS = ("constant", "cosine_increase")


@dataclass
class PerturbationRecord:
    layer_id: str
    seed_label: tuple  # (stream key, counter)
    sigma_t: float
    filter_norms: np.ndarray
    input_dim: int
    param: str = "weight"
    elementwise: bool = False  # True: N(0, σ²|p_k|²) per entry, norms hold |p|
    shape: tuple = ()

    def __post_init__(self):
        self.filter_norms = np.asarray(self.filter_norms, dtype=np.float64)
        if not self.shape:
            self.shape = (self.filter_norms.size, self.input_dim)
        self.shape = tuple(int(s) for s in self.shape)

    @property
    def target(self):
        return f"{self.layer_id}.{self.param}" if self.param else self.layer_id

    def persistent_floats(self):
        """Floats that must be kept to regenerate the noise (excludes the seed label)."""
        return int(self.filter_norms.size)

    def to_dict(self):
        return {
            "layer_id": self.layer_id,
            "param": self.param,
            "seed_label": [int(self.seed_label[0]), int(self.seed_label[1])],
            "sigma_t": float(self.sigma_t),
            "filter_norms": self.filter_norms.tolist(),
            "input_dim": int(self.input_dim),
            "elementwise": bool(self.elementwise),
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["seed_label"] = tuple(d["seed_label"])
        d["shape"] = tuple(d.get("shape", ()))
        return cls(**d)


def filter_norms(w_merged):
    """ℓ2 norm of each row (filter) of the merged weight."""
    w = np.asarray(w_merged, dtype=np.float64)
    if w.ndim != 2:
        raise ContractError(f"filter norms need a matrix, got shape {w.shape}")
    return kernels.row_norms(w)


def seed_label(seed, layer_id, step, param="weight"):
    return (derive_key(seed, "perturb", layer_id, param, int(step)), 0)


def make_record(layer_id, w_merged, sigma_t, seed, step, norms=None):
    w = np.asarray(w_merged)
    if norms is None:
        norms = filter_norms(w)
    return PerturbationRecord(layer_id, seed_label(seed, layer_id, step), float(sigma_t),
                              norms, w.shape[1])


def sample_perturbation(record):
    """Regenerate ε for ``record``.

    Matrix records: entry (i, j) ~ N(0, σ²‖W′_i‖²/n). Elementwise records:
    entry k ~ N(0, σ²|p_k|²). σ = 0 yields zeros without touching the stream.
    """
    if record.sigma_t < 0:
        raise ContractError("sigma_t must be >= 0")
    if record.input_dim < 1:
        raise ContractError("input_dim must be >= 1")
    if record.sigma_t == 0.0:
        return np.zeros(record.shape)
    key, counter = record.seed_label
    if record.elementwise:
        scales = record.sigma_t * record.filter_norms.reshape(-1)
        return kernels.scaled_row_normals(key, counter, scales, 1).reshape(record.shape)
    scales = record.sigma_t * record.filter_norms / math.sqrt(record.input_dim)
    return kernels.scaled_row_normals(key, counter, scales, record.input_dim)


def apply_perturbation(model, records):
    params = model.params()
    targets = [params[r.target] for r in records]
    for r, p in zip(records, targets):
        if p.delta is not None:
            raise StateError(f"{r.target} already carries a perturbation")
    for r, p in zip(records, targets):
        p.delta = sample_perturbation(r)


def remove_perturbation(model, records):
    """Regenerate each ε and subtract it; the offset must cancel to exact zero."""
    params = model.params()
    for r in records:
        p = params[r.target]
        if p.delta is None:
            raise StateError(f"remove without matching apply on {r.target}")
        residual = p.delta - sample_perturbation(r)
        if np.any(residual):
            raise StateError(f"replay of {r.target} did not reproduce the applied noise")
        p.delta = None


# ---------------------------------------------------------------- σ schedule

@dataclass
class SigmaSchedule:
    sigma_max: float = DEFAULT_SIGMA
    total_steps: int = 1
    kind: str = "cosine_increase"

    def __post_init__(self):
        if self.sigma_max < 0:
            raise ContractError("sigma_max must be >= 0")
        if self.total_steps < 1:
            raise ContractError("total_steps must be >= 1")
        if self.kind not in SCHEDULE_KINDS:
            raise ContractError(f"unknown schedule kind {self.kind!r}")


def sigma_at(schedule, t):
    if not 0 <= t <= schedule.total_steps:
        raise ContractError(f"step {t} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.sigma_max
    return schedule.sigma_max * (1.0 - math.cos(math.pi * t / schedule.total_steps)) / 2.0


# ---------------------------------------------------------------- model-level sampling

@dataclass
class NormCache:
    """Filter norms reused for ``refresh_every`` steps (1 = recompute every step)."""
    refresh_every: int = 1
    _norms: dict = field(default_factory=dict)
    _stamp: dict = field(default_factory=dict)

    def get(self, layer, step):
        name = layer.name
        if (self.refresh_every <= 1 or name not in self._norms
                or step - self._stamp[name] >= self.refresh_every):
            self._norms[name] = filter_norms(layer.merged_weight())
            self._stamp[name] = step
        return self._norms[name]


def flat_records(model, sigma_t, seed, step, layers=None, cache=None):
    """One record per LoRA-adapted linear layer (or per ``layers``)."""
    if sigma_t == 0.0:
        return []
    layers = model.lora_layers() if layers is None else layers
    out = []
    for layer in layers:
        norms = cache.get(layer, step) if cache is not None else None
        out.append(make_record(layer.name, layer.merged_weight(), sigma_t, seed, step, norms=norms))
    return out


def sample_all_layers(model, sigma_t, seed, step):
    """Records for every linear weight (filter-scaled) and every other parameter (|p|-scaled).

    LoRA factors are excluded: they are the optimisation variables, their
    effect on the merged weight is already covered by the linear records.
    """
    if sigma_t == 0.0:
        return []
    records = flat_records(model, sigma_t, seed, step, layers=model.linear_layers())
    covered = {r.target for r in records}
    for name, p in model.params().items():
        if name in covered or name.endswith(".A") or name.endswith(".B"):
            continue
        owner, _, pname = name.rpartition(".")
        if not owner:
            owner, pname = name, ""
        records.append(PerturbationRecord(
            owner, seed_label(seed, name, step, "abs"), float(sigma_t),
            np.abs(p.data).reshape(-1), 1, param=pname, elementwise=True, shape=p.shape,
        ))
    return records


def perturbation_memory(records):
    """Persistent bookkeeping per target: (norm floats, seed labels)."""
    return {r.target: (r.persistent_floats(), 1) for r in records}


# ---------------------------------------------------------------- variance amplification

def output_variance_ratio(w, sigma, samples, seed=0, x_mean=0.0, x_var=1.0, chunk=5_000):
    """Monte-Carlo var[(W′+ε)x] / var[W′x] per output row, with a batch-means std error.

    x has i.i.d. entries with the given mean/variance; ε follows the filter
    scaling. Clean and perturbed outputs share x, so only ε noise enters the
    ratio's error.
    """
    w = np.asarray(w, dtype=np.float64)
    m, n = w.shape
    norms = filter_norms(w)
    scales = np.tile(sigma * norms / math.sqrt(n), chunk)
    xs = RngStream(derive_key(seed, "x"))
    es = RngStream(derive_key(seed, "eps"))
    ratios = []
    done = 0
    while done < samples:
        c = min(chunk, samples - done)
        x = x_mean + math.sqrt(x_var) * xs.normal(c * n).reshape(c, n)
        eps = kernels.scaled_row_normals(es.seed, es.counter, scales[: c * m], n).reshape(c, m, n)
        es.counter += c * m * n
        clean = x @ w.T
        pert = clean + np.einsum("smn,sn->sm", eps, x)
        ratios.append(pert.var(axis=0) / clean.var(axis=0))
        done += c
    ratios = np.array(ratios)
    se = ratios.std(axis=0, ddof=1) / math.sqrt(len(ratios)) if len(ratios) > 1 else np.zeros(m)
    return ratios.mean(axis=0), se
