"""Training steps (LoRA, Flat-LoRA, full-space SAM, LoRA-SAM) and perturbation algebra."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, NonFiniteError, TrainingAborted
from .perturb import (NormCache, apply_perturbation, flat_records, remove_perturbation,
                      sample_all_layers, sigma_at)

log = logging.getLogger(__name__)

SAM_SPACES = ("full_W", "lora_AB")


@dataclass
class SamConfig:
    rho: float = 0.05
    space: str = "full_W"
    per_layer: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ContractError("rho must be > 0")
        if self.space not in SAM_SPACES:
            raise ContractError(f"unknown SAM space {self.space!r}")


@dataclass
class StepReport:
    step: int
    method: str
    clean_loss: float | None
    perturbed_loss: float
    strength: float = 0.0
    grad_evals: int = 1
    grad_norm: float = 0.0
    lr: float = 0.0
    perturbation_norm: float = 0.0
    extra_state_floats: int = 0
    seed_labels: int = 0
    degenerate: bool = False
    ratio: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def default_loss(model, batch):
    x, y = batch
    return model.loss(x, y)


def _loss_and_grad(model, batch, loss_fn, method, diag=None):
    try:
        loss = loss_fn(model, batch)
    except NonFiniteError as exc:
        raise TrainingAborted(f"{method}: non-finite forward", {**(diag or {}), "error": str(exc)})
    val = loss.item()
    if not math.isfinite(val):
        raise TrainingAborted(f"{method}: non-finite loss", {**(diag or {}), "loss": val})
    T.backward(loss)
    model.grad_evals = getattr(model, "grad_evals", 0) + 1
    return val


def _clean_loss(model, batch, loss_fn):
    with T.no_grad():
        return loss_fn(model, batch).item()


def _finish(model, opt, report):
    report.grad_norm = opt.grad_norm()
    report.lr = opt.step()
    return report


# ---------------------------------------------------------------- LoRA

def lora_step(model, batch, opt, step=0, loss_fn=default_loss, method="lora"):
    """One clean forward/backward; only trainable parameters move."""
    opt.zero_grad()
    loss = _loss_and_grad(model, batch, loss_fn, method, {"step": step})
    return _finish(model, opt, StepReport(step, method, loss, loss))


# ---------------------------------------------------------------- Flat-LoRA

def flat_lora_step(model, batch, opt, schedule, t, seed=0, n_samples=1, all_layers=False,
                   cache=None, track_clean=False, loss_fn=default_loss):
    """Gradient of L(W + sBA + ε_W) w.r.t. A, B with ε_W regenerated from seed records.

    σ_t = 0 makes this exactly :func:`lora_step`.
    """
    sigma_t = sigma_at(schedule, t)
    opt.zero_grad()
    if sigma_t == 0.0:
        loss = _loss_and_grad(model, batch, loss_fn, "flat_lora", {"step": t, "sigma_t": 0.0})
        return _finish(model, opt, StepReport(t, "flat_lora", loss, loss, 0.0))

    clean = _clean_loss(model, batch, loss_fn) if track_clean else None
    losses, memory, labels = [], 0, 0
    for k in range(n_samples):
        label_step = t if n_samples == 1 else t * n_samples + k
        if all_layers:
            records = sample_all_layers(model, sigma_t, seed, label_step)
        else:
            records = flat_records(model, sigma_t, seed, label_step, cache=cache)
        memory = sum(r.persistent_floats() for r in records)
        labels = len(records)
        apply_perturbation(model, records)
        try:
            losses.append(_loss_and_grad(model, batch, loss_fn, "flat_lora",
                                         {"step": t, "sigma_t": sigma_t}))
        finally:
            remove_perturbation(model, records)
    if n_samples > 1:
        for p in opt.params.values():
            if p.grad is not None:
                p.grad = p.grad / n_samples
    report = StepReport(t, "flat_lora", clean, float(np.mean(losses)), sigma_t,
                        grad_evals=n_samples, extra_state_floats=memory, seed_labels=labels)
    return _finish(model, opt, report)


# ---------------------------------------------------------------- SAM helpers

def sam_perturbation(grads, rho, per_layer=False):
    """First-order SAM ascent step ρ·g/‖g‖ for a dict of gradients.

    Returns (eps dict, norm). A zero norm returns zeros.
    """
    if per_layer:
        eps, total = {}, 0.0
        for k, g in grads.items():
            n = float(np.linalg.norm(g))
            eps[k] = rho * g / n if n > 0 else np.zeros_like(g)
            total += float(np.sum(eps[k] ** 2))
        return eps, math.sqrt(total)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm == 0.0:
        return {k: np.zeros_like(g) for k, g in grads.items()}, 0.0
    return {k: rho * g / norm for k, g in grads.items()}, norm


def sam_step_full(model, batch, opt, cfg, step=0, loss_fn=default_loss):
    """SAM on the merged weights W′ of every adapted layer; A, B are what moves."""
    if cfg.space != "full_W":
        raise ContractError("sam_step_full needs SamConfig(space='full_W')")
    layers = model.lora_layers() or model.linear_layers()
    opt.zero_grad()
    diag = {"step": step, "rho": cfg.rho}
    with model.capture():
        loss = _loss_and_grad(model, batch, loss_fn, "sam_full", diag)
        grads = {l.name: l.merged_grad() for l in layers}
    model.clear_capture()
    eps, gnorm = sam_perturbation(grads, cfg.rho, cfg.per_layer)
    degenerate = gnorm == 0.0
    if degenerate:
        log.warning("sam_full step %d: zero merged-weight gradient, skipping perturbation", step)
    opt.zero_grad()
    applied = []
    try:
        if not degenerate:
            for l in layers:
                l.weight.delta = eps[l.name]
                applied.append(l)
        perturbed = _loss_and_grad(model, batch, loss_fn, "sam_full", diag)
    finally:
        for l in applied:
            l.weight.delta = None
    pnorm = math.sqrt(sum(float(np.sum(e * e)) for e in eps.values()))
    report = StepReport(step, "sam_full", loss, perturbed, cfg.rho, grad_evals=2,
                        perturbation_norm=pnorm, degenerate=degenerate,
                        extra_state_floats=sum(l.weight.size for l in layers))
    return _finish(model, opt, report)


def lora_sam_step(model, batch, opt, cfg, step=0, track_ratio=False, loss_fn=default_loss):
    """SAM on the adapter factors (A, B) with a joint ℓ2 budget ρ."""
    if cfg.space != "lora_AB":
        raise ContractError("lora_sam_step needs SamConfig(space='lora_AB')")
    layers = model.lora_layers()
    opt.zero_grad()
    diag = {"step": step, "rho": cfg.rho}
    loss = _loss_and_grad(model, batch, loss_fn, "lora_sam", diag)
    grads = {}
    for l in layers:
        grads[l.name + ".A"] = l.A.grad if l.A.grad is not None else np.zeros(l.A.shape)
        grads[l.name + ".B"] = l.B.grad if l.B.grad is not None else np.zeros(l.B.shape)
    if cfg.per_layer:
        eps, gnorm = {}, 0.0
        for l in layers:
            sub, n = sam_perturbation({k: grads[l.name + k] for k in (".A", ".B")}, cfg.rho)
            eps[l.name + ".A"], eps[l.name + ".B"] = sub[".A"], sub[".B"]
            gnorm += n
    else:
        eps, gnorm = sam_perturbation(grads, cfg.rho)
    degenerate = gnorm == 0.0
    if degenerate:
        log.warning("lora_sam step %d: zero adapter gradient, skipping perturbation", step)
    ratio = {}
    if track_ratio and not degenerate:
        for l in layers:
            ratio[l.name] = _ratio_from_eps(l.A.data, l.B.data, eps[l.name + ".A"], eps[l.name + ".B"])
    opt.zero_grad()
    try:
        if not degenerate:
            for l in layers:
                l.A.delta = eps[l.name + ".A"]
                l.B.delta = eps[l.name + ".B"]
        perturbed = _loss_and_grad(model, batch, loss_fn, "lora_sam", diag)
    finally:
        for l in layers:
            l.A.delta = None
            l.B.delta = None
    pnorm = math.sqrt(sum(float(np.sum(e * e)) for e in eps.values()))
    report = StepReport(step, "lora_sam", loss, perturbed, cfg.rho, grad_evals=2,
                        perturbation_norm=pnorm, degenerate=degenerate, ratio=ratio,
                        extra_state_floats=sum(l.A.size + l.B.size for l in layers))
    return _finish(model, opt, report)


# ---------------------------------------------------------------- perturbation algebra

def lora_sam_coefficient(A, B, G, rho):
    """c = ρ / sqrt(‖BᵀG‖²_F + ‖GAᵀ‖²_F), or None when the denominator vanishes."""
    den = math.sqrt(float(np.sum((B.T @ G) ** 2)) + float(np.sum((G @ A.T) ** 2)))
    if den == 0.0:
        return None
    return rho / den


def lora_sam_perturbations(A, B, G, rho):
    """(ε_A, ε_B) = (c·BᵀG, c·GAᵀ) for a single adapted layer."""
    c = lora_sam_coefficient(A, B, G, rho)
    if c is None:
        return np.zeros(A.shape), np.zeros(B.shape)
    return c * (B.T @ G), c * (G @ A.T)


def equivalent_perturbation(A, B, gradW, rho, scaling=1.0):
    """Merged-weight perturbation induced by LoRA-SAM, closed c-form.

    ε_W = s·(c[BBᵀG + GAᵀA] + c²·GAᵀBᵀG). Zero matrix when c is undefined.
    """
    A, B, G = (np.asarray(v, dtype=np.float64) for v in (A, B, gradW))
    if B.shape[1] != A.shape[0] or G.shape != (B.shape[0], A.shape[1]):
        raise ContractError(f"inconsistent shapes A{A.shape} B{B.shape} G{G.shape}")
    c = lora_sam_coefficient(A, B, G, rho)
    if c is None:
        log.warning("equivalent_perturbation: zero gradient projection, returning zeros")
        return np.zeros(G.shape)
    return scaling * (c * (B @ B.T @ G + G @ A.T @ A) + c * c * (G @ A.T @ B.T @ G))


def approx_equivalent(A, B, gradW, rho, scaling=1.0):
    """Leading term c·GAᵀA of the LoRA-SAM merged perturbation (small-B regime)."""
    G = np.asarray(gradW, dtype=np.float64)
    c = lora_sam_coefficient(A, B, G, rho)
    if c is None:
        return np.zeros(G.shape)
    return scaling * c * (G @ A.T @ A)


def _mat_norm(M, norm):
    return float(np.linalg.norm(M, 2 if norm == "spectral" else "fro"))


def _ratio_from_eps(A, B, eA, eB, norm="fro"):
    total = B @ eA + eB @ A + eB @ eA
    den = _mat_norm(total, norm)
    if den == 0.0:
        return float("nan")
    return _mat_norm(eB @ A, norm) / den


def ratio_statistic(A, B, gradW, rho, norm="fro"):
    """‖ε_B A‖ / ‖ε_W‖; NaN when ε_W = 0. ``norm`` is 'fro' or 'spectral'."""
    A, B, G = (np.asarray(v, dtype=np.float64) for v in (A, B, gradW))
    eA, eB = lora_sam_perturbations(A, B, G, rho)
    r = _ratio_from_eps(A, B, eA, eB, norm)
    if math.isnan(r):
        log.warning("ratio_statistic undefined: ε_W = 0")
    return r


# ---------------------------------------------------------------- dispatch

def extra_memory(method, model):
    """Persistent perturbation bookkeeping per step, in floats (+ seed labels)."""
    lora = model.lora_layers()
    if method == "flat_lora":
        return {"floats": sum(l.out_features for l in lora), "seed_labels": len(lora)}
    if method == "sam_full":
        return {"floats": sum(l.out_features * l.in_features for l in lora), "seed_labels": 0}
    if method == "lora_sam":
        return {"floats": sum(l.A.size + l.B.size for l in lora), "seed_labels": 0}
    return {"floats": 0, "seed_labels": 0}


class Trainer:
    """Runs one method's step function with its own schedule/config state."""

    def __init__(self, method, model, opt, total_steps, seed=0, sigma=None,
                 schedule_kind="cosine_increase", rho=None, n_samples=1, all_layers=False,
                 norm_refresh_every=1, track_clean=False, track_ratio=False, per_layer=False,
                 loss_fn=default_loss):
        from .perturb import SigmaSchedule
        self.method = method
        self.model = model
        self.opt = opt
        self.seed = seed
        self.loss_fn = loss_fn
        self.n_samples = n_samples
        self.all_layers = all_layers
        self.track_clean = track_clean
        self.track_ratio = track_ratio
        self.cache = NormCache(norm_refresh_every)
        self.schedule = None
        self.sam = None
        if method == "flat_lora":
            self.schedule = SigmaSchedule(sigma, total_steps, schedule_kind)
        elif method == "sam_full":
            self.sam = SamConfig(rho, "full_W", per_layer)
        elif method == "lora_sam":
            self.sam = SamConfig(rho, "lora_AB", per_layer)
        elif method not in ("lora", "full_ft"):
            raise ContractError(f"unknown method {method!r}")

    def step(self, batch, t):
        if self.method == "flat_lora":
            return flat_lora_step(self.model, batch, self.opt, self.schedule, t, seed=self.seed,
                                  n_samples=self.n_samples, all_layers=self.all_layers,
                                  cache=self.cache, track_clean=self.track_clean,
                                  loss_fn=self.loss_fn)
        if self.method == "sam_full":
            return sam_step_full(self.model, batch, self.opt, self.sam, t, loss_fn=self.loss_fn)
        if self.method == "lora_sam":
            return lora_sam_step(self.model, batch, self.opt, self.sam, t,
                                 track_ratio=self.track_ratio, loss_fn=self.loss_fn)
        return lora_step(self.model, batch, self.opt, t, loss_fn=self.loss_fn, method=self.method)
