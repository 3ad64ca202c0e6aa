"""Experiment configuration, orchestration and result emission."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetSpec, batches, make_dataset
from .errors import ConfigError
from .landscape import generalization_gap, sharpness_metric
from .model import ModelSpec, build_model, save_checkpoint
from .optim import make_optimizer
from .perturb import DEFAULT_SIGMA, SCHEDULE_KINDS
from .rng import RngStream
from .trainers import Trainer, extra_memory

log = logging.getLogger(__name__)

METHODS = ("lora", "flat_lora", "sam_full", "lora_sam", "full_ft")
SAM_METHODS = ("sam_full", "lora_sam")
DEFAULT_RHO = 0.05
OUTPUT_ENV = "FLATLORA_OUTPUT_ROOT"

# σ grid of the variance-magnitude ablation and the rank grid of the rank study
SIGMA_GRID = (0.0, 0.01, 0.05, 0.10, 0.15, 0.20)
RANK_GRID = (1, 4, 16, 64)


def output_root():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@dataclass
class OptimizerSpec:
    name: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    schedule: str = "cosine"
    warmup: int = 0


@dataclass
class SharpnessSpec:
    radius: float = 0.1
    samples: int = 10
    split: str = "train"


@dataclass
class ExperimentConfig:
    method: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    sigma: float | None = None
    schedule: str = "cosine_increase"
    rho: float | None = None
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    steps: int = 500
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_every: int = 50
    n_samples: int = 1
    all_layers: bool = False
    norm_refresh_every: int = 1
    per_layer_sam: bool = False
    track_ratio: bool = False
    pretrain_steps: int = 0
    sharpness: SharpnessSpec = field(default_factory=SharpnessSpec)
    output_dir: str | None = None

    def strength(self):
        if self.method == "flat_lora":
            return self.sigma
        if self.method in SAM_METHODS:
            return self.rho
        return 0.0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_NESTED = {"dataset": DatasetSpec, "model": ModelSpec, "optimizer": OptimizerSpec,
           "sharpness": SharpnessSpec}


def config_from_dict(raw):
    """Validate ``raw`` and fill defaults; raises ConfigError naming bad keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    for key, cls in _NESTED.items():
        sub = raw.get(key, {})
        if not isinstance(sub, dict):
            raise ConfigError("expected an object", [key])
        names = {f.name for f in fields(cls)}
        unknown += [f"{key}.{k}" for k in sorted(set(sub) - names)]
    if unknown:
        raise ConfigError("unknown config fields", unknown)
    if "method" not in raw:
        raise ConfigError("missing required field", ["method"])
    d = copy.deepcopy(raw)
    for key, cls in _NESTED.items():
        d[key] = cls(**d.get(key, {}))
    cfg = ExperimentConfig(**d)
    return _finalize(cfg)


def _finalize(cfg):
    bad = []
    if cfg.method not in METHODS:
        raise ConfigError("unknown method", ["method"])
    if cfg.sigma is not None and cfg.method != "flat_lora":
        bad.append("sigma")
    if cfg.rho is not None and cfg.method not in SAM_METHODS:
        bad.append("rho")
    if bad:
        raise ConfigError(f"not valid with method={cfg.method}", bad)
    if cfg.method == "flat_lora" and cfg.sigma is None:
        cfg.sigma = DEFAULT_SIGMA
    if cfg.method in SAM_METHODS and cfg.rho is None:
        cfg.rho = DEFAULT_RHO
    if cfg.sigma is not None and cfg.sigma < 0:
        bad.append("sigma")
    if cfg.rho is not None and not cfg.rho > 0:
        bad.append("rho")
    if cfg.schedule not in SCHEDULE_KINDS:
        bad.append("schedule")
    if not cfg.seeds or not isinstance(cfg.seeds, list):
        bad.append("seeds")
    for k in ("steps", "batch_size", "eval_every", "n_samples", "norm_refresh_every"):
        if getattr(cfg, k) < 1:
            bad.append(k)
    if cfg.pretrain_steps < 0:
        bad.append("pretrain_steps")
    if cfg.optimizer.name not in ("adamw", "sgd"):
        bad.append("optimizer.name")
    if cfg.sharpness.split not in ("train", "test"):
        bad.append("sharpness.split")
    if cfg.method == "full_ft":
        cfg.model.adapters = False
        cfg.model.train_base = True
    elif cfg.model.train_base or not cfg.model.adapters:
        bad.append("model.adapters")
    if bad:
        raise ConfigError("invalid config values", bad)
    cfg.model.validate()
    cfg.dataset.validate()
    return cfg


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})")
    return config_from_dict(raw)


# ---------------------------------------------------------------- results

ROW_FIELDS = ["method", "seed", "param", "value", "strength", "rank", "status",
              "train_acc", "test_acc", "train_loss", "test_loss", "sharpness",
              "acc_gap", "loss_gap", "grad_evals", "extra_memory_floats", "seed_labels",
              "wall_time", "error"]
METRIC_FIELDS = ["train_acc", "test_acc", "train_loss", "test_loss", "sharpness",
                 "acc_gap", "loss_gap", "grad_evals", "extra_memory_floats"]


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)

    def append(self, row):
        self.rows.append({k: row.get(k) for k in ROW_FIELDS})

    def extend(self, other):
        for r in other.rows:
            self.append(r)

    def ok(self):
        return all(r["status"] == "ok" for r in self.rows)

    def to_csv(self, path, append=False):
        path = Path(path)
        new = not (append and path.exists())
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
            if new:
                w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def aggregate(self, key=("method", "param", "value")):
        """Mean ± std (population std over seeds) of each metric per group of ``key``."""
        groups = {}
        for r in self.rows:
            if r["status"] != "ok":
                continue
            groups.setdefault(tuple(r[k] for k in key), []).append(r)
        out = []
        for gkey, rs in groups.items():
            agg = dict(zip(key, gkey))
            agg["n"] = len(rs)
            for m in METRIC_FIELDS:
                vals = np.array([r[m] for r in rs], dtype=float)
                agg[m + "_mean"] = float(vals.mean())
                agg[m + "_std"] = float(vals.std())
            out.append(agg)
        return out

    def format(self):
        lines = []
        for a in self.aggregate():
            lines.append(
                f"{a['method']:>9} {str(a['param'] or ''):>6}={a['value'] if a['value'] is not None else '':<6}"
                f" test_acc {100 * a['test_acc_mean']:.2f}±{100 * a['test_acc_std']:.2f}"
                f"  gap {100 * a['acc_gap_mean']:.2f}±{100 * a['acc_gap_std']:.2f}"
                f"  sharpness {a['sharpness_mean']:.4f}±{a['sharpness_std']:.4f}  (n={a['n']})")
        return "\n".join(lines)


# ---------------------------------------------------------------- single run

def evaluate(model, x, y):
    with T.no_grad():
        logits = model.forward(x)
        loss = T.softmax_cross_entropy(logits, y).item()
    acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
    return acc, loss


def _pretrain(cfg, seed, train):
    """Full fine-tuning of the base network; its weights become the frozen W."""
    spec = copy.deepcopy(cfg.model)
    spec.adapters, spec.train_base = False, True
    base = build_model(spec, RngStream(seed).child("init"))
    opt = make_optimizer("adamw", base.trainable(), total_steps=cfg.pretrain_steps, lr=1e-2,
                         weight_decay=0.0)
    x, y = train
    for idx in batches(len(y), cfg.batch_size, cfg.pretrain_steps, seed + 7919):
        opt.zero_grad()
        T.backward(base.loss(x[idx], y[idx]))
        opt.step()
    return {k: p.data for k, p in base.params().items()}


def run_single(cfg, seed, log_path=None, checkpoint_path=None, train_data=None):
    """Train one seed; returns (row dict, step reports, metric series)."""
    t0 = time.perf_counter()
    train, test = train_data or make_dataset(cfg.dataset)
    model = build_model(cfg.model, RngStream(seed).child("init"))
    if cfg.pretrain_steps:
        src = make_dataset(DatasetSpec(**{**cfg.dataset.to_dict(), "seed": cfg.dataset.seed + 1,
                                          "label_noise": 0.0}))[0]
        pre = _pretrain(cfg, seed, src)
        own = model.params()
        for k, v in pre.items():
            own[k].data = v.copy()
    model.grad_evals = 0
    o = cfg.optimizer
    opt = make_optimizer(o.name, model.trainable(), total_steps=cfg.steps, lr=o.lr,
                         weight_decay=o.weight_decay, schedule=o.schedule, warmup=o.warmup)
    trainer = Trainer(cfg.method, model, opt, cfg.steps, seed=seed, sigma=cfg.sigma,
                      schedule_kind=cfg.schedule, rho=cfg.rho, n_samples=cfg.n_samples,
                      all_layers=cfg.all_layers, norm_refresh_every=cfg.norm_refresh_every,
                      track_ratio=cfg.track_ratio, per_layer=cfg.per_layer_sam)
    x, y = train
    xt, yt = test
    series = {"train": {"step": [], "acc": [], "loss": []}, "test": {"step": [], "acc": [], "loss": []}}
    reports = []
    logf = open(log_path, "w") if log_path else None
    try:
        for t, idx in enumerate(batches(len(y), cfg.batch_size, cfg.steps, seed)):
            rep = trainer.step((x[idx], y[idx]), t)
            reports.append(rep)
            if logf:
                logf.write(rep.to_json() + "\n")
            if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.steps:
                for split, (xs, ys) in (("train", train), ("test", test)):
                    acc, loss = evaluate(model, xs, ys)
                    series[split]["step"].append(t + 1)
                    series[split]["acc"].append(acc)
                    series[split]["loss"].append(loss)
    finally:
        if logf:
            logf.close()
    gap = generalization_gap(series["train"], series["test"])
    probe = train if cfg.sharpness.split == "train" else test
    sharp = sharpness_metric(model, probe, cfg.sharpness.radius, cfg.sharpness.samples, seed=seed)
    mem = extra_memory(cfg.method, model)
    row = {
        "method": cfg.method, "seed": seed, "strength": cfg.strength(), "rank": cfg.model.rank,
        "status": "ok",
        "train_acc": series["train"]["acc"][-1], "test_acc": series["test"]["acc"][-1],
        "train_loss": series["train"]["loss"][-1], "test_loss": series["test"]["loss"][-1],
        "sharpness": sharp, "acc_gap": gap["acc_gap"][-1], "loss_gap": gap["loss_gap"][-1],
        "grad_evals": model.grad_evals, "extra_memory_floats": mem["floats"],
        "seed_labels": mem["seed_labels"], "wall_time": time.perf_counter() - t0, "error": "",
    }
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, {"seed": seed, "config": cfg.to_dict(),
                                                 "metrics": {k: row[k] for k in METRIC_FIELDS}})
    return row, reports, series


def run_experiment(cfg, out_dir=None, param=None, value=None):
    """One row per seed; a failing seed becomes a 'failed' row and the rest still run."""
    out = Path(out_dir) if out_dir else (Path(cfg.output_dir) if cfg.output_dir else None)
    if out:
        (out / "logs").mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    table = ResultsTable()
    data = make_dataset(cfg.dataset)
    tag = cfg.method if param is None else f"{cfg.method}_{param}{value}"
    for seed in cfg.seeds:
        try:
            row, _, _ = run_single(
                cfg, seed,
                log_path=out / "logs" / f"{tag}_seed{seed}.jsonl" if out else None,
                checkpoint_path=out / "checkpoints" / f"{tag}_seed{seed}.npz" if out else None,
                train_data=data)
        except Exception as exc:  # row-level isolation
            log.error("run %s seed %s failed: %s", tag, seed, exc)
            row = {"method": cfg.method, "seed": seed, "strength": cfg.strength(),
                   "rank": cfg.model.rank, "status": "failed",
                   "error": f"{type(exc).__name__}: {exc}".replace("\n", " ")}
            log.debug(traceback.format_exc())
        row["param"], row["value"] = param, value
        table.append(row)
        if out:
            ResultsTable([table.rows[-1]]).to_csv(out / "results.csv", append=True)
    return table


def with_param(cfg, parameter, value):
    cfg = copy.deepcopy(cfg)
    if parameter == "sigma":
        if cfg.method != "flat_lora":
            raise ConfigError("sigma sweep needs method=flat_lora", ["sigma"])
        cfg.sigma = float(value)
    elif parameter == "rho":
        if cfg.method not in SAM_METHODS:
            raise ConfigError("rho sweep needs a SAM method", ["rho"])
        cfg.rho = float(value)
    elif parameter == "rank":
        cfg.model.rank = int(value)
    else:
        raise ConfigError("unknown sweep parameter", [parameter])
    return _finalize(cfg)


def sweep(cfg, parameter, values, out_dir=None):
    """Every value × every seed; aggregate with ``table.aggregate()``."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value", ["values"])
    table = ResultsTable()
    for v in values:
        table.extend(run_experiment(with_param(cfg, parameter, v), out_dir, parameter, v))
    return table
