"""AdamW / SGD over a name -> Tensor dict, with cosine learning-rate decay."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr, step, total_steps, warmup=0, min_ratio=0.0):
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    frac = min(1.0, (step - warmup) / max(1, total_steps - warmup))
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


class Optimizer:
    def __init__(self, params, lr, total_steps=None, schedule="cosine", warmup=0):
        self.params = dict(params)
        self.base_lr = float(lr)
        self.total_steps = total_steps
        self.schedule = schedule
        self.warmup = warmup
        self.step_count = 0

    def current_lr(self):
        if self.schedule == "cosine" and self.total_steps:
            return cosine_lr(self.base_lr, self.step_count, self.total_steps, self.warmup)
        return self.base_lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(p.grad * p.grad))
                             for p in self.params.values() if p.grad is not None))


class AdamW(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, **kw):
        super().__init__(params, lr, **kw)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self):
        lr = self.current_lr()
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - lr * (upd + self.weight_decay * p.data)
        return lr

    def state_dict(self):
        return {"step": self.step_count, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


class SGD(Optimizer):
    def __init__(self, params, lr=1e-2, momentum=0.0, weight_decay=0.0, **kw):
        super().__init__(params, lr, **kw)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self):
        lr = self.current_lr()
        self.step_count += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                self.buf[k] = self.momentum * self.buf[k] + g
                g = self.buf[k]
            p.data = p.data - lr * g
        return lr


def make_optimizer(name, params, total_steps=None, **kw):
    if name == "adamw":
        return AdamW(params, total_steps=total_steps, **kw)
    if name == "sgd":
        return SGD(params, total_steps=total_steps, **kw)
    raise ValueError(f"unknown optimizer {name!r}")
