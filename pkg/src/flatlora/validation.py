"""Invariant / acceptance checks, runnable from the CLI (``flatlora validate``)."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .harness import config_from_dict, run_single
from .landscape import Direction, loss_surface
from .model import ModelSpec, build_model, lora_init, merge_weights
from .optim import AdamW
from .perturb import (apply_perturbation, make_record, output_variance_ratio,
                      remove_perturbation, SigmaSchedule)
from .rng import RngStream
from .toys import DoubleWell, QuadraticToy, curvature_proxy, smoothed_loss
from .trainers import (SamConfig, Trainer, equivalent_perturbation, extra_memory,
                       flat_lora_step, lora_sam_perturbations, lora_sam_step, lora_step,
                       sam_step_full)
from .data import DatasetSpec, batches, make_dataset

FD_STEP = 1e-5
FD_RTOL = 1e-4

# small training set, 30% label noise: plain LoRA memorises the noise
OVERFIT_TASK = {
    "dataset": {"kind": "gaussian_blobs", "size": 4000, "train_frac": 0.05, "noise": 1.0,
                "label_noise": 0.3, "seed": 0},
    "model": {"widths": [2, 128, 128, 2], "rank": 8, "alpha": 16},
    "optimizer": {"lr": 0.01},
    "steps": 4000,
    "batch_size": 32,
    "eval_every": 500,
    "sharpness": {"radius": 0.1, "samples": 10},
}
OVERFIT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        chk = fn(*a, **kw)
        chk.seconds = time.perf_counter() - t0
        return chk
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- finite differences

def numeric_grad(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` at array ``x`` (x is not modified)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def _op_cases():
    """(name, builder) where builder(rng) -> (list of input arrays, fn(tensors) -> Tensor)."""
    def u(rng, *shape):
        return rng.uniform(-2, 2, size=shape)

    def away_from_zero(rng, *shape):
        x = u(rng, *shape)
        return np.where(np.abs(x) < 1e-2, 0.5, x)

    cases = [
        ("matmul", lambda r: ([u(r, 3, 4), u(r, 4, 2)], lambda a, b: T.matmul(a, b))),
        ("batched_matmul", lambda r: ([u(r, 2, 3, 4), u(r, 2, 4, 2)], lambda a, b: T.matmul(a, b))),
        ("add", lambda r: ([u(r, 3, 4), u(r, 3, 4)], lambda a, b: T.add(a, b))),
        ("sub", lambda r: ([u(r, 3, 4), u(r, 3, 4)], lambda a, b: T.sub(a, b))),
        ("mul", lambda r: ([u(r, 3, 4), u(r, 3, 4)], lambda a, b: T.mul(a, b))),
        ("scale", lambda r: ([u(r, 5)], lambda a: T.scale(a, -1.7))),
        ("relu", lambda r: ([away_from_zero(r, 6)], lambda a: T.relu(a))),
        ("gelu", lambda r: ([u(r, 6)], lambda a: T.gelu(a))),
        ("add_bias", lambda r: ([u(r, 3, 4), u(r, 4)], lambda a, b: T.add_bias(a, b))),
        ("layernorm", lambda r: ([u(r, 3, 5), u(r, 5), u(r, 5)], lambda x, g, b: T.layernorm(x, g, b))),
        ("softmax", lambda r: ([u(r, 3, 4)], lambda a: T.softmax(a))),
        ("softmax_cross_entropy",
         lambda r: ([u(r, 4, 3)], lambda a, _y=r.integers(0, 3, 4): T.softmax_cross_entropy(a, _y))),
        ("transpose_reshape", lambda r: ([u(r, 2, 3, 4)],
                                         lambda a: T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)))),
        ("mean_axis", lambda r: ([u(r, 2, 3, 4)], lambda a: T.mean(a, axis=1))),
        ("embedding", lambda r: ([u(r, 5, 3)], lambda a, _i=r.integers(0, 5, (2, 4)): T.embedding(a, _i))),
        ("lora_forward", lambda r: ([u(r, 4, 5), u(r, 2, 5), u(r, 3, 2), u(r, 3, 5)], _lora_fn)),
        ("mlp_composite", lambda r: ([u(r, 6, 3), u(r, 5, 3), u(r, 5), u(r, 2, 5)], _mlp_fn)),
    ]
    return cases


def _lora_fn(x, A, B, W):
    h = T.matmul(x, T.transpose(W))
    low = T.matmul(T.matmul(x, T.transpose(A)), T.transpose(B))
    return T.add(h, T.scale(low, 0.75))


def _mlp_fn(x, W1, b1, W2):
    h = T.gelu(T.add_bias(T.matmul(x, T.transpose(W1)), b1))
    return T.softmax_cross_entropy(T.matmul(h, T.transpose(W2)), np.array([0, 1, 1, 0, 1, 0]))


def gradcheck(fn, arrays, rng):
    """Max relative error between backward() and central differences for every input."""
    out_probe = fn(*[T.Tensor(a) for a in arrays])
    weights = rng.uniform(-1, 1, size=out_probe.shape)

    def scalar(arrs):
        with T.no_grad():
            o = fn(*[T.Tensor(a) for a in arrs])
        return float(np.sum(o.data * weights))

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    loss = T.sum(T.mul(out, T.Tensor(weights))) if out.shape != () else T.scale(out, float(weights))
    T.backward(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(xi, i=i):
            arrs = list(arrays)
            arrs[i] = xi
            return scalar(arrs)
        worst = max(worst, rel_err(leaf.grad, numeric_grad(f, arrays[i])))
    return worst


@_timed
def check_gradients(instances=50, seed=0):
    """Acceptance check 1: every differentiable op vs central differences."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, build in _op_cases():
        w = 0.0
        for _ in range(instances):
            arrays, fn = build(rng)
            w = max(w, gradcheck(fn, arrays, rng))
        worst[name] = w
    bad = {k: v for k, v in worst.items() if not v < FD_RTOL}
    top = max(worst, key=worst.get)
    return Check("gradient correctness", not bad,
                 f"{len(worst)} ops x {instances}; worst {top} rel.err {worst[top]:.2e}"
                 + (f"; failing {bad}" if bad else ""))


@_timed
def check_lora_identities(seed=0, inputs=100):
    """Acceptance check 2: B=0 ⇒ base forward exactly; merged forward ≡ adapter forward."""
    rng = np.random.default_rng(seed)
    exact, worst = True, 0.0
    for i in range(inputs):
        m, n = rng.integers(2, 12, size=2)
        r = int(rng.integers(1, min(m, n) + 1))
        layer = lora_init(int(m), int(n), r, 2.0 * r, RngStream(seed).child("id", i))
        x = rng.uniform(-2, 2, size=(3, n))
        with T.no_grad():
            base = T.matmul(T.Tensor(x), T.Tensor(layer.weight.data.T)).data
            exact &= bool(np.array_equal(layer(x).data, base))
            layer.B.data = rng.normal(size=layer.B.shape)
            h = layer(x).data
            hm = x @ merge_weights(layer).T
        worst = max(worst, float(np.max(np.abs(h - hm))))
    ok = exact and worst < 1e-10
    return Check("LoRA identities", ok, f"B=0 exact: {exact}; max |h_lora - h_merged| {worst:.1e}")


@_timed
def check_seed_replay(trials=100, seed=0):
    """Acceptance check 3: apply→remove restores weights bit-exactly; state is m norms + 1 label."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(widths=[6, 16, 12, 3], rank=2)
    model = build_model(spec, RngStream(seed))
    for l in model.lora_layers():
        l.B.data = rng.normal(size=l.B.shape) * 0.1
    layers = model.lora_layers()
    snapshot = model.state_arrays()
    ok, state_ok = True, True
    for t in range(trials):
        layer = layers[int(rng.integers(len(layers)))]
        sigma = float(rng.uniform(0, 0.3))
        rec = make_record(layer.name, merge_weights(layer), sigma, int(rng.integers(2 ** 62)), t)
        apply_perturbation(model, [rec])
        with T.no_grad():
            model.loss(np.zeros((1, 6)), np.zeros(1, dtype=int))
        remove_perturbation(model, [rec])
        now = model.state_arrays()
        ok &= all(np.array_equal(now[k], snapshot[k]) for k in snapshot)
        ok &= all(p.delta is None for p in model.params().values())
        state_ok &= rec.persistent_floats() == layer.out_features and len(rec.seed_label) == 2
    return Check("seed-replay exactness", ok and state_ok,
                 f"{trials} triples bit-exact: {ok}; state = m norms + 1 label: {state_ok}")


@_timed
def check_variance_amplification(samples=100_000, sigmas=(0.05, 0.1, 0.2), dims=(16, 64, 256),
                                 seed=0, z=4.0):
    """Acceptance check 4: output variance ratio ≈ 1+σ² (5%), no trend in input dimension."""
    rng = np.random.default_rng(seed)
    ok, worst_rel, worst_z = True, 0.0, 0.0
    for s in sigmas:
        ratios, ses = [], []
        for n in dims:
            w = rng.normal(size=(1, n))
            r, se = output_variance_ratio(w, s, samples, seed=seed + n)
            ratios.append(r[0])
            ses.append(se[0])
            rel = abs(r[0] - (1 + s * s)) / (1 + s * s)
            worst_rel = max(worst_rel, rel)
            ok &= rel < 0.05
        for i in range(len(dims)):
            for j in range(i + 1, len(dims)):
                zz = abs(ratios[i] - ratios[j]) / math.hypot(ses[i], ses[j])
                worst_z = max(worst_z, zz)
                ok &= zz < z
    return Check("variance amplification 1+σ²", ok,
                 f"max rel. dev {worst_rel:.2%} (<5%); max pairwise z across n {worst_z:.2f} (<{z})")


@_timed
def check_equivalent_algebra(instances=100, seed=0):
    """Acceptance check 5: closed c-form = three-term expansion; B=0 ⇒ c·GAᵀA exactly."""
    rng = np.random.default_rng(seed)
    worst, exact = 0.0, True
    for _ in range(instances):
        m, n = rng.integers(2, 10, size=2)
        r = int(rng.integers(1, min(m, n) + 1))
        A, B, G = rng.normal(size=(r, n)), rng.normal(size=(m, r)), rng.normal(size=(m, n))
        rho = float(rng.uniform(0.01, 1.0))
        eA, eB = lora_sam_perturbations(A, B, G, rho)
        expansion = B @ eA + eB @ A + eB @ eA
        worst = max(worst, rel_err(equivalent_perturbation(A, B, G, rho), expansion))
        Z = np.zeros((m, r))
        c = rho / math.sqrt(float(np.sum((G @ A.T) ** 2)))
        eA0, eB0 = lora_sam_perturbations(A, Z, G, rho)
        exact &= bool(np.array_equal(Z @ eA0 + eB0 @ A + eB0 @ eA0, (c * (G @ A.T)) @ A))
        exact &= bool(np.array_equal(equivalent_perturbation(A, Z, G, rho), c * (G @ A.T @ A)))
    return Check("LoRA-SAM perturbation algebra", worst < 1e-10 and exact,
                 f"max rel. diff {worst:.1e} (<1e-10); B=0 reduces exactly: {exact}")


def _blob_setup(seed, spec=None):
    (x, y), _ = make_dataset(DatasetSpec(size=2000, seed=seed))
    model = build_model(spec or ModelSpec(), RngStream(seed).child("init"))
    return model, x, y


@_timed
def check_ratio_statistic(steps=50, seed=0, threshold=0.9):
    """Acceptance check 6: ‖ε_B A‖/‖ε_W‖ > 0.9 at every LoRA-SAM step from standard init."""
    model, x, y = _blob_setup(seed)
    opt = AdamW(model.trainable(), lr=1e-3, total_steps=steps)
    cfg = SamConfig(0.05, "lora_AB")
    lowest = 1.0
    for t, idx in enumerate(batches(len(y), 64, steps, seed)):
        rep = lora_sam_step(model, (x[idx], y[idx]), opt, cfg, t, track_ratio=True)
        lowest = min([lowest] + list(rep.ratio.values()))
    return Check("LoRA-SAM ratio statistic", lowest > threshold,
                 f"min ratio over {steps} steps and all layers {lowest:.4f} (>{threshold})")


@_timed
def check_sigma_zero_equivalence(steps=200, seed=0):
    """Acceptance check 7: Flat-LoRA with σ≡0 and LoRA give bit-identical trajectories."""
    runs = []
    for method in ("lora", "flat_lora"):
        model, x, y = _blob_setup(seed)
        opt = AdamW(model.trainable(), lr=1e-3, total_steps=steps)
        sched = SigmaSchedule(0.0, steps, "cosine_increase")
        traj = []
        for t, idx in enumerate(batches(len(y), 64, steps, seed)):
            if method == "lora":
                rep = lora_step(model, (x[idx], y[idx]), opt, t)
            else:
                rep = flat_lora_step(model, (x[idx], y[idx]), opt, sched, t, seed=seed)
            traj.append((rep.perturbed_loss, model.state_arrays()))
        runs.append(traj)
    same = all(a[0] == b[0] and all(np.array_equal(a[1][k], b[1][k]) for k in a[1])
               for a, b in zip(*runs))
    return Check("σ≡0 equivalence", same, f"{steps} steps bit-identical: {same}")


@_timed
def check_cost_counters(steps=5, seed=0):
    """Acceptance check 8: gradient evaluations per step and perturbation bookkeeping."""
    evals, mem = {}, {}
    for method, kw in (("lora", {}), ("flat_lora", {"sigma": 0.05}), ("sam_full", {"rho": 0.05}),
                       ("lora_sam", {"rho": 0.05})):
        model, x, y = _blob_setup(seed)
        model.grad_evals = 0
        opt = AdamW(model.trainable(), lr=1e-3, total_steps=steps)
        tr = Trainer(method, model, opt, steps, seed=seed, schedule_kind="constant", **kw)
        for t, idx in enumerate(batches(len(y), 64, steps, seed)):
            rep = tr.step((x[idx], y[idx]), t)
            if method in ("flat_lora", "sam_full"):
                mem[method] = rep.extra_state_floats
        evals[method] = model.grad_evals / steps
        if method == "flat_lora":
            m_sum = sum(l.out_features for l in model.lora_layers())
            mn_sum = sum(l.out_features * l.in_features for l in model.lora_layers())
            labels = rep.seed_labels
            n_layers = len(model.lora_layers())
    ok = (evals["lora"] == 1 and evals["flat_lora"] == 1
          and evals["sam_full"] == 2 and evals["lora_sam"] == 2)
    ok &= mem["flat_lora"] == m_sum and labels == n_layers and mem["sam_full"] == mn_sum
    ok &= extra_memory("flat_lora", model)["floats"] == m_sum
    return Check("cost counters", ok,
                 f"grad evals/step {evals}; extra floats flat={mem['flat_lora']} (Σm={m_sum}) "
                 f"sam_full={mem['sam_full']} (Σmn={mn_sum})")


def overfit_rows(method, sigma=None, seeds=OVERFIT_SEEDS, task=None):
    """Result rows of the overfit task for one method (one row per seed)."""
    task = task or OVERFIT_TASK
    kw = {"sigma": sigma} if method == "flat_lora" else {}
    cfg = config_from_dict({**task, "method": method, "seeds": list(seeds), **kw})
    data = make_dataset(cfg.dataset)
    return [run_single(cfg, s, train_data=data)[0] for s in seeds]


@_timed
def check_flatness_separation(seeds=OVERFIT_SEEDS, sigma=0.1, lora_rows=None, flat_rows=None):
    """Acceptance check 9: Flat-LoRA(σ=0.1) flatter in ≥4/5 seeds and mean gap no larger."""
    lora_rows = lora_rows or overfit_rows("lora", seeds=seeds)
    flat_rows = flat_rows or overfit_rows("flat_lora", sigma, seeds=seeds)
    wins = sum(f["sharpness"] < l["sharpness"] for f, l in zip(flat_rows, lora_rows))
    gap_f = float(np.mean([r["acc_gap"] for r in flat_rows]))
    gap_l = float(np.mean([r["acc_gap"] for r in lora_rows]))
    need = math.ceil(0.8 * len(lora_rows))
    ok = wins >= need and gap_f <= gap_l
    sf = np.mean([r["sharpness"] for r in flat_rows])
    sl = np.mean([r["sharpness"] for r in lora_rows])
    return Check("flatness separation", ok,
                 f"flatter Flat-LoRA seeds {wins}/{len(lora_rows)} (>={need}); mean sharpness "
                 f"flat {sf:.4f} vs lora {sl:.4f}; mean gap flat {gap_f:.4f} vs lora {gap_l:.4f}; "
                 f"training {sum(r['wall_time'] for r in lora_rows + flat_rows):.0f}s")


@_timed
def check_smoothing(sigmas=(0.05, 0.1, 0.2), seed=0):
    """Acceptance check 10: smoothed double-well curvature strictly decreases with σ."""
    toy = DoubleWell()
    grid = np.linspace(-2, 2, 801)
    h = grid[1] - grid[0]
    curv = [curvature_proxy(toy.loss(grid), h)]
    curv += [curvature_proxy(smoothed_loss(toy.loss, grid, s, seed=seed), h) for s in sigmas]
    ok = all(a > b for a, b in zip(curv, curv[1:]))
    return Check("smoothing reduces curvature", ok,
                 "curvature " + " > ".join(f"{c:.2f}" for c in curv) + f" for σ = 0, {sigmas}")


@_timed
def check_landscape_probe(seed=0):
    """Acceptance check 11: origin cell = clean loss; quadratic toy surface = α²."""
    model, x, y = _blob_setup(seed)
    from .landscape import filter_normalized_direction
    before = model.state_arrays()
    grid = loss_surface(model, (x, y), filter_normalized_direction(model, seed), k=21, radius=0.5)
    with T.no_grad():
        clean = model.loss(x, y).item()
    origin_ok = grid.origin == clean
    restored = all(np.array_equal(before[k], v) for k, v in model.state_arrays().items())
    toy = QuadraticToy({"w": np.zeros((1, 1))})
    g = loss_surface(toy, None, Direction({"w": np.ones((1, 1))}), k=201, radius=1.0)
    err = float(np.max(np.abs(g.values - g.alphas ** 2)))
    ok = origin_ok and restored and err < 1e-10
    return Check("landscape probe", ok,
                 f"origin exact: {origin_ok}; weights restored: {restored}; max |L-α²| {err:.1e}")


ALL_CHECKS = (check_gradients, check_lora_identities, check_seed_replay,
              check_variance_amplification, check_equivalent_algebra, check_ratio_statistic,
              check_sigma_zero_equivalence, check_cost_counters, check_flatness_separation,
              check_smoothing, check_landscape_probe)
SLOW_CHECKS = (check_flatness_separation,)


def run_all(skip_slow=False, echo=print):
    results = []
    for fn in ALL_CHECKS:
        if skip_slow and fn in SLOW_CHECKS:
            continue
        chk = fn()
        if echo:
            echo(chk.line())
        results.append(chk)
    return results
