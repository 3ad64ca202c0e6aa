"""Time each hot kernel on its numba and pure-numpy paths.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Also times one Flat-LoRA training step under the active backend
(set FLATLORA_NUMBA=0 to time the numpy path end to end).
"""
import argparse
import time

import numpy as np

from flatlora import _accel, kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (jit compile / cache load)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(scale):
    rng = np.random.default_rng(0)
    n_draws = int(2_000_000 * scale)
    m, n = int(512 * scale) or 1, 1024
    scales = rng.uniform(0.01, 0.1, size=m)
    w = rng.normal(size=(m, n))
    x = rng.normal(size=(int(4096 * scale) or 1, 64))
    xhat, rstd = K.layernorm_fwd_np(x, 1e-5)
    g = rng.normal(size=x.shape)
    key, ctr = np.uint64(0x1234), np.uint64(7)
    return [
        (f"counter_normals ({n_draws:,})",
         lambda: K.counter_normals_np(int(key), int(ctr), n_draws),
         lambda: K.counter_normals_nb(key, ctr, n_draws)),
        (f"counter_uniforms ({n_draws:,})",
         lambda: K.counter_uniforms_np(int(key), int(ctr), n_draws),
         lambda: K.counter_uniforms_nb(key, ctr, n_draws)),
        (f"scaled_row_normals ({m}x{n})",
         lambda: K.scaled_row_normals_np(int(key), int(ctr), scales, n),
         lambda: K.scaled_row_normals_nb(key, ctr, scales, n)),
        (f"row_norms ({m}x{n})", lambda: K.row_norms_np(w), lambda: K.row_norms_nb(w)),
        (f"layernorm_fwd ({x.shape[0]}x64)",
         lambda: K.layernorm_fwd_np(x, 1e-5), lambda: K.layernorm_fwd_nb(x, 1e-5)),
        (f"layernorm_bwd ({x.shape[0]}x64)",
         lambda: K.layernorm_bwd_np(g, xhat, rstd), lambda: K.layernorm_bwd_nb(g, xhat, rstd)),
    ]


def step_time(repeat):
    from flatlora.data import DatasetSpec, make_dataset
    from flatlora.model import ModelSpec, build_model
    from flatlora.optim import AdamW
    from flatlora.perturb import SigmaSchedule
    from flatlora.rng import RngStream
    from flatlora.trainers import flat_lora_step

    (x, y), _ = make_dataset(DatasetSpec(size=512))
    model = build_model(ModelSpec(widths=[2, 256, 256, 2], rank=8), RngStream(0))
    opt = AdamW(model.trainable(), lr=1e-3)
    sched = SigmaSchedule(0.1, 10, "constant")
    batch = (x[:64], y[:64])
    return best_of(lambda: flat_lora_step(model, batch, opt, sched, 1), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<34}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, np_fn, nb_fn in cases(args.scale):
        t_np, t_nb = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        print(f"{name:<34}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x")
    print(f"\nflat_lora_step, backend={_accel.backend()}: {1e3 * step_time(args.repeat):.2f} ms")


if __name__ == "__main__":
    main()
