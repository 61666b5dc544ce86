"""Time the tanh-jet kernels with numba against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--points 2048] [--width 128] [--repeat 20]

Plans cover the jets the presets need: (x, t) up to u_xx / u_t, up to the
fourth x-derivative (1D Cahn-Hilliard) and (x, y, t) second order.
"""
import argparse
import os
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np

from raepinn import kernels
from raepinn.network import get_plan

PLANS = {
    "ac1d": (2, [(2, 0), (0, 1)]),
    "ch1d": (2, [(4, 0), (0, 1)]),
    "ac2d": (3, [(2, 0, 0), (0, 2, 0), (0, 0, 1)]),
}


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(name, dim, alphas, args, rng):
    plan = get_plan(dim, alphas)
    z = rng.normal(scale=0.5, size=(len(plan), args.points, args.width))
    dh = rng.normal(size=z.shape)
    result = {}
    for label, disabled in (("numpy", "1"), ("numba", "0")):
        os.environ["RAEPINN_DISABLE_NUMBA"] = disabled
        if label == "numba" and not kernels.use_numba():
            continue
        h = kernels.tanh_jet_forward(z, *plan.tables)  # warm-up / compile
        kernels.tanh_jet_backward(z, h[0], dh, *plan.tables)
        fwd = best_of(lambda: kernels.tanh_jet_forward(z, *plan.tables), args.repeat)
        bwd = best_of(lambda: kernels.tanh_jet_backward(z, h[0], dh, *plan.tables), args.repeat)
        result[label] = (fwd, bwd, h)
    line = f"{name:5s} C={len(plan):2d}"
    for label, (fwd, bwd, _) in result.items():
        line += f"  {label}: fwd {fwd * 1e3:7.2f} ms bwd {bwd * 1e3:7.2f} ms"
    if len(result) == 2:
        (f0, b0, h0), (f1, b1, h1) = result["numpy"], result["numba"]
        line += f"  speedup {(f0 + b0) / (f1 + b1):4.1f}x  max|dh| {np.abs(h0 - h1).max():.1e}"
    print(line)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=2048)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    for name, (dim, alphas) in PLANS.items():
        run(name, dim, alphas, args, rng)
    os.environ.pop("RAEPINN_DISABLE_NUMBA", None)


if __name__ == "__main__":
    main()
