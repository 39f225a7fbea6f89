"""Compiled vs numpy kernels: time per member-step for the orbit loops.

Usage::

    python3 benchmarks/bench_kernels.py [--members 20000] [--steps 4096] [--repeat 3]
"""

import argparse
import time

import numpy as np

from quasistatic import kernels
from quasistatic.coefficients import step_index
from quasistatic.montecarlo import sample_initial
from quasistatic.phase import ArraySpec, Density, Observable, linear_curve
from quasistatic.transfer import TransferOperator


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--members", type=int, default=20_000)
    p.add_argument("--steps", type=int, default=4096)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    m, n = args.members, args.steps

    spec = ArraySpec(linear_curve(0.1))
    degrees, amps = spec.table(n)
    freqs = np.asarray(spec.freqs, dtype=float)
    k, frac = step_index(n, np.linspace(0, 1, 65))
    obs = kernels.pack_observable(Observable.cos())
    step_obs = kernels.pack_observable(Observable.step())
    pts = sample_initial(Density.uniform(), m, 1, horizon=n)

    backends = ["python"] + (["compiled"] if kernels._ckernels is not None else [])
    print(f"members={m} steps={n} workers={kernels.workers()} default backend={kernels.BACKEND}")
    print(f"{'kernel':<10}{'backend':<10}{'seconds':>10}{'ns/step':>10}")
    results = {}
    for name, call in (
        ("float", lambda b: kernels.birkhoff_float(pts.x, degrees, amps, freqs, obs, k, frac, backend=b)),
        ("bits", lambda b: kernels.birkhoff_bits(pts.words, step_obs, k, frac, backend=b)),
    ):
        for b in backends:
            sec = best_of(lambda: call(b), args.repeat)
            results[name, b] = sec
            print(f"{name:<10}{b:<10}{sec:>10.3f}{1e9 * sec / (m * n):>10.1f}")
    for name in ("float", "bits"):
        if (name, "compiled") in results:
            print(f"{name}: compiled speedup x{results[name, 'python'] / results[name, 'compiled']:.1f}")

    # the root solve for the preimages is shared, so the gap here is the quadrature loop
    tmap = linear_curve(0.1).at(0.5)
    default = kernels.BACKEND
    for b in backends:
        kernels.BACKEND = b
        sec = best_of(lambda: TransferOperator.from_map(tmap, 4096), args.repeat)
        print(f"operator assembly M=4096 {b:<10}{1e3 * sec:>8.1f} ms")
    kernels.BACKEND = default

if __name__ == "__main__":
    main()
