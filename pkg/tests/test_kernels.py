import os
import subprocess
import sys

import numpy as np
import pytest

from quasistatic import kernels
from quasistatic.coefficients import step_index
from quasistatic.montecarlo import sample_initial
from quasistatic.phase import ArraySpec, Density, Observable, StepComponent, linear_curve

compiled = pytest.mark.skipif(kernels._ckernels is None, reason="compiled extension not built")

OBSERVABLES = [
    Observable.step(),
    Observable.cos(),
    Observable.cos_sin(),
    Observable([StepComponent((0.0, 0.3, 0.8), (1.0, -2.0, 0.5))]),
]


def float_args(n=200, members=300, seed=1):
    spec = ArraySpec(linear_curve(0.1))
    degrees, amps = spec.table(n)
    k, frac = step_index(n, np.linspace(0, 1, 13))
    x = sample_initial(Density.uniform(), members, seed).x
    return x, degrees, amps, np.asarray(spec.freqs, dtype=float), k, frac


@compiled
@pytest.mark.parametrize("obs", OBSERVABLES, ids=lambda o: o.name)
def test_float_kernel_parity(obs):
    x, degrees, amps, freqs, k, frac = float_args()
    packed = kernels.pack_observable(obs)
    a = kernels.birkhoff_float(x, degrees, amps, freqs, packed, k, frac, backend="compiled")
    b = kernels.birkhoff_float(x, degrees, amps, freqs, packed, k, frac, backend="python")
    # orbits agree to rounding for the first steps, then separate; compare a short horizon
    short = k <= 20
    assert np.allclose(a[:, short], b[:, short], atol=1e-8)


@compiled
@pytest.mark.parametrize("obs", OBSERVABLES, ids=lambda o: o.name)
def test_bits_kernel_parity(obs):
    n = 1000
    pts = sample_initial(Density.uniform(), 257, 4, horizon=n)
    k, frac = step_index(n, np.linspace(0, 1, 17))
    packed = kernels.pack_observable(obs)
    a = kernels.birkhoff_bits(pts.words, packed, k, frac, backend="compiled")
    b = kernels.birkhoff_bits(pts.words, packed, k, frac, backend="python")
    assert np.allclose(a, b, rtol=0, atol=1e-9)


@compiled
def test_galerkin_parity():
    gx, gw = np.polynomial.legendre.leggauss(3)
    gx, gw = (gx + 1) / 2, gw / 2
    breaks = np.sort(np.random.default_rng(0).random(500))
    a = kernels.galerkin_entries(breaks, 2, [1.0], [0.1], 256, gx, gw, backend="compiled")
    b = kernels.galerkin_entries(breaks, 2, [1.0], [0.1], 256, gx, gw, backend="python")
    for u, v in zip(a, b):
        assert np.allclose(u, v, atol=1e-12)


@compiled
def test_worker_count_does_not_change_results(monkeypatch):
    x, degrees, amps, freqs, k, frac = float_args(members=2000)
    packed = kernels.pack_observable(Observable.cos())
    monkeypatch.setenv("QDS_WORKERS", "1")
    a = kernels.birkhoff_float(x, degrees, amps, freqs, packed, k, frac)
    monkeypatch.setenv("QDS_WORKERS", "2")
    assert kernels.workers() == 2
    b = kernels.birkhoff_float(x, degrees, amps, freqs, packed, k, frac)
    assert np.array_equal(a, b)


def test_bad_worker_count_falls_back_to_one(monkeypatch):
    monkeypatch.setenv("QDS_WORKERS", "many")
    assert kernels.workers() == 1


def test_fallback_selected_by_environment():
    env = dict(os.environ, QDS_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "from quasistatic import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_python_float_kernel_matches_direct_iteration():
    x, degrees, amps, freqs, k, frac = float_args(n=50, members=20)
    got = kernels.birkhoff_float(x, degrees, amps, freqs, kernels.pack_observable(Observable.cos()), k, frac,
                                 backend="python")
    spec = ArraySpec(linear_curve(0.1))
    y = x.copy()
    fvals = []
    for j in range(1, 51):
        fvals.append(np.cos(2 * np.pi * y))
        y = spec.map(50, j)(y)
    fvals = np.array(fvals)
    cum = np.vstack([np.zeros(20), np.cumsum(fvals, axis=0)])
    ref = cum[k] + frac[:, None] * np.vstack([fvals, np.zeros(20)])[k]
    assert np.allclose(got[:, :, 0], ref.T, atol=1e-10)
