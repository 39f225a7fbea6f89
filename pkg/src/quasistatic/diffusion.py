"""The limiting Gaussian process and distributional comparisons against it.

The limit is ``chi(t) = integral_0^t sigma_s dW_s`` with a deterministic
coefficient, so its law is Gaussian with covariance
``[chi]_{min(s, t)}`` where ``[chi]_t = integral_0^t sigma2_s ds``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .coefficients import DiffusionCurve, sigma_sqrt
from .montecarlo import CHUNK, MIN_ENSEMBLE, STREAM_DIFFUSION, PathEnsemble

EXIT_PASS = 0
EXIT_FAIL = 3
# paths of a degenerate limit are zero only up to rounding of the centering
ZERO_ATOL = 1e-12


# --------------------------------------------------------------------------
# Sampling and exact marginals
# --------------------------------------------------------------------------

def sample_diffusion(sig: DiffusionCurve, steps: int, count: int, seed: int) -> np.ndarray:
    """Euler-Maruyama paths on the uniform grid ``k / steps``; shape ``(count, steps + 1, d)``.

    Member ``i`` draws its normals from its own Philox stream, so paths do
    not depend on how members are batched.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if count < 1:
        raise ValueError("count must be at least 1")
    d = sig.dim
    dt = 1.0 / steps
    t_left = np.arange(steps) * dt
    roots = np.stack([np.atleast_2d(sigma_sqrt(s if d > 1 else s[0, 0])) for s in sig.at(t_left)])
    roots = roots * math.sqrt(dt)  # (steps, d, d)
    paths = np.zeros((count, steps + 1, d))
    for start in range(0, count, CHUNK):
        stop = min(start + CHUNK, count)
        z = np.empty((stop - start, steps, d))
        for row, i in enumerate(range(start, stop)):
            bg = np.random.Philox(key=int(seed), counter=[0, i, STREAM_DIFFUSION, 0])
            z[row] = np.random.Generator(bg).standard_normal((steps, d))
        inc = np.einsum("kab,mkb->mka", roots, z)
        paths[start:stop, 1:, :] = np.cumsum(inc, axis=1)
    return paths


def diffusion_ensemble(sig: DiffusionCurve, steps: int, count: int, seed: int) -> PathEnsemble:
    """:func:`sample_diffusion` paths wrapped as an ensemble with zero centering."""
    from .coefficients import zero_centering

    t = np.arange(steps + 1) / steps
    return PathEnsemble(0, t, zero_centering(t, sig.dim), sample_diffusion(sig, steps, count, seed),
                        {"source": "diffusion", "seed": seed})


def gaussian_marginal(sig: DiffusionCurve, t: float):
    """Variance ``[chi]_t`` of ``chi(t)`` (a ``d x d`` matrix for vector observables)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    qv = sig.quadratic_variation([t])[0]
    return float(qv[0, 0]) if sig.dim == 1 else qv


def ks_statistic(sample, variance: float) -> float:
    """Kolmogorov-Smirnov distance from ``N(0, variance)``.

    A zero variance means the point mass at 0, against which the distance is
    the fraction of samples beyond rounding level (``ZERO_ATOL``).
    """
    x = np.asarray(sample, dtype=float).ravel()
    if x.size < MIN_ENSEMBLE:
        raise ValueError(f"sample of {x.size} is below the minimum of {MIN_ENSEMBLE}")
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if variance == 0:
        return float(np.mean(np.abs(x) > ZERO_ATOL))
    return float(stats.kstest(x / math.sqrt(variance), "norm").statistic)


# --------------------------------------------------------------------------
# Ensemble comparison
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Tolerances:
    ks: float = 0.02
    cov: float = 0.03
    qv: float = 0.05


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    """KS per time, covariance-kernel deviations per pair of times, realized quadratic variation.

    ``cov_dev[i, j]`` is the largest entrywise deviation of the empirical
    covariance of ``chi(t_i), chi(t_j)`` from ``[chi]_{min(t_i, t_j)}``.
    """

    t_grid: np.ndarray
    ks: np.ndarray  # (T, d)
    cov_dev: np.ndarray  # (T, T)
    qv: np.ndarray  # (d,) realized
    qv_expected: np.ndarray  # (d,)
    tolerances: Tolerances = field(default_factory=Tolerances)

    @property
    def qv_dev(self) -> float:
        return float(np.max(np.abs(self.qv - self.qv_expected)))

    @property
    def ks_max(self) -> float:
        return float(np.nanmax(self.ks))

    @property
    def cov_max(self) -> float:
        return float(np.max(self.cov_dev))

    @property
    def var_dev(self) -> np.ndarray:
        return np.diag(self.cov_dev).copy()

    def axes(self) -> dict:
        tol = self.tolerances
        return {"ks": self.ks_max < tol.ks, "cov": self.cov_max < tol.cov, "qv": self.qv_dev < tol.qv}

    @property
    def passed(self) -> bool:
        return all(self.axes().values())

    @property
    def exit_code(self) -> int:
        return EXIT_PASS if self.passed else EXIT_FAIL

    def cov_dev_by_t(self) -> np.ndarray:
        """Largest deviation over pairs that involve each grid time."""
        return self.cov_dev.max(axis=1)

    def to_text(self) -> str:
        tol = self.tolerances
        ax = self.axes()
        lines = [
            f"passed: {self.passed}",
            f"ks_max: {self.ks_max!r}",
            f"ks_tol: {tol.ks!r}",
            f"ks_pass: {ax['ks']}",
            f"cov_max: {self.cov_max!r}",
            f"cov_tol: {tol.cov!r}",
            f"cov_pass: {ax['cov']}",
            f"qv_dev: {self.qv_dev!r}",
            f"qv_tol: {tol.qv!r}",
            f"qv_pass: {ax['qv']}",
        ]
        for j, t in enumerate(self.t_grid):
            lines.append(f"t={t:.10g}: ks={float(np.max(self.ks[j])):.6g} cov_dev={self.cov_dev_by_t()[j]:.6g}")
        return "\n".join(lines) + "\n"


def _qv_on(sig: DiffusionCurve, t_grid: np.ndarray) -> np.ndarray:
    return sig.quadratic_variation(t_grid)  # (T, d, d)


def compare_ensemble(ens: PathEnsemble, sig: DiffusionCurve, tolerances: Tolerances | None = None
                     ) -> ComparisonReport:
    """Check an ensemble of ``chi_n`` paths against the Gaussian limit with coefficient ``sig``."""
    tol = tolerances or Tolerances()
    if ens.dim != sig.dim:
        raise ValueError(f"ensemble has dimension {ens.dim}, diffusion curve {sig.dim}")
    if ens.size < MIN_ENSEMBLE:
        raise ValueError(f"ensemble of {ens.size} members is below the minimum of {MIN_ENSEMBLE}")
    t = ens.t_grid
    if sig.t_grid[0] > t[0] + 1e-12 or sig.t_grid[-1] < t[-1] - 1e-12:
        raise ValueError("diffusion curve does not cover the ensemble time grid")
    T, d = t.size, ens.dim
    qv = _qv_on(sig, t)

    ks = np.zeros((T, d))
    for j in range(T):
        for c in range(d):
            ks[j, c] = ks_statistic(ens.marginals[:, j, c], max(float(qv[j, c, c]), 0.0))

    x = ens.marginals - ens.marginals.mean(axis=0)
    flat = x.reshape(ens.size, T * d)
    emp = (flat.T @ flat / (ens.size - 1)).reshape(T, d, T, d)
    lo = np.minimum.outer(np.arange(T), np.arange(T))
    target = qv[lo]  # (T, T, d, d)
    cov_dev = np.max(np.abs(emp.transpose(0, 2, 1, 3) - target), axis=(2, 3))

    inc = np.diff(ens.marginals, axis=1)
    realized = np.mean(np.sum(inc ** 2, axis=1), axis=0)
    expected = np.diagonal(qv[-1] - qv[0]).copy()
    return ComparisonReport(t, ks, cov_dev, realized, expected, tol)
