"""Drift, diffusion and centering curves of the limit laws.

All quantities are computed from transfer operators on the density grid;
nothing here samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import polygamma

from .phase import ArraySpec, Density, MapCurve, ModelError, Observable, grid_points
from .transfer import DEFAULT_M, iter_pushforward, srb_density, transfer_operator

PSD_TOL = 1e-10
STATIONARY_TOL = 1e-15
K_MAX = 500


class DivergenceError(RuntimeError):
    """Green-Kubo terms failed to decay."""


def step_index(n: int, t) -> tuple[np.ndarray, np.ndarray]:
    """``(floor(n t), frac(n t))`` with products within 1e-9 of an integer snapped to it."""
    nt = np.asarray(t, dtype=float) * n
    k = np.floor(nt + 1e-9)
    frac = np.where(nt - k > 0, nt - k, 0.0)
    return k.astype(np.int64), frac


def _obs_grid(f: Observable, M: int) -> np.ndarray:
    return f(grid_points(M))


def _scalarize(v: np.ndarray, f: Observable):
    return float(v.reshape(-1)[0]) if f.dim == 1 else v


# --------------------------------------------------------------------------
# SRB means and the drift
# --------------------------------------------------------------------------

def _srb_mean_vec(curve: MapCurve, f: Observable, t: float, M: int, left: bool) -> np.ndarray:
    rho = srb_density(curve.at(t, left=left), M=M).grid_values
    return (rho[:, None] * _obs_grid(f, M)).mean(axis=0)


def srb_mean(curve: MapCurve, f: Observable, t: float, M: int = DEFAULT_M, left: bool = False):
    """``integral f d(mu_t)`` for the invariant measure of ``curve(t)``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return _scalarize(_srb_mean_vec(curve, f, t, M, left), f)


def piece_nodes(curve: MapCurve, per_piece: int) -> list[tuple[np.ndarray, bool]]:
    """Uniform nodes on each closed piece; the final node of a piece is a left limit."""
    out = []
    for p in curve.pieces:
        out.append((np.linspace(p.start, p.end, per_piece), p.end < 1.0))
    return out


@dataclass(frozen=True, eq=False)
class DriftCurve:
    t_grid: np.ndarray
    values: np.ndarray  # (T, d)

    def __call__(self, t):
        return np.stack([np.interp(t, self.t_grid, self.values[:, c]) for c in range(self.values.shape[1])],
                        axis=-1)

    def to_csv(self, path, names=None) -> None:
        _write_curve_csv(path, self.t_grid, self.values, names or _names(self.values.shape[1], "zeta"))


def drift_zeta(curve: MapCurve, f: Observable, t_grid, nodes_per_piece: int = 257,
               M: int = DEFAULT_M) -> DriftCurve:
    """``zeta(t) = integral_0^t mu_s(f) ds``, piece by piece.

    ``mu_s(f)`` is sampled on uniform nodes of each piece (left limit at the
    right end of a piece, so no node straddles a jump) and integrated through
    its cubic spline. On node sums this is the Richardson-corrected
    trapezoid rule, and it stays fourth order at arbitrary ``t``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0) or t_grid.min() < 0 or t_grid.max() > 1:
        raise ValueError("t_grid must be sorted inside [0, 1]")
    if nodes_per_piece < 4:
        raise ValueError("need at least four nodes per piece")
    d = f.dim
    out = np.zeros((t_grid.size, d))
    base = np.zeros(d)
    for p, (s, last_left) in zip(curve.pieces, piece_nodes(curve, nodes_per_piece)):
        mu = np.array([_srb_mean_vec(curve, f, float(si), M, left=(last_left and i == s.size - 1))
                       for i, si in enumerate(s)])
        antider = CubicSpline(s, mu, axis=0).antiderivative()
        inside = (t_grid >= p.start) & ((t_grid < p.end) | (p.end == 1.0))
        out[inside] = base + antider(t_grid[inside])
        base = base + antider(p.end)
    return DriftCurve(t_grid, out)


# --------------------------------------------------------------------------
# Green-Kubo diffusion coefficient
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GreenKubo:
    value: np.ndarray  # (d, d)
    terms: int
    tail_estimate: float


def green_kubo(tmap, f: Observable, tol: float = 1e-12, M: int = DEFAULT_M, k_max: int = K_MAX) -> GreenKubo:
    """Variance plus twice the summed autocorrelations of ``f`` under the invariant measure of ``tmap``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    rho = srb_density(tmap, M=M).grid_values
    fv = _obs_grid(f, M)
    fhat = fv - (rho[:, None] * fv).mean(axis=0)
    g = rho[:, None] * fhat
    total = fhat.T @ g / M
    op = transfer_operator(tmap, M)
    norms = []
    tail = math.inf
    for k in range(1, k_max + 1):
        g = op.apply(g)
        ck = fhat.T @ g / M
        total = total + ck + ck.T
        nk = float(np.max(np.abs(ck)))
        norms.append(nk)
        if nk == 0.0:
            tail = 0.0
            break
        if len(norms) >= 4 and norms[-4] > 0:
            theta = (nk / norms[-4]) ** (1.0 / 3.0)
        else:
            theta = 0.5
        if theta < 1.0:
            tail = 2.0 * nk * theta / (1.0 - theta)
            if nk < tol * (1.0 - theta) and tail < tol:
                break
    else:
        raise DivergenceError(f"Green-Kubo terms still at {norms[-1]:.3g} after {k_max} steps")
    sym = 0.5 * (total + total.T)
    w, v = np.linalg.eigh(sym)
    if w.min() < -PSD_TOL:
        raise DivergenceError(f"diffusion matrix has negative eigenvalue {w.min():.3g}")
    if w.min() < 0:
        sym = (v * np.clip(w, 0.0, None)) @ v.T
    return GreenKubo(sym, len(norms), tail)


def sigma2_at(curve: MapCurve, f: Observable, t: float, tol: float = 1e-12, M: int = DEFAULT_M,
              left: bool = False):
    """Diffusion coefficient at time ``t`` (scalar for scalar ``f``, else a ``d x d`` matrix).

    At a jump point the right limit is used unless ``left`` is set.
    """
    gk = green_kubo(curve.at(t, left=left), f, tol=tol, M=M)
    return float(gk.value[0, 0]) if f.dim == 1 else gk.value


def sigma_sqrt(sigma2):
    """Symmetric PSD square root."""
    a = np.asarray(sigma2, dtype=float)
    if a.ndim == 0:
        if a < -PSD_TOL:
            raise ValueError("negative variance")
        return float(math.sqrt(max(float(a), 0.0)))
    if a.shape[0] != a.shape[1] or np.max(np.abs(a - a.T)) > 1e-8:
        raise ValueError("input is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if w.min() < -PSD_TOL:
        raise ValueError(f"input is not PSD (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True, eq=False)
class DiffusionCurve:
    """Diffusion coefficient on a time grid; a repeated time marks a jump (left value first)."""

    t_grid: np.ndarray
    sigma2_values: np.ndarray  # (T, d, d)
    truncation: int = 0
    tail_estimate: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        s = np.asarray(self.sigma2_values, dtype=float)
        if s.ndim == 1:
            s = s[:, None, None]
        if t.size != s.shape[0] or np.any(np.diff(t) < 0):
            raise ValueError("sigma2 values must match a sorted time grid")
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "sigma2_values", s)

    @property
    def dim(self) -> int:
        return self.sigma2_values.shape[1]

    @classmethod
    def constant(cls, sigma2, d: int | None = None) -> "DiffusionCurve":
        s = np.atleast_2d(np.asarray(sigma2, dtype=float))
        return cls(np.array([0.0, 1.0]), np.stack([s, s]))

    @classmethod
    def piecewise(cls, breaks, values) -> "DiffusionCurve":
        """Piecewise-constant scalar coefficient: ``values[i]`` on ``[breaks[i], breaks[i+1])``."""
        t, v = [], []
        for a, b, s in zip(breaks[:-1], breaks[1:], values):
            t += [a, b]
            v += [s, s]
        return cls(np.array(t), np.array(v, dtype=float))

    def at(self, t) -> np.ndarray:
        """Right-continuous linear interpolation; shape ``(len(t), d, d)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tg = self.t_grid
        j = np.clip(np.searchsorted(tg, t, side="right") - 1, 0, tg.size - 2)
        # skip zero-length (jump) segments so right limits are used
        while True:
            zero = (tg[j + 1] == tg[j]) & (j + 1 < tg.size - 1)
            if not zero.any():
                break
            j = np.where(zero, j + 1, j)
        h = tg[j + 1] - tg[j]
        w = np.where(h > 0, (t - tg[j]) / np.where(h > 0, h, 1.0), 0.0)
        w = np.clip(w, 0.0, 1.0)[:, None, None]
        return (1 - w) * self.sigma2_values[j] + w * self.sigma2_values[j + 1]

    def quadratic_variation(self, t) -> np.ndarray:
        """``integral_0^t sigma2_s ds`` of the interpolant; shape ``(len(t), d, d)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tg, s = self.t_grid, self.sigma2_values
        seg = 0.5 * np.diff(tg)[:, None, None] * (s[1:] + s[:-1])
        cum = np.concatenate([np.zeros((1,) + s.shape[1:]), np.cumsum(seg, axis=0)])
        out = np.empty((t.size,) + s.shape[1:])
        for i, ti in enumerate(t):
            j = int(np.clip(np.searchsorted(tg, ti, side="right") - 1, 0, tg.size - 2))
            h = tg[j + 1] - tg[j]
            if h <= 0:
                out[i] = cum[j]
                continue
            w = min(max(ti - tg[j], 0.0), h)
            s_t = s[j] + (s[j + 1] - s[j]) * (w / h)
            out[i] = cum[j] + 0.5 * w * (s[j] + s_t)
        return out

    def scaled(self, factor: float) -> "DiffusionCurve":
        return DiffusionCurve(self.t_grid, self.sigma2_values * factor, self.truncation, self.tail_estimate)

    def to_csv(self, path) -> None:
        d = self.dim
        names = [f"sigma2_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        _write_curve_csv(path, self.t_grid, self.sigma2_values.reshape(len(self.t_grid), -1), names)


def diffusion_curve(curve: MapCurve, f: Observable, nodes_per_piece: int = 65, tol: float = 1e-12,
                    M: int = DEFAULT_M) -> DiffusionCurve:
    """Green-Kubo coefficient on uniform nodes of every piece, left limits at jumps."""
    ts, vals = [], []
    K, tail = 0, 0.0
    for s, last_left in piece_nodes(curve, nodes_per_piece):
        for i, si in enumerate(s):
            gk = green_kubo(curve.at(float(si), left=(last_left and i == s.size - 1)), f, tol=tol, M=M)
            ts.append(float(si))
            vals.append(gk.value)
            K = max(K, gk.terms)
            tail = max(tail, gk.tail_estimate)
    return DiffusionCurve(np.array(ts), np.array(vals), K, tail)


# --------------------------------------------------------------------------
# Centering sequences
# --------------------------------------------------------------------------

CENTERING_KINDS = ("lebesgue_mean", "measure_mean", "explicit_zeta", "custom", "zero")


@dataclass(frozen=True, eq=False)
class CenteringCurve:
    t_grid: np.ndarray
    values: np.ndarray  # (T, d)
    kind: str = "custom"
    label: str = ""

    def __post_init__(self):
        if self.kind not in CENTERING_KINDS:
            raise ValueError(f"unknown centering kind {self.kind!r}")
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "t_grid", np.asarray(self.t_grid, dtype=float))

    def to_csv(self, path) -> None:
        _write_curve_csv(path, self.t_grid, self.values, _names(self.values.shape[1], "c"))


def _step_means_impl(spec: ArraySpec, n: int, f: Observable, rho0: np.ndarray) -> np.ndarray:
    M = rho0.size
    fv = _obs_grid(f, M)
    out = np.empty((n + 1, f.dim))
    constant = spec.is_constant()
    prev = None
    for k, h in iter_pushforward(spec, n, rho0, n):
        out[k] = fv.T @ h / M
        # a frozen map reaches its fixed point; later means repeat
        if constant and prev is not None and np.max(np.abs(h - prev)) <= STATIONARY_TOL:
            out[k + 1:] = out[k]
            break
        prev = h
    return out


@lru_cache(maxsize=64)
def _lebesgue_step_means(spec: ArraySpec, n: int, f: Observable, M: int) -> np.ndarray:
    out = _step_means_impl(spec, n, f, np.ones(M))
    out.setflags(write=False)
    return out


def step_means(spec: ArraySpec, n: int, f: Observable, rho0: Density | None = None,
               M: int = DEFAULT_M) -> np.ndarray:
    """``m(f * rho_{n,k})`` for ``k = 0..n``; Lebesgue start when ``rho0`` is None."""
    if n < 1:
        raise ValueError("n must be positive")
    if rho0 is None:
        return _lebesgue_step_means(spec, int(n), f, int(M))
    return _step_means_impl(spec, n, f, rho0.grid_values)


def centering_from_step_means(means: np.ndarray, n: int, t_grid) -> np.ndarray:
    """``(1/n) [sum_{k < floor(nt)} means_k + frac(nt) means_{floor(nt)}]`` on ``t_grid``."""
    k, frac = step_index(n, t_grid)
    cum = np.vstack([np.zeros(means.shape[1]), np.cumsum(means, axis=0)])
    kk = np.minimum(k, n)
    return (cum[kk] + frac[:, None] * means[kk]) / n


def lebesgue_centering(spec: ArraySpec, n: int, f: Observable, t_grid, M: int = DEFAULT_M) -> CenteringCurve:
    """``m(zeta_n(., t))`` evaluated exactly through Lebesgue pushforwards."""
    t_grid = np.asarray(t_grid, dtype=float)
    vals = centering_from_step_means(step_means(spec, n, f, None, M), n, t_grid)
    return CenteringCurve(t_grid, vals, "lebesgue_mean", f"n={n}")


def measure_centering(spec: ArraySpec, n: int, f: Observable, nu: Density, t_grid) -> CenteringCurve:
    """``nu(zeta_n(., t))`` for a measure with grid density ``nu``."""
    t_grid = np.asarray(t_grid, dtype=float)
    vals = centering_from_step_means(step_means(spec, n, f, nu, nu.M), n, t_grid)
    return CenteringCurve(t_grid, vals, "measure_mean", nu.name)


def explicit_centering(drift: DriftCurve, t_grid) -> CenteringCurve:
    t_grid = np.asarray(t_grid, dtype=float)
    return CenteringCurve(t_grid, drift(t_grid), "explicit_zeta")


def zero_centering(t_grid, d: int = 1) -> CenteringCurve:
    t_grid = np.asarray(t_grid, dtype=float)
    return CenteringCurve(t_grid, np.zeros((t_grid.size, d)), "zero")


def admissibility_gap(spec: ArraySpec, n: int, f: Observable, c: CenteringCurve, M: int = DEFAULT_M) -> float:
    """``sup_t sqrt(n) |c(t) - m(zeta_n(., t))|`` over the centering's own time grid."""
    ref = lebesgue_centering(spec, n, f, c.t_grid, M)
    return float(math.sqrt(n) * np.max(np.abs(c.values - ref.values)))


def step_grid(n: int) -> np.ndarray:
    """Times ``k/n``, the grid on which centerings are piecewise linear."""
    return np.arange(n + 1) / n


# --------------------------------------------------------------------------
# The inadmissible example
# --------------------------------------------------------------------------

def inadmissible_epsilon(K: int) -> float:
    """``sum_{j >= K} 1/j^2``."""
    return float(polygamma(1, K))


def inadmissible_mean_exact(n: int, t: float, K: int = 3) -> float:
    """``mu(zeta_n(., t))`` for the mixture measure of the inadmissible-centering example.

    Component ``j`` (uniform on ``[0, 2**-2**j)``) contributes
    ``-min(n t, 2**j) / n``; the Lebesgue part contributes nothing. Terms
    with ``2**j >= n t`` all equal ``-t/j**2`` and are summed in closed form.
    """
    if K < 1 or inadmissible_epsilon(K) >= 0.5:
        raise ValueError(f"K={K} too small: sum_(j>=K) 1/j^2 must be below 1/2")
    if n < 1 or not 0.0 <= t <= 1.0:
        raise ValueError("need n >= 1 and t in [0, 1]")
    if t == 0.0:
        return 0.0
    nt = n * t
    J = K
    terms = []
    while 2.0 ** J < nt:
        terms.append(-(2.0 ** J) / (n * J * J))
        J += 1
    terms.append(-t * float(polygamma(1, J)))
    return math.fsum(terms)


# --------------------------------------------------------------------------
# CSV helpers
# --------------------------------------------------------------------------

def _names(d: int, stem: str) -> list[str]:
    return [f"{stem}_{i + 1}" for i in range(d)]


def _write_curve_csv(path, t, values, names) -> None:
    values = np.asarray(values).reshape(len(t), -1)
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + list(names)) + "\n")
        for ti, row in zip(t, values):
            fh.write(",".join([repr(float(ti))] + [repr(float(v)) for v in row]) + "\n")
