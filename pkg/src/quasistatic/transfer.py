"""Transfer operators of circle maps on a uniform midpoint grid.

Discretization
--------------
A grid function ``h`` (values at ``x_i = (i + 1/2)/M``) stands for its
periodic piecewise-linear interpolant ``h~``. The image is projected back
onto the hat functions ``phi_i`` centred at the nodes::

    (L h)_i = M * integral h~(y) phi_i(T y) dy

which equals ``M * integral (L h~) phi_i`` by duality. The hats form a
partition of unity, so the node mean is conserved to rounding error and
nonnegative input stays nonnegative. The integral is evaluated with
3-point Gauss-Legendre rules on the cells cut out by the grid nodes and the
preimages of the grid nodes, where the integrand is smooth.

The Ulam matrix is kept as an independent, first-order cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigs

from .phase import (TWO_PI, ArraySpec, CircleMap, Density, ModelError, Observable,
                    grid_points)

DEFAULT_M = 4096
SRB_TOL = 1e-10

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(3)
_GAUSS_X = 0.5 * (_GAUSS_X + 1.0)
_GAUSS_W = 0.5 * _GAUSS_W


class RootSolverError(RuntimeError):
    """Inverse-branch solving failed; the map is probably outside the model class."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=math.nan):
        super().__init__(msg)
        self.residual = residual


# --------------------------------------------------------------------------
# lift evaluation on raw coefficient arrays
# --------------------------------------------------------------------------

def _lift(degree, freqs, amps, y):
    out = degree * y
    if freqs.size:
        out = out + np.sin(TWO_PI * np.multiply.outer(y, freqs)) @ amps
    return out


def _dlift(degree, freqs, amps, y):
    out = np.full(np.shape(y), float(degree))
    if freqs.size:
        out = out + np.cos(TWO_PI * np.multiply.outer(y, freqs)) @ (TWO_PI * freqs * amps)
    return out


def solve_lift(degree, freqs, amps, targets, guess=None, tol=1e-13, max_iter=200):
    """Solve ``lift(y) = target`` for ``y`` in ``[0, 1]``; ``targets`` must lie in ``[0, degree]``.

    Safeguarded Newton: every iterate stays inside a shrinking bracket and a
    bisection step replaces any Newton step that would leave it.
    """
    freqs = np.asarray(freqs, dtype=float)
    amps = np.asarray(amps, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if freqs.size == 0:
        return targets / degree
    lo = np.zeros_like(targets)
    hi = np.ones_like(targets)
    y = targets / degree if guess is None else np.clip(guess, 0.0, 1.0)
    active = np.ones(targets.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        yi = y[idx]
        r = _lift(degree, freqs, amps, yi) - targets[idx]
        pos = r > 0
        hi[idx] = np.where(pos, np.minimum(hi[idx], yi), hi[idx])
        lo[idx] = np.where(pos, lo[idx], np.maximum(lo[idx], yi))
        step = r / _dlift(degree, freqs, amps, yi)
        ynew = yi - step
        outside = (ynew <= lo[idx]) | (ynew >= hi[idx])
        ynew = np.where(outside, 0.5 * (lo[idx] + hi[idx]), ynew)
        exact = r == 0
        y[idx] = np.where(exact, yi, ynew)
        done = exact | (np.abs(step) < tol) & ~outside | (hi[idx] - lo[idx] < tol)
        active[idx[done]] = False
    else:
        raise RootSolverError("inverse branch solver did not converge")
    return y


def inverse_branches(tmap: CircleMap, x: float) -> list[tuple[float, float]]:
    """All ``degree`` preimages ``y`` of ``x`` with ``T'(y)``, one per branch."""
    if not 0.0 <= x < 1.0:
        raise ValueError(f"x must lie in [0, 1), got {x}")
    freqs = np.asarray(tmap.freqs, dtype=float)
    amps = np.asarray(tmap.amps, dtype=float)
    targets = x + np.arange(tmap.degree, dtype=float)
    # bisection to a 1e-13 bracket, then one Newton polish
    lo = np.zeros(tmap.degree)
    hi = np.ones(tmap.degree)
    while np.max(hi - lo) > 1e-13:
        mid = 0.5 * (lo + hi)
        above = _lift(tmap.degree, freqs, amps, mid) > targets
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    y = 0.5 * (lo + hi)
    y = y - (_lift(tmap.degree, freqs, amps, y) - targets) / _dlift(tmap.degree, freqs, amps, y)
    resid = np.abs(_lift(tmap.degree, freqs, amps, y) - targets)
    if np.any(resid > 1e-10) or np.any(np.diff(y) <= 0):
        raise RootSolverError(f"branch solving failed at x={x} (residual {resid.max():.3g})")
    y = np.clip(y, 0.0, 1.0) % 1.0
    return [(float(yi), float(di)) for yi, di in zip(y, tmap.deriv(y))]


# --------------------------------------------------------------------------
# Galerkin transfer operator
# --------------------------------------------------------------------------

class TransferOperator:
    """Discrete transfer operator of one map on the ``M``-point midpoint grid.

    Built from raw coefficients so that arrays of maps can be processed
    without re-validating each map; use :meth:`from_map` for a
    :class:`CircleMap`.
    """

    def __init__(self, degree: int, freqs, amps, M: int = DEFAULT_M):
        if M < 2:
            raise ValueError("grid size must be at least 2")
        self.degree = int(degree)
        self.freqs = np.asarray(freqs, dtype=float)
        self.amps = np.asarray(amps, dtype=float)
        self.M = int(M)
        self._assemble()
        self._matrix = None

    @classmethod
    def from_map(cls, tmap: CircleMap, M: int = DEFAULT_M) -> "TransferOperator":
        return cls(tmap.degree, tmap.freqs, tmap.amps, M)

    def _assemble(self):
        from . import kernels

        M, d = self.M, self.degree
        nodes = grid_points(M)
        targets = (nodes[None, :] + np.arange(d)[:, None]).ravel()
        if self.freqs.size:
            ygrid = np.linspace(0.0, 1.0, 4 * M + 1)
            guess = np.interp(targets, _lift(d, self.freqs, self.amps, ygrid), ygrid)
            pre = solve_lift(d, self.freqs, self.amps, targets, guess)
        else:
            pre = targets / d
        breaks = np.concatenate([nodes, pre % 1.0])
        self.rows, self.cols, self.vals = kernels.galerkin_entries(
            np.sort(breaks), d, self.freqs, self.amps, M, _GAUSS_X, _GAUSS_W)

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            self._matrix = sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.M, self.M))
            self.rows = self.cols = self.vals = None  # the compressed form supersedes the triplets
        return self._matrix

    def apply(self, h: np.ndarray) -> np.ndarray:
        """Apply to a grid function (shape ``(M,)`` or ``(M, c)``)."""
        h = np.asarray(h, dtype=float)
        if h.shape[0] != self.M:
            raise ValueError(f"grid function has {h.shape[0]} values, operator expects {self.M}")
        if self._matrix is not None:
            return self._matrix @ h
        if h.ndim == 1:
            return np.bincount(self.rows, self.vals * h[self.cols], minlength=self.M)
        return np.stack([np.bincount(self.rows, self.vals * h[self.cols, c], minlength=self.M)
                         for c in range(h.shape[1])], axis=1)

    __matmul__ = apply


@lru_cache(maxsize=128)
def transfer_operator(tmap: CircleMap, M: int = DEFAULT_M) -> TransferOperator:
    op = TransferOperator.from_map(tmap, M)
    op.matrix  # repeated use is the norm for cached operators
    return op


def _grid_values(h, M=None) -> np.ndarray:
    if isinstance(h, Density):
        return h.grid_values
    return np.asarray(h, dtype=float)


def apply_transfer(tmap: CircleMap, h) -> np.ndarray:
    """One application of the transfer operator to a density or signed grid function."""
    v = _grid_values(h)
    return transfer_operator(tmap, v.shape[0]).apply(v)


@lru_cache(maxsize=1024)
def _srb_values(tmap: CircleMap, M: int, tol: float, max_iter: int) -> np.ndarray:
    op = transfer_operator(tmap, M)
    h = np.ones(M)
    residual = math.inf
    for _ in range(max_iter):
        g = op.apply(h)
        g /= g.mean()
        residual = float(np.max(np.abs(g - h)))
        h = g
        if residual < tol:
            h.setflags(write=False)
            return h
    raise ConvergenceError(f"SRB power iteration stalled at residual {residual:.3g}", residual)


def srb_density(tmap: CircleMap, tol: float = SRB_TOL, max_iter: int = 2000, M: int = DEFAULT_M) -> Density:
    """Invariant density of ``tmap``: power iteration from the constant density.

    Stops once ``max|L h - h| < tol`` and raises :class:`ConvergenceError`
    (carrying the last residual) after ``max_iter`` steps.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    return Density(_srb_values(tmap, int(M), float(tol), int(max_iter)), None, "srb")


def fixed_point_residual(tmap: CircleMap, rho: Density) -> float:
    return float(np.max(np.abs(apply_transfer(tmap, rho) - rho.grid_values)))


# --------------------------------------------------------------------------
# Evolution along arrays
# --------------------------------------------------------------------------

def iter_pushforward(spec: ArraySpec, n: int, h0: np.ndarray, k_max: int | None = None):
    """Yield ``(k, L_{n,k} ... L_{n,1} h0)`` for ``k = 0 .. k_max``."""
    k_max = n if k_max is None else k_max
    if not 0 <= k_max <= n:
        raise ValueError(f"k must lie in [0, {n}]")
    h = np.array(h0, dtype=float)
    M = h.shape[0]
    yield 0, h
    if k_max == 0:
        return
    degrees, amps = spec.table(n, np.arange(1, k_max + 1))
    freqs = np.asarray(spec.freqs, dtype=float)
    constant = spec.is_constant()
    op = None
    for k in range(1, k_max + 1):
        if op is None or not constant:
            op = TransferOperator(degrees[k - 1], freqs, amps[k - 1], M)
        h = op.apply(h)
        yield k, h


def evolve_pushforward(spec: ArraySpec, n: int, rho0: Density, k: int) -> Density:
    """Pushforward density after ``k`` steps of the ``n``-th row of the array."""
    if not 0 <= k <= n:
        raise ValueError(f"k must satisfy 0 <= k <= n, got k={k}, n={n}")
    if k == 0:
        return rho0
    h = None
    for _, h in iter_pushforward(spec, n, rho0.grid_values, k):
        pass
    return Density(h, None, f"pushforward_{n}_{k}")


def l1_distance(a, b) -> float:
    return float(np.mean(np.abs(_grid_values(a) - _grid_values(b))))


# --------------------------------------------------------------------------
# Ulam discretization
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UlamMatrix:
    """Row-stochastic Ulam matrix of a map on ``N`` uniform cells (sparse storage)."""

    P: sp.csr_matrix

    @property
    def N(self) -> int:
        return self.P.shape[0]

    def dense(self) -> np.ndarray:
        return self.P.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.P.sum(axis=1)).ravel()

    def leading_eigenvalue(self) -> complex:
        if self.N <= 64:
            w = np.linalg.eigvals(self.dense())
        else:
            w = eigs(self.P.T.tocsc(), k=1, which="LM", return_eigenvectors=False)
        return complex(w[np.argmax(np.abs(w))])

    def stationary_density(self, tol: float = 1e-13, max_iter: int = 10000) -> np.ndarray:
        """Cell-average density ``N * pi`` with ``pi P = pi``."""
        PT = self.P.T.tocsr()
        pi = np.full(self.N, 1.0 / self.N)
        for _ in range(max_iter):
            nxt = PT @ pi
            nxt /= nxt.sum()
            if np.max(np.abs(nxt - pi)) * self.N < tol:
                return nxt * self.N
            pi = nxt
        raise ConvergenceError("Ulam stationary vector did not converge")


def ulam_matrix(tmap: CircleMap, N: int) -> UlamMatrix:
    """Entries ``m(I_i & T^-1 I_j) / m(I_i)`` from exact preimages of the cell endpoints."""
    if N < 2:
        raise ValueError("N must be at least 2")
    d = tmap.degree
    freqs = np.asarray(tmap.freqs, dtype=float)
    amps = np.asarray(tmap.amps, dtype=float)
    targets = np.arange(1, d * N) / N
    if freqs.size:
        ygrid = np.linspace(0.0, 1.0, 4 * N + 1)
        guess = np.interp(targets, _lift(d, freqs, amps, ygrid), ygrid)
        pre = solve_lift(d, freqs, amps, targets, guess)
    else:
        pre = targets / d
    cells = np.arange(1, N) / N
    breaks = np.unique(np.concatenate([[0.0], cells, pre, [1.0]]))
    left, right = breaks[:-1], breaks[1:]
    mid = 0.5 * (left + right)
    i = np.minimum((mid * N).astype(np.int64), N - 1)
    img = _lift(d, freqs, amps, mid) % 1.0
    j = np.minimum((img * N).astype(np.int64), N - 1)
    P = sp.csr_matrix(((right - left) * N, (i, j)), shape=(N, N))
    P.sum_duplicates()
    # rows are exact up to root-solver error; remove the residue
    P = sp.diags(1.0 / np.asarray(P.sum(axis=1)).ravel()) @ P
    return UlamMatrix(P.tocsr())


def ulam_vs_grid_l1(rho: Density, ulam_density: np.ndarray) -> float:
    """``L1`` distance between a grid density and Ulam cell averages."""
    N = ulam_density.size
    sub = 8
    xs = (np.arange(N * sub) + 0.5) / (N * sub)
    cell_avg = rho(xs).reshape(N, sub).mean(axis=1)
    return float(np.mean(np.abs(cell_avg - ulam_density)))


# --------------------------------------------------------------------------
# Memory loss and correlations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MemoryLossReport:
    distances: tuple
    theta_hat: float
    fit_residual: float
    fit_range: tuple = (0, 0)

    @property
    def passed(self) -> bool:
        return 0.0 < self.theta_hat < 1.0

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("k,l1\n")
            for k, v in self.distances:
                fh.write(f"{k},{v!r}\n")


NOISE_FLOOR = 1e-13


def fit_exponential_rate(ks, values, floor: float = NOISE_FLOOR) -> tuple[float, float, tuple]:
    """Least-squares fit of ``log value = a + k log theta`` above the noise floor.

    Returns ``(theta, R^2, (k_first, k_last))``; ``theta = 0`` when fewer than
    three points lie above the floor.
    """
    ks = np.asarray(ks, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.size == 0 or values.max() <= 0:
        return 0.0, 0.0, (0, 0)
    cut = floor * max(values.max(), 1.0)
    above = values > cut
    # stop at the first point that has hit the floor
    last = int(np.argmin(above)) if not above.all() else values.size
    if last < 3:
        return 0.0, 0.0, (0, 0)
    x, y = ks[:last], np.log(values[:last])
    slope, intercept = np.polyfit(x, y, 1)
    pred = intercept + slope * x
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(math.exp(slope)), r2, (int(x[0]), int(x[-1]))


def memory_loss_curve(spec: ArraySpec, n: int, psi1: Density, psi2: Density, k_max: int) -> MemoryLossReport:
    """``L1`` distance between two pushforwards as a function of the step ``k``."""
    for psi in (psi1, psi2):
        if psi.certificate is None:
            raise ModelError("memory loss is defined for certified D_L densities")
    if psi1.M != psi2.M:
        raise ValueError("densities live on different grids")
    k_max = min(k_max, n)
    diff0 = psi1.grid_values - psi2.grid_values
    dist = []
    for k, h in iter_pushforward(spec, n, diff0, k_max):
        dist.append((k, float(np.mean(np.abs(h)))))
    theta, r2, rng = fit_exponential_rate([k for k, _ in dist], [v for _, v in dist])
    return MemoryLossReport(tuple(dist), theta, r2, rng)


def _component_values(f, M: int) -> np.ndarray:
    x = grid_points(M)
    if isinstance(f, Observable):
        if f.dim != 1:
            raise ValueError("expected a scalar observable")
        return f(x)[:, 0]
    return np.asarray(f(x), dtype=float)


def correlation_term(tmap: CircleMap, f, k: int, M: int = DEFAULT_M) -> float:
    """``m(fhat * L^k(rho fhat))`` with ``fhat = f - m(rho f)`` and ``rho`` the SRB density."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    rho = srb_density(tmap, M=M).grid_values
    fv = _component_values(f, M)
    fhat = fv - np.mean(rho * fv)
    g = rho * fhat
    op = transfer_operator(tmap, M)
    for _ in range(k):
        g = op.apply(g)
    return float(np.mean(fhat * g))
