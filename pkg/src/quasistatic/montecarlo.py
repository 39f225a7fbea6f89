"""Ensembles of Birkhoff-sum paths and their moment statistics.

Every ensemble member owns a Philox stream keyed by the run seed and
indexed by the member number, so results do not depend on chunking or on
the number of worker threads.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from . import kernels
from .coefficients import CenteringCurve, inadmissible_epsilon, step_index
from .phase import ArraySpec, Density, Observable

MIN_ENSEMBLE = 100
JACKKNIFE_GROUPS = 100
CHUNK = 1 << 14
DEFAULT_T_POINTS = 65

STREAM_INITIAL = 0
STREAM_DIFFUSION = 1
_U53 = 2.0 ** -53


def default_t_grid(points: int = DEFAULT_T_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def member_generator(seed: int, member: int, stream: int = STREAM_INITIAL) -> np.random.Generator:
    """Counter-based generator for one ensemble member."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, int(member), int(stream), 0]))


def _member_raw(seed: int, start: int, stop: int, words: int, stream: int) -> np.ndarray:
    out = np.empty((stop - start, words), dtype=np.uint64)
    for row, i in enumerate(range(start, stop)):
        bg = np.random.Philox(key=int(seed), counter=[0, i, int(stream), 0])
        out[row] = bg.random_raw(words)
    return out


# --------------------------------------------------------------------------
# Initial conditions
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InitialPoints:
    """Initial conditions as floats, optionally with full binary expansions.

    ``words[i]`` holds the binary digits of member ``i``, most significant
    first, packed into 64-bit words. Its leading 53 digits agree with ``x[i]``.
    """

    x: np.ndarray
    words: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        if np.any((x < 0) | (x >= 1)):
            raise ValueError("initial points must lie in [0, 1)")
        object.__setattr__(self, "x", x)
        if self.words is not None:
            w = np.ascontiguousarray(self.words, dtype=np.uint64)
            if w.ndim != 2 or w.shape[0] != x.size:
                raise ValueError("one row of binary digits per point is required")
            object.__setattr__(self, "words", w)

    def __len__(self) -> int:
        return self.x.size

    @property
    def bits(self) -> int:
        return 0 if self.words is None else 64 * self.words.shape[1]

    @classmethod
    def from_floats(cls, x, source: str = "explicit") -> "InitialPoints":
        return cls(np.asarray(x, dtype=float), None, source)

    @classmethod
    def from_words(cls, words, source: str = "explicit") -> "InitialPoints":
        w = np.atleast_2d(np.asarray(words, dtype=np.uint64))
        x = (w[:, 0] >> np.uint64(11)).astype(float) * _U53
        return cls(x, w, source)

    @classmethod
    def periodic_binary(cls, pattern: str, bits: int, source: str = "") -> "InitialPoints":
        """A single point whose binary expansion repeats ``pattern`` (e.g. ``"01"`` for 1/3)."""
        nwords = -(-bits // 64)
        digits = (pattern * (64 * nwords // len(pattern) + 1))[:64 * nwords]
        words = [int(digits[64 * i:64 * (i + 1)], 2) for i in range(nwords)]
        return cls.from_words(np.array([words], dtype=np.uint64), source or f"0.({pattern})")


def words_needed(n: int) -> int:
    """64-bit words covering ``n + 64`` binary digits."""
    return n // 64 + 2


def _inverse_cdf(values: np.ndarray, u: np.ndarray) -> np.ndarray:
    M = values.size
    mass = values / values.sum()
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    cdf[-1] = 1.0
    i = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, M - 1)
    x = (i + (u - cdf[i]) / mass[i]) / M
    return np.clip(x, 0.0, np.nextafter(1.0, 0.0))


def sample_initial(rho: Density, count: int, seed: int, horizon: int = 0) -> InitialPoints:
    """Draw ``count`` points from ``rho``, read as constant on each grid cell.

    The cell is found from the cumulative masses and the position inside it
    by inverting the linear CDF. With ``horizon > 0`` every point also carries
    enough binary digits for ``horizon`` doubling steps. Digits past the 53rd
    are uniform, which is exact for the cell-wise constant law whenever the
    grid size is a power of two.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    nwords = 1 + (words_needed(horizon) if horizon > 0 else 0)
    raw = np.concatenate([_member_raw(seed, s, min(s + CHUNK, count), nwords, STREAM_INITIAL)
                          for s in range(0, count, CHUNK)])
    u = (raw[:, 0] >> np.uint64(11)).astype(float) * _U53
    x = _inverse_cdf(rho.grid_values, u)
    if horizon <= 0:
        return InitialPoints(x, None, rho.name)
    words = raw[:, 1:].copy()
    top = (x * 2.0 ** 53).astype(np.uint64)
    words[:, 0] = (top << np.uint64(11)) | (words[:, 0] & np.uint64(0x7FF))
    return InitialPoints(x, words, rho.name)


@dataclass(frozen=True)
class InadmissibleMeasure:
    """``(1 - eps) Leb + sum_{j >= K} j**-2 Unif[0, 2**-2**j)`` with ``eps = sum_{j >= K} j**-2``."""

    K: int = 3

    def __post_init__(self):
        if self.K < 1 or inadmissible_epsilon(self.K) >= 0.5:
            raise ValueError(f"K={self.K} too small: the singular part must carry mass below 1/2")

    @property
    def epsilon(self) -> float:
        return inadmissible_epsilon(self.K)

    @property
    def name(self) -> str:
        return f"inadmissible_example({self.K})"

    def zero_prefix(self, u: np.ndarray, cap: int) -> np.ndarray:
        """Number of leading zero digits forced by the mixture component selected by ``u``.

        Components with ``2**j >= cap`` are lumped into a single all-zero class.
        """
        eps = self.epsilon
        jmax = max(self.K, math.ceil(math.log2(max(cap, 2))))
        js = np.arange(self.K, jmax)
        edges = (1.0 - eps) + np.concatenate([[0.0], np.cumsum(1.0 / js.astype(float) ** 2)])
        idx = np.searchsorted(edges, u, side="right") - 1
        prefix = np.zeros(u.size, dtype=np.int64)
        singular = idx >= 0
        inside = singular & (idx < js.size)
        prefix[inside] = 2 ** js[idx[inside]]
        prefix[singular & ~inside] = cap
        return np.minimum(prefix, cap)

    def sample(self, count: int, seed: int, horizon: int) -> InitialPoints:
        """Points with binary digits for ``horizon`` doubling steps."""
        nwords = 1 + words_needed(horizon)
        raw = np.concatenate([_member_raw(seed, s, min(s + CHUNK, count), nwords, STREAM_INITIAL)
                              for s in range(0, count, CHUNK)])
        u = (raw[:, 0] >> np.uint64(11)).astype(float) * _U53
        words = raw[:, 1:].copy()
        total = 64 * words.shape[1]
        prefix = self.zero_prefix(u, total)
        full = prefix // 64
        rem = prefix % 64
        col = np.arange(words.shape[1])
        words[col[None, :] < full[:, None]] = 0
        rows = np.nonzero((rem > 0) & (full < words.shape[1]))[0]
        mask = np.right_shift(np.uint64(0xFFFFFFFFFFFFFFFF), rem[rows].astype(np.uint64))
        words[rows, full[rows]] &= mask
        return InitialPoints.from_words(words, self.name)


# --------------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Fluctuation paths ``chi_n(x_i, t_j)``, shape ``(members, len(t_grid), d)``."""

    n: int
    t_grid: np.ndarray
    centering: CenteringCurve
    marginals: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.marginals.shape[0]

    @property
    def dim(self) -> int:
        return self.marginals.shape[2]

    def zeta(self) -> np.ndarray:
        """``zeta_n = c_n + chi_n / sqrt(n)``."""
        return self.centering.values[None, :, :] + self.marginals / math.sqrt(self.n)

    def t_index(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.t_grid - t)))
        if abs(self.t_grid[j] - t) > 1e-12:
            raise ValueError(f"t={t} is not on the ensemble grid")
        return j

    def at(self, t: float) -> np.ndarray:
        return self.marginals[:, self.t_index(t), :]

    def to_csv(self, path) -> None:
        """Rows ``member, t, value_1 .. value_d``."""
        m, T, d = self.marginals.shape
        member = np.repeat(np.arange(m), T)
        t = np.tile(self.t_grid, m)
        table = np.column_stack([t, self.marginals.reshape(m * T, d)])
        header = ",".join(["member", "t"] + [f"value_{i + 1}" for i in range(d)])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i, row in zip(member, table):
                fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")

    def to_npz(self, path) -> None:
        np.savez_compressed(path, n=self.n, t_grid=self.t_grid, centering=self.centering.values,
                            centering_kind=self.centering.kind, marginals=self.marginals,
                            meta=np.array(repr(sorted(self.meta.items()))))


def simulate_ensemble(spec: ArraySpec, n: int, f: Observable, points: InitialPoints, t_grid,
                      centering: CenteringCurve, backend: str | None = None, meta: dict | None = None
                      ) -> PathEnsemble:
    """Iterate the ``n``-th row of the array from every point and record ``chi_n`` on ``t_grid``.

    The exact bit-shift kernel runs whenever the array is the doubling map
    and the points carry enough binary digits.
    """
    if n < 1:
        raise ValueError("n must be positive")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) < 0) \
            or t_grid[0] < 0 or t_grid[-1] > 1:
        raise ValueError("t_grid must be sorted inside [0, 1]")
    if centering.t_grid.shape != t_grid.shape or np.max(np.abs(centering.t_grid - t_grid)) > 1e-12:
        raise ValueError("centering grid does not match t_grid")
    if centering.values.shape[1] != f.dim:
        raise ValueError("centering dimension does not match the observable")
    if not isinstance(points, InitialPoints):
        points = InitialPoints.from_floats(points)
    k_idx, fracs = step_index(n, t_grid)
    obs = kernels.pack_observable(f)
    use_bits = spec.is_doubling() and points.words is not None \
        and points.words.shape[1] >= words_needed(int(k_idx[-1]))
    if spec.is_doubling() and not use_bits and n > 48:
        warnings.warn("doubling map iterated in floating point; binary digits run out after ~53 steps",
                      RuntimeWarning, stacklevel=2)
    if not use_bits:
        degrees, amps = spec.table(n)
        freqs = np.asarray(spec.freqs, dtype=float)
        if amps.shape[1] == 0:
            amps = np.zeros((n, 0))
    sums = np.empty((len(points), t_grid.size, f.dim))
    for s in range(0, len(points), CHUNK):
        e = min(s + CHUNK, len(points))
        if use_bits:
            sums[s:e] = kernels.birkhoff_bits(points.words[s:e], obs, k_idx, fracs, backend)
        else:
            sums[s:e] = kernels.birkhoff_float(points.x[s:e], degrees, amps, freqs, obs, k_idx, fracs, backend)
    chi = math.sqrt(n) * (sums / n - centering.values[None, :, :])
    info = {"n": n, "backend": "bits" if use_bits else "float", "initial": points.source,
            "observable": f.name}
    info.update(meta or {})
    return PathEnsemble(n, t_grid, centering, chi, info)


# --------------------------------------------------------------------------
# Moments with jackknife errors
# --------------------------------------------------------------------------

def _group_sums(x: np.ndarray, groups: int) -> np.ndarray:
    """Sums over ``groups`` contiguous member blocks; ``x`` has members on axis 0."""
    edges = np.linspace(0, x.shape[0], groups + 1).astype(int)
    return np.stack([x[a:b].sum(axis=0) for a, b in zip(edges[:-1], edges[1:])]), np.diff(edges)


def _jackknife(stat, sums: list[np.ndarray], counts: np.ndarray):
    """Full-sample statistic and its grouped jackknife standard error.

    ``stat(totals, N)`` maps summed power sums to the statistic.
    """
    G = counts.size
    totals = [s.sum(axis=0) for s in sums]
    N = counts.sum()
    full = stat(totals, N)
    loo = np.stack([stat([t - s[g] for t, s in zip(totals, sums)], N - counts[g]) for g in range(G)])
    se = np.sqrt((G - 1) / G * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return full, se


def _cov_stat(totals, N):
    sx, sy, sxy = totals
    return (sxy - sx * sy / N) / (N - 1)


def _var_stat(totals, N):
    s1, s2 = totals[0], totals[1]
    return (s2 - s1 * s1 / N) / (N - 1)


def _m4_stat(totals, N):
    s1, s2, s3, s4 = totals
    mu = s1 / N
    return s4 / N - 4 * mu * s3 / N + 6 * mu ** 2 * s2 / N - 3 * mu ** 4


def _kurt_stat(totals, N):
    s1, s2 = totals[0], totals[1]
    var_pop = s2 / N - (s1 / N) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(var_pop > 0, _m4_stat(totals, N) / np.where(var_pop > 0, var_pop, 1.0) ** 2 - 3.0,
                        np.nan)


@dataclass(frozen=True, eq=False)
class MomentReport:
    """Per-time moments (arrays ``(T, d)``) and per-pair statistics (arrays ``(P, d)``)."""

    t_grid: np.ndarray
    mean: np.ndarray
    mean_se: np.ndarray
    var: np.ndarray
    var_se: np.ndarray
    m4: np.ndarray
    m4_se: np.ndarray
    excess_kurtosis: np.ndarray
    excess_kurtosis_se: np.ndarray
    pairs: np.ndarray  # (P, 2)
    cov: np.ndarray
    cov_se: np.ndarray
    kolmogorov_ratio: np.ndarray
    kolmogorov_ratio_se: np.ndarray

    def to_text(self) -> str:
        lines = []
        for j, t in enumerate(self.t_grid):
            for c in range(self.mean.shape[1]):
                lines.append(f"t={t:.10g} comp={c + 1}: mean={self.mean[j, c]!r} mean_se={self.mean_se[j, c]!r} "
                             f"var={self.var[j, c]!r} var_se={self.var_se[j, c]!r} m4={self.m4[j, c]!r} "
                             f"excess_kurtosis={self.excess_kurtosis[j, c]!r}")
        for p, (s, t) in enumerate(self.pairs):
            for c in range(self.cov.shape[1]):
                lines.append(f"pair=({s:.10g},{t:.10g}) comp={c + 1}: cov={self.cov[p, c]!r} "
                             f"cov_se={self.cov_se[p, c]!r} kolmogorov_ratio={self.kolmogorov_ratio[p, c]!r} "
                             f"kolmogorov_ratio_se={self.kolmogorov_ratio_se[p, c]!r}")
        return "\n".join(lines) + "\n"


def dyadic_pairs(t_grid, max_level: int | None = None) -> list[tuple[float, float]]:
    """Adjacent dyadic pairs ``(i 2**-l, (i+1) 2**-l)`` that lie on ``t_grid``."""
    t_grid = np.asarray(t_grid, dtype=float)
    on_grid = set(np.round(t_grid, 12))
    out = []
    level = 0
    while True:
        h = 2.0 ** -level
        if max_level is not None and level > max_level:
            break
        pts = np.arange(0, 2 ** level + 1) * h
        if not all(round(float(p), 12) in on_grid for p in pts):
            break
        out += [(float(a), float(b)) for a, b in zip(pts[:-1], pts[1:])]
        level += 1
    return out


def ensemble_moments(ens: PathEnsemble, t_pairs=None, groups: int = JACKKNIFE_GROUPS) -> MomentReport:
    """Moments of ``chi_n`` per grid time and per pair of grid times, with jackknife errors."""
    m = ens.size
    if m < MIN_ENSEMBLE:
        raise ValueError(f"ensemble of {m} members is below the minimum of {MIN_ENSEMBLE}")
    G = min(groups, m)
    x = ens.marginals - ens.marginals.mean(axis=0)  # central moments are shift invariant
    shift = ens.marginals.mean(axis=0)
    powers = [x, x * x, x ** 3, x ** 4]
    gs = []
    for p in powers:
        s, counts = _group_sums(p, G)
        gs.append(s)
    mean_c, mean_se = _jackknife(lambda tot, N: tot[0] / N, gs[:1], counts)
    var, var_se = _jackknife(lambda tot, N: _cov_stat([tot[0], tot[0], tot[1]], N), gs[:2], counts)
    m4, m4_se = _jackknife(_m4_stat, gs, counts)
    kurt, kurt_se = _jackknife(_kurt_stat, gs, counts)

    pairs = np.array(dyadic_pairs(ens.t_grid) if t_pairs is None else t_pairs, dtype=float).reshape(-1, 2)
    d = ens.dim
    cov = np.zeros((len(pairs), d))
    cov_se = np.zeros_like(cov)
    kr = np.full((len(pairs), d), np.nan)
    kr_se = np.full((len(pairs), d), np.nan)
    for p, (s, t) in enumerate(pairs):
        i, j = ens.t_index(s), ens.t_index(t)
        xs, xt = x[:, i, :], x[:, j, :]
        sx, _ = _group_sums(xs, G)
        sy, _ = _group_sums(xt, G)
        sxy, _ = _group_sums(xs * xt, G)
        cov[p], cov_se[p] = _jackknife(_cov_stat, [sx, sy, sxy], counts)
        if t != s:
            d4, _ = _group_sums((ens.marginals[:, j, :] - ens.marginals[:, i, :]) ** 4, G)
            kr[p], kr_se[p] = _jackknife(lambda tot, N: tot[0] / N / (t - s) ** 2, [d4], counts)
    return MomentReport(ens.t_grid, mean_c + shift, mean_se, var, var_se, m4, m4_se, kurt, kurt_se,
                        pairs, cov, cov_se, kr, kr_se)


def covariance_matrix(ens: PathEnsemble, t: float) -> np.ndarray:
    """Empirical ``d x d`` covariance of ``chi_n(t)``."""
    x = ens.at(t)
    return np.atleast_2d(np.cov(x, rowvar=False))


# --------------------------------------------------------------------------
# Exact law of the coin example
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistributionTable:
    values: np.ndarray
    probs: np.ndarray


def coin_marginal_exact(n: int) -> DistributionTable:
    """Law of ``n**-0.5 * (sum of n fair +-1 signs)``."""
    if n < 1:
        raise ValueError("n must be positive")
    j = np.arange(n + 1)
    logp = gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1)
    # normalizing in log space removes the rounding of the large gammaln terms
    return DistributionTable((2 * j - n) / math.sqrt(n), np.exp(logp - logsumexp(logp)))


def coin_total_variation(sample, n: int) -> float:
    """Total variation between the empirical law of ``sample`` and :func:`coin_marginal_exact`."""
    table = coin_marginal_exact(n)
    x = np.asarray(sample, dtype=float).ravel()
    j = np.rint((x * math.sqrt(n) + n) / 2).astype(np.int64)
    ok = (j >= 0) & (j <= n)
    ok &= np.abs(table.values[np.clip(j, 0, n)] - x) < 1e-9
    counts = np.bincount(j[ok], minlength=n + 1) / x.size
    return 0.5 * (float(np.abs(counts - table.probs).sum()) + float((~ok).mean()))
