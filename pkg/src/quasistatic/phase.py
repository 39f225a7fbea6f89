"""State space, map class, curves of maps, observables and densities.

Every object here is immutable after construction, so instances can be shared
freely between worker processes and used as cache keys.

Circle points are floats in ``[0, 1)``. A :class:`CircleMap` is given by its
lift ``T(x) = degree * x + sum_j a_j sin(2 pi j x)``, which is a
``degree``-fold covering of the circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

TWO_PI = 2.0 * math.pi

#: Sentinel returned by :func:`dc1_distance` for maps of different degree.
INFINITE_DISTANCE = math.inf


class ModelError(ValueError):
    """A map, curve or density violates the bounds of the model class."""


@dataclass(frozen=True)
class ModelParams:
    """Expansion floor ``lambda_min`` and bound ``second_deriv_cap`` on ``|T''|``."""

    lambda_min: float = 1.2
    second_deriv_cap: float = 50.0

    def __post_init__(self):
        if not self.lambda_min > 1.0:
            raise ModelError(f"lambda_min must exceed 1, got {self.lambda_min}")
        if not self.second_deriv_cap >= 0.0:
            raise ModelError(f"second_deriv_cap must be nonnegative, got {self.second_deriv_cap}")


DEFAULT_PARAMS = ModelParams()


# --------------------------------------------------------------------------
# sup/inf of smooth periodic functions
# --------------------------------------------------------------------------

def _periodic_extremum(fn: Callable[[np.ndarray], np.ndarray], maximize: bool,
                       scan: int = 2048, n_refine: int = 4, xtol: float = 1e-12) -> tuple[float, float]:
    """Grid scan followed by bounded golden-section refinement around the best cells."""
    xs = (np.arange(scan) + 0.5) / scan
    vals = fn(xs)
    sign = -1.0 if maximize else 1.0
    order = np.argsort(sign * vals)[:n_refine]
    best_x = float(xs[order[0]])
    best_v = float(vals[order[0]])
    h = 1.0 / scan
    for i in order:
        lo, hi = xs[i] - h, xs[i] + h
        res = minimize_scalar(lambda x: sign * float(fn(np.array([x % 1.0]))[0]),
                              bounds=(lo, hi), method="bounded",
                              options={"xatol": xtol})
        v = sign * float(res.fun)
        if (v > best_v) if maximize else (v < best_v):
            best_v, best_x = v, float(res.x) % 1.0
    return best_x, best_v


# --------------------------------------------------------------------------
# CircleMap
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CircleMap:
    """Expanding circle map with lift ``degree*x + sum a_j sin(2 pi j x)``.

    Parameters
    ----------
    degree : int
        Covering degree, at least 2.
    freqs : tuple of int
        Distinct positive sine frequencies.
    amps : tuple of float
        Amplitudes matching ``freqs``.
    params : ModelParams
        Bounds defining the admissible class; checked at construction.
    """

    degree: int
    freqs: tuple = ()
    amps: tuple = ()
    params: ModelParams = field(default=DEFAULT_PARAMS, compare=False, repr=False)

    def __post_init__(self):
        freqs = tuple(int(j) for j in self.freqs)
        amps = tuple(float(a) for a in self.amps)
        if len(freqs) != len(amps):
            raise ModelError("freqs and amps must have equal length")
        if any(j < 1 for j in freqs) or len(set(freqs)) != len(freqs):
            raise ModelError(f"frequencies must be distinct positive integers, got {freqs}")
        if int(self.degree) < 2:
            raise ModelError(f"degree must be at least 2, got {self.degree}")
        # drop exact zeros so equal maps compare equal
        keep = [(j, a) for j, a in sorted(zip(freqs, amps)) if a != 0.0]
        object.__setattr__(self, "degree", int(self.degree))
        object.__setattr__(self, "freqs", tuple(j for j, _ in keep))
        object.__setattr__(self, "amps", tuple(a for _, a in keep))
        check_membership(self.degree, np.array(self.freqs), np.array(self.amps)[None, :], self.params)

    @classmethod
    def doubling(cls, params: ModelParams = DEFAULT_PARAMS) -> "CircleMap":
        return cls(2, (), (), params)

    @classmethod
    def from_coeffs(cls, degree: int, coeffs, params: ModelParams = DEFAULT_PARAMS) -> "CircleMap":
        """Build from a mapping or sequence of ``(frequency, amplitude)`` pairs."""
        items = coeffs.items() if hasattr(coeffs, "items") else coeffs
        items = list(items)
        return cls(degree, tuple(j for j, _ in items), tuple(a for _, a in items), params)

    @property
    def is_linear(self) -> bool:
        return len(self.freqs) == 0

    @property
    def _fa(self):
        return np.asarray(self.freqs, dtype=float), np.asarray(self.amps, dtype=float)

    def lift(self, x):
        x = np.asarray(x, dtype=float)
        f, a = self._fa
        out = self.degree * x
        if f.size:
            out = out + np.sin(TWO_PI * np.multiply.outer(x, f)) @ a
        return out

    def __call__(self, x):
        y = self.lift(x)
        return y - np.floor(y)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        f, a = self._fa
        out = np.full(x.shape, float(self.degree))
        if f.size:
            out = out + np.cos(TWO_PI * np.multiply.outer(x, f)) @ (TWO_PI * f * a)
        return out

    def deriv2(self, x):
        x = np.asarray(x, dtype=float)
        f, a = self._fa
        if not f.size:
            return np.zeros(x.shape)
        return -(np.sin(TWO_PI * np.multiply.outer(x, f)) @ (TWO_PI ** 2 * f * f * a))

    def inf_deriv(self) -> float:
        if self.is_linear:
            return float(self.degree)
        return _periodic_extremum(self.deriv, maximize=False)[1]

    def sup_abs_deriv2(self) -> float:
        if self.is_linear:
            return 0.0
        return _periodic_extremum(lambda x: np.abs(self.deriv2(x)), maximize=True)[1]

    def perturbed(self, freq: int, amp: float) -> "CircleMap":
        """Return the map with ``amp`` added to the amplitude of ``freq``."""
        coeffs = dict(zip(self.freqs, self.amps))
        coeffs[int(freq)] = coeffs.get(int(freq), 0.0) + float(amp)
        return CircleMap.from_coeffs(self.degree, coeffs, self.params)

    def to_dict(self) -> dict:
        return {"degree": self.degree, "freqs": list(self.freqs), "amps": list(self.amps)}


def check_membership(degree, freqs: np.ndarray, amp_table: np.ndarray, params: ModelParams) -> None:
    """Validate rows of an amplitude table against the expansion and curvature bounds.

    The triangle-inequality bounds ``degree - sum 2 pi j |a_j|`` and
    ``sum (2 pi j)^2 |a_j|`` are tried first; only rows failing them get the
    grid-refined check.
    """
    freqs = np.asarray(freqs, dtype=float)
    amp_table = np.atleast_2d(np.asarray(amp_table, dtype=float))
    degree = np.broadcast_to(np.asarray(degree, dtype=float), (amp_table.shape[0],))
    if freqs.size == 0:
        bad = degree < params.lambda_min
        if bad.any():
            raise ModelError(f"linear map of degree {degree[bad][0]:g} is not expanding enough")
        return
    abs_a = np.abs(amp_table)
    lower = degree - abs_a @ (TWO_PI * freqs)
    curv = abs_a @ (TWO_PI ** 2 * freqs ** 2)
    suspect = np.flatnonzero((lower < params.lambda_min) | (curv > params.second_deriv_cap))
    for r in suspect:
        keep = amp_table[r] != 0.0
        f, a = freqs[keep], amp_table[r][keep]
        d = float(degree[r])

        def dT(x, f=f, a=a, d=d):
            return d + np.cos(TWO_PI * np.multiply.outer(x, f)) @ (TWO_PI * f * a)

        def ddT(x, f=f, a=a):
            return np.abs(np.sin(TWO_PI * np.multiply.outer(x, f)) @ (TWO_PI ** 2 * f * f * a))

        lo = _periodic_extremum(dT, maximize=False)[1]
        if lo < params.lambda_min:
            raise ModelError(f"inf T' = {lo:.6g} below lambda_min = {params.lambda_min:g} "
                             f"(degree {d:g}, amplitudes {dict(zip(f.astype(int).tolist(), a.tolist()))})")
        hi = _periodic_extremum(ddT, maximize=True)[1]
        if hi > params.second_deriv_cap:
            raise ModelError(f"sup |T''| = {hi:.6g} exceeds A* = {params.second_deriv_cap:g}")


def map_eval(tmap: CircleMap, x: float) -> tuple[float, float, float]:
    """Return ``(T x mod 1, T'(x), T''(x))``."""
    if not 0.0 <= x < 1.0:
        raise ValueError(f"x must lie in [0, 1), got {x}")
    xa = np.array([x])
    return float(tmap(xa)[0]), float(tmap.deriv(xa)[0]), float(tmap.deriv2(xa)[0])


def dc1_distance(map1: CircleMap, map2: CircleMap) -> float:
    """``sup_x d(T1 x, T2 x) + sup_x |T1' - T2'|``; ``inf`` across degrees."""
    if map1.degree != map2.degree:
        return INFINITE_DISTANCE
    c1 = dict(zip(map1.freqs, map1.amps))
    c2 = dict(zip(map2.freqs, map2.amps))
    keys = sorted(set(c1) | set(c2))
    diff = np.array([c1.get(j, 0.0) - c2.get(j, 0.0) for j in keys])
    if not keys or not np.any(diff):
        return 0.0
    f = np.array(keys, dtype=float)

    def circ(x):
        v = np.sin(TWO_PI * np.multiply.outer(x, f)) @ diff
        v = np.abs(v - np.round(v))
        return v

    def dder(x):
        return np.abs(np.cos(TWO_PI * np.multiply.outer(x, f)) @ (TWO_PI * f * diff))

    return _periodic_extremum(circ, maximize=True)[1] + _periodic_extremum(dder, maximize=True)[1]


# --------------------------------------------------------------------------
# Curves of maps
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PolyPath:
    """Polynomial coefficient path ``t -> sum c_i t**i`` (ascending coefficients)."""

    coeffs: tuple
    expr: str = ""

    def __call__(self, t):
        return np.polynomial.polynomial.polyval(np.asarray(t, dtype=float), np.asarray(self.coeffs, dtype=float))

    def describe(self) -> str:
        if self.expr:
            return self.expr
        return " + ".join(f"{c!r}*t**{i}" for i, c in enumerate(self.coeffs)) or "0"


@dataclass(frozen=True)
class PowerPath:
    """``offset + scale * |t - center|**exponent``: Hölder with the given exponent at ``center``."""

    scale: float
    exponent: float
    center: float = 0.0
    offset: float = 0.0

    def __call__(self, t):
        return self.offset + self.scale * np.abs(np.asarray(t, dtype=float) - self.center) ** self.exponent

    def describe(self) -> str:
        return f"{self.offset!r} + {self.scale!r}*abs(t - {self.center!r})**{self.exponent!r}"


@dataclass(frozen=True)
class CurvePiece:
    """Continuous branch of a curve on ``[start, end)``: fixed degree, amplitude paths per frequency."""

    start: float
    end: float
    degree: int
    freqs: tuple
    paths: tuple

    def amplitudes(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if not self.paths:
            return np.zeros((t.size, 0))
        return np.stack([np.broadcast_to(p(t), t.shape) for p in self.paths], axis=1)


@dataclass(frozen=True)
class MapCurve:
    """Piecewise-Hölder curve of circle maps on ``[0, 1]``, right-continuous at jumps."""

    pieces: tuple
    holder_exponent: float
    params: ModelParams = DEFAULT_PARAMS

    def __post_init__(self):
        pieces = tuple(self.pieces)
        if not pieces:
            raise ModelError("a curve needs at least one piece")
        if not 0.0 < self.holder_exponent <= 1.0:
            raise ModelError(f"holder exponent must lie in (0, 1], got {self.holder_exponent}")
        if pieces[0].start != 0.0 or pieces[-1].end != 1.0:
            raise ModelError("pieces must cover [0, 1]")
        for a, b in zip(pieces, pieces[1:]):
            if a.end != b.start:
                raise ModelError("pieces must be contiguous")
        for p in pieces:
            if not p.start < p.end:
                raise ModelError("empty curve piece")
            if len(p.freqs) != len(p.paths):
                raise ModelError("each frequency needs an amplitude path")
        object.__setattr__(self, "pieces", pieces)
        # bounds hold along every piece, including left limits at the jumps
        for p in pieces:
            ts = np.linspace(p.start, p.end, 257)
            check_membership(p.degree, np.array(p.freqs), p.amplitudes(ts), self.params)

    @classmethod
    def constant(cls, tmap: CircleMap, holder_exponent: float = 1.0) -> "MapCurve":
        paths = tuple(PolyPath((a,)) for a in tmap.amps)
        return cls((CurvePiece(0.0, 1.0, tmap.degree, tmap.freqs, paths),), holder_exponent, tmap.params)

    @property
    def jump_points(self) -> tuple:
        return tuple(p.start for p in self.pieces[1:])

    @property
    def freqs(self) -> tuple:
        """Union of all sine frequencies used by the curve."""
        return tuple(sorted({j for p in self.pieces for j in p.freqs}))

    def piece_index(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(np.array(self.jump_points), t, side="right")
        return idx

    def table(self, t, left: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Degrees and amplitudes (columns ordered as :attr:`freqs`) at times ``t``.

        With ``left=True`` the value at a jump point is the left limit.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        jumps = np.array(self.jump_points)
        idx = np.searchsorted(jumps, t, side="left" if left else "right")
        allf = self.freqs
        col = {j: c for c, j in enumerate(allf)}
        degrees = np.empty(t.size, dtype=np.int64)
        amps = np.zeros((t.size, len(allf)))
        for i, p in enumerate(self.pieces):
            sel = idx == i
            if not sel.any():
                continue
            degrees[sel] = p.degree
            if p.freqs:
                amps[np.ix_(sel, [col[j] for j in p.freqs])] = p.amplitudes(t[sel])
        return degrees, amps

    def at(self, t: float, left: bool = False) -> CircleMap:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        d, a = self.table([t], left=left)
        return CircleMap(int(d[0]), self.freqs, tuple(a[0]), self.params)

    __call__ = at


def linear_curve(slope: float = 0.1, degree: int = 2, freq: int = 1, offset: float = 0.0,
                 holder_exponent: float = 0.99, params: ModelParams = DEFAULT_PARAMS) -> MapCurve:
    """Single-piece curve with sine amplitude ``offset + slope * t`` at one frequency."""
    piece = CurvePiece(0.0, 1.0, degree, (freq,), (PolyPath((offset, slope)),))
    return MapCurve((piece,), holder_exponent, params)


def holder_constant(curve: MapCurve, sample_pairs: int, seed: int = 0) -> float:
    """Empirical lower bound for the Hölder seminorm of ``curve``.

    Pairs ``(t, s)`` are drawn inside a common piece; pairs straddling a jump
    are never formed.
    """
    if sample_pairs < 1:
        raise ValueError("sample_pairs must be positive")
    rng = np.random.default_rng(seed)
    eta = curve.holder_exponent
    best = 0.0
    for p in curve.pieces:
        width = p.end - p.start
        t = p.start + width * rng.random(sample_pairs)
        s = p.start + width * rng.random(sample_pairs)
        # include a few adjacent pairs so short-range behaviour is seen
        t = np.concatenate([t, np.linspace(p.start, p.end, 17)[:-1]])
        s = np.concatenate([s, np.linspace(p.start, p.end, 17)[:-1] + width / 64])
        for ti, si in zip(t, s):
            if ti == si or si >= p.end:
                continue
            m1 = curve.at(float(ti))
            m2 = curve.at(float(si))
            best = max(best, dc1_distance(m1, m2) / abs(ti - si) ** eta)
    return best


# --------------------------------------------------------------------------
# Triangular arrays
# --------------------------------------------------------------------------

ARRAY_MODES = ("on_curve", "perturbed")


@dataclass(frozen=True)
class ArraySpec:
    """Triangular array ``T_{n,k}``, either on the curve or at distance ``O(n**-eta)`` from it.

    In perturbed mode ``T_{n,k}`` is ``curve(k/n)`` plus a sine of frequency
    ``perturbation_freq`` with amplitude ``(-1)**k * scale * n**-eta``.
    """

    curve: MapCurve
    mode: str = "on_curve"
    perturbation_scale: float = 0.0
    perturbation_freq: int = 1

    def __post_init__(self):
        if self.mode not in ARRAY_MODES:
            raise ModelError(f"unknown array mode {self.mode!r}")
        if self.perturbation_scale < 0:
            raise ModelError("perturbation_scale must be nonnegative")

    @property
    def freqs(self) -> tuple:
        fs = set(self.curve.freqs)
        if self.mode == "perturbed":
            fs.add(self.perturbation_freq)
        return tuple(sorted(fs))

    def is_doubling(self) -> bool:
        """True when every map of the array is exactly ``x -> 2x mod 1``."""
        if self.mode == "perturbed" and self.perturbation_scale != 0.0:
            return False
        for p in self.curve.pieces:
            if p.degree != 2:
                return False
            for path in p.paths:
                if not (isinstance(path, PolyPath) and not any(path.coeffs)):
                    return False
        return True

    def is_constant(self) -> bool:
        if self.mode == "perturbed" and self.perturbation_scale != 0.0:
            return False
        return len(self.curve.pieces) == 1 and all(
            isinstance(path, PolyPath) and not any(path.coeffs[1:]) for path in self.curve.pieces[0].paths)

    def table(self, n: int, k=None, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Degrees and amplitude table of ``T_{n,k}`` for ``k`` (default ``1..n``)."""
        if k is None:
            k = np.arange(1, n + 1)
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        if k.size and (k.min() < 1 or k.max() > n):
            raise ValueError(f"k must lie in [1, {n}]")
        degrees, amps = self.curve.table(k / n)
        allf = self.freqs
        if allf != self.curve.freqs:
            full = np.zeros((k.size, len(allf)))
            cols = [allf.index(j) for j in self.curve.freqs]
            full[:, cols] = amps
            amps = full
        if self.mode == "perturbed" and self.perturbation_scale:
            c = allf.index(self.perturbation_freq)
            sign = np.where(k % 2 == 0, 1.0, -1.0)
            amps[:, c] += sign * self.perturbation_scale * float(n) ** (-self.curve.holder_exponent)
            if check:
                for d in np.unique(degrees):
                    sel = degrees == d
                    check_membership(int(d), np.array(allf), amps[sel], self.curve.params)
        return degrees, amps

    def map(self, n: int, k: int) -> CircleMap:
        if not 1 <= k <= n:
            raise ValueError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
        d, a = self.table(n, [k])
        return CircleMap(int(d[0]), self.freqs, tuple(a[0]), self.curve.params)


def array_map(spec: ArraySpec, n: int, k: int) -> CircleMap:
    return spec.map(n, k)


# --------------------------------------------------------------------------
# Observables
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrigComponent:
    """``const + sum a_m cos(2 pi m x) + sum b_m sin(2 pi m x)``."""

    const: float = 0.0
    cos: tuple = ()
    sin: tuple = ()

    lipschitz = True

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, float(self.const))
        for m, a in self.cos:
            out = out + a * np.cos(TWO_PI * m * x)
        for m, b in self.sin:
            out = out + b * np.sin(TWO_PI * m * x)
        return out

    @property
    def lipschitz_constant(self) -> float:
        return float(sum(TWO_PI * m * abs(a) for m, a in self.cos + self.sin))

    @property
    def sup_norm(self) -> float:
        return float(abs(self.const) + sum(abs(a) for _, a in self.cos + self.sin))


@dataclass(frozen=True)
class StepComponent:
    """Piecewise-constant function; ``values[i]`` holds on ``[breaks[i], breaks[i+1])`` cyclically."""

    breaks: tuple
    values: tuple

    lipschitz = False
    lipschitz_constant = math.inf

    def __post_init__(self):
        b = tuple(float(v) for v in self.breaks)
        if len(b) != len(self.values) or not b:
            raise ModelError("step component needs one value per break point")
        if any(not 0.0 <= v < 1.0 for v in b) or list(b) != sorted(set(b)):
            raise ModelError("break points must be sorted distinct values in [0, 1)")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(np.array(self.breaks), x, side="right") - 1
        return np.asarray(self.values)[idx]  # idx = -1 wraps to the last value

    @property
    def sup_norm(self) -> float:
        return float(max(abs(v) for v in self.values))


@dataclass(frozen=True)
class Observable:
    """Function ``f: S^1 -> R^d`` built from trigonometric or step components."""

    components: tuple
    name: str = ""

    def __post_init__(self):
        if not self.components:
            raise ModelError("an observable needs at least one component")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def lipschitz_flag(self) -> bool:
        return all(c.lipschitz for c in self.components)

    @property
    def lipschitz_constant(self) -> float:
        return max(c.lipschitz_constant for c in self.components)

    @property
    def sup_norm(self) -> float:
        return max(c.sup_norm for c in self.components)

    def __call__(self, x) -> np.ndarray:
        """Values with shape ``x.shape + (d,)``."""
        return np.stack([c(x) for c in self.components], axis=-1)

    # common observables
    @classmethod
    def cos(cls, freq: int = 1, amp: float = 1.0) -> "Observable":
        return cls((TrigComponent(cos=((freq, amp),)),), f"cos{freq}")

    @classmethod
    def sin(cls, freq: int = 1, amp: float = 1.0) -> "Observable":
        return cls((TrigComponent(sin=((freq, amp),)),), f"sin{freq}")

    @classmethod
    def constant(cls, value: float = 1.0) -> "Observable":
        return cls((TrigComponent(const=value),), "const")

    @classmethod
    def step(cls) -> "Observable":
        """``-1`` on ``[0, 1/2)``, ``+1`` on ``[1/2, 1)``: the coin-toss observable."""
        return cls((StepComponent((0.0, 0.5), (-1.0, 1.0)),), "step")

    @classmethod
    def cos_sin(cls, freq: int = 1) -> "Observable":
        return cls((TrigComponent(cos=((freq, 1.0),)), TrigComponent(sin=((freq, 1.0),))), f"cos_sin{freq}")


# --------------------------------------------------------------------------
# Densities
# --------------------------------------------------------------------------

def grid_points(M: int) -> np.ndarray:
    """Cell midpoints ``(i + 1/2)/M``."""
    return (np.arange(M) + 0.5) / M


def interp_periodic(values: np.ndarray, x) -> np.ndarray:
    """Periodic linear interpolation of midpoint grid values (first axis) at ``x``."""
    values = np.asarray(values)
    M = values.shape[0]
    u = np.asarray(x, dtype=float) * M - 0.5
    i0 = np.floor(u)
    w = u - i0
    i0 = i0.astype(np.int64) % M
    i1 = (i0 + 1) % M
    if values.ndim > 1:
        w = w[..., None]
    return (1.0 - w) * values[i0] + w * values[i1]


@dataclass(frozen=True)
class DLCertificate:
    jump_point: float
    log_lip_constant: float


@dataclass(frozen=True, eq=False)
class Density:
    """Probability density sampled at the midpoints of ``M`` uniform cells.

    The values are normalized at construction so that their mean (the
    midpoint-rule integral) is one.
    """

    grid_values: np.ndarray
    certificate: DLCertificate | None = None
    name: str = ""

    GRID_TOL = 1e-6

    def __post_init__(self):
        v = np.array(self.grid_values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ModelError("a density needs at least two grid values")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ModelError("density values must be finite and nonnegative")
        mass = v.mean()
        if mass <= 0:
            raise ModelError("density has zero mass")
        v = v / mass
        v.setflags(write=False)
        object.__setattr__(self, "grid_values", v)
        if self.certificate is not None:
            self._check_certificate(self.certificate)

    @property
    def M(self) -> int:
        return self.grid_values.size

    @property
    def values(self) -> np.ndarray:
        return self.grid_values

    @property
    def x(self) -> np.ndarray:
        return grid_points(self.M)

    def __call__(self, x):
        return interp_periodic(self.grid_values, x)

    def integral(self) -> float:
        return float(self.grid_values.mean())

    @classmethod
    def uniform(cls, M: int = 4096) -> "Density":
        return cls(np.ones(M), DLCertificate(0.0, 0.0), "uniform")

    @classmethod
    def from_function(cls, fn: Callable, M: int = 4096, name: str = "",
                      certify: bool = False, jump_point: float | None = None) -> "Density":
        dens = cls(fn(grid_points(M)), None, name)
        return dens.certified(jump_point) if certify else dens

    # --- the class D_L -------------------------------------------------
    def log_lipschitz(self, jump_point: float | None = None) -> tuple[float, float]:
        """Smallest grid log-Lipschitz constant, optionally ignoring the cell pair around ``jump_point``.

        Returns ``(L, z)`` where ``z`` is the jump point used; when none is
        given the steepest adjacent pair is excluded.
        """
        v = self.grid_values
        if np.any(v <= 0):
            return math.inf, 0.0
        M = v.size
        slopes = np.abs(np.diff(np.log(np.append(v, v[0])))) * M  # pair (i, i+1), cyclic
        if jump_point is None:
            skip = int(np.argmax(slopes))
            z = ((skip + 1) % M) / M
        else:
            z = float(jump_point) % 1.0
            skip = int(np.floor(z * M - 0.5)) % M
        rest = np.delete(slopes, skip)
        return float(rest.max()) if rest.size else 0.0, z

    def certified(self, jump_point: float | None = None) -> "Density":
        L, z = self.log_lipschitz(jump_point)
        if not math.isfinite(L):
            raise ModelError("density vanishes somewhere; it is not in any D_L")
        # the density equals 1 somewhere, so e^-L <= rho holds up to discretization
        L = max(L, -math.log(self.grid_values.min()), math.log(self.grid_values.max()))
        return Density(self.grid_values, DLCertificate(z, L), self.name)

    def _check_certificate(self, cert: DLCertificate) -> None:
        v = self.grid_values
        tol = self.GRID_TOL
        if v.min() < math.exp(-cert.log_lip_constant) * (1 - tol):
            raise ModelError("certified density falls below exp(-L)")
        L, _ = self.log_lipschitz(cert.jump_point)
        if L > cert.log_lip_constant * (1 + tol) + tol:
            raise ModelError(f"grid log-slope {L:.6g} exceeds certified L = {cert.log_lip_constant:.6g}")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("cell,value\n")
            for i, v in enumerate(self.grid_values):
                fh.write(f"{i},{v!r}\n")


def regularize_density(values: Sequence[float], eps: float) -> Density:
    """Move an arbitrary grid density into ``D_L`` at ``L1`` cost at most ``eps``.

    Adds the floor ``eps/6`` and renormalizes; the result is strictly positive
    and hence log-Lipschitz on the grid.
    """
    v = np.asarray(values, dtype=float)
    v = v / v.mean()
    return Density(v + eps / 6.0).certified()
