"""Scenario files: flat ``key = value`` lines with dotted keys.

Example::

    name = coin
    curve.eta = 1
    curve.pieces[0].degree = 2
    curve.pieces[0].eps_expr = 0
    observable.kind = step
    initial.kind = uniform
    centering.kind = zero
    run.n_list = 4096
    run.ensemble = 100000
    run.seed = 1

``#`` starts a comment. A piece may carry several sine terms by listing
frequencies (``freq = 1, 2``) and matching expressions separated by ``;``.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import sympy

from .coefficients import CENTERING_KINDS
from .diffusion import Tolerances
from .phase import (ARRAY_MODES, ArraySpec, CurvePiece, Density, MapCurve, ModelError, ModelParams,
                    Observable, PolyPath)

BUILTIN = ("coin", "inadmissible", "smooth_curve", "jump_curve", "vector2d")

OBSERVABLE_KINDS = ("step", "cos", "sin", "constant", "cos_sin")
INITIAL_KINDS = ("uniform", "trig", "lipschitz", "inadmissible")
MARGINAL_FORMATS = ("csv", "npz", "none")

_KEY = re.compile(r"^[a-z_]+(\.[a-z_]+(\[\d+\])?)*(\.[a-z_]+)?$")
_PIECE = re.compile(r"^curve\.pieces\[(\d+)\]\.(degree|eps_expr|freq)$")

_FIELDS = {
    "name", "model.lambda", "model.a_star", "curve.eta", "curve.jumps",
    "array.mode", "array.scale", "array.freq", "observable.kind", "observable.freq",
    "initial.kind", "initial.amp", "initial.k", "initial.grid", "centering.kind",
    "run.n_list", "run.ensemble", "run.seed", "run.t_points", "run.compare", "run.grid",
    "tol.ks", "tol.cov", "tol.qv", "output.dir", "output.marginals",
}
_REQUIRED = ("name", "curve.eta", "observable.kind", "initial.kind", "centering.kind",
             "run.n_list", "run.ensemble", "run.seed")


class ConfigError(ValueError):
    """Invalid scenario; ``line`` is the 1-based line of the offending entry when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 source: str = "<config>"):
        self.field = field
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True, eq=False)
class Scenario:
    """Validated scenario together with the model objects it describes."""

    entries: dict  # key -> raw string
    lines: dict  # key -> line number
    source: str
    curve: MapCurve
    spec: ArraySpec
    observable: Observable
    initial_kind: str
    initial: object  # Density or InadmissibleMeasure
    centering_kind: str
    n_list: tuple
    ensemble: int
    seed: int
    t_points: int
    compare: bool
    tolerances: Tolerances
    grid: int
    output_dir: Path
    marginals: str = "csv"
    extra: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.entries["name"]

    @property
    def t_grid(self):
        return np.linspace(0.0, 1.0, self.t_points)

    def serialize(self) -> str:
        return serialize(self.entries)

    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()


# --------------------------------------------------------------------------
# Text layer
# --------------------------------------------------------------------------

def parse_text(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Split ``key = value`` lines; returns raw values and their line numbers."""
    entries, lines = {}, {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", None, no, source)
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"malformed key {key!r}", key, no, source)
        if key not in _FIELDS and not _PIECE.match(key):
            raise ConfigError(f"unknown field {key!r}", key, no, source)
        if key in entries:
            raise ConfigError(f"field {key!r} repeated (first on line {lines[key]})", key, no, source)
        entries[key] = value
        lines[key] = no
    return entries, lines


def _sort_key(key: str):
    m = _PIECE.match(key)
    if m:
        return ("curve.pieces", int(m.group(1)), m.group(2))
    return (key, -1, "")


def serialize(entries: dict) -> str:
    """Canonical text: one entry per line, sorted, normalized spacing."""
    return "".join(f"{k} = {entries[k]}\n" for k in sorted(entries, key=_sort_key))


# --------------------------------------------------------------------------
# Typed access
# --------------------------------------------------------------------------

class _Reader:
    def __init__(self, entries: dict, lines: dict, source: str):
        self.entries, self.lines, self.source = entries, lines, source

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"field {key!r}: {message}", key, self.lines.get(key), self.source)

    def has(self, key: str) -> bool:
        return key in self.entries

    def raw(self, key: str, default=None) -> str:
        if key not in self.entries:
            if default is None:
                raise ConfigError(f"missing required field {key!r}", key, None, self.source)
            return default
        return self.entries[key]

    def real(self, key: str, default=None) -> float:
        v = self.raw(key, None if default is None else repr(default))
        try:
            x = float(v)
        except ValueError:
            raise self.error(key, f"expected a number, got {v!r}") from None
        if not math.isfinite(x):
            raise self.error(key, "must be finite")
        return x

    def integer(self, key: str, default=None) -> int:
        v = self.raw(key, None if default is None else str(default))
        try:
            return int(v)
        except ValueError:
            raise self.error(key, f"expected an integer, got {v!r}") from None

    def choice(self, key: str, options, default=None) -> str:
        v = self.raw(key, default)
        if v not in options:
            raise self.error(key, f"expected one of {', '.join(options)}, got {v!r}")
        return v

    def int_list(self, key: str, default=None) -> tuple:
        v = self.raw(key, default)
        if v.strip() == "":
            return ()
        try:
            return tuple(int(s) for s in v.split(","))
        except ValueError:
            raise self.error(key, f"expected comma-separated integers, got {v!r}") from None

    def real_list(self, key: str, default=None) -> tuple:
        v = self.raw(key, default)
        if v.strip() == "":
            return ()
        try:
            return tuple(float(s) for s in v.split(","))
        except ValueError:
            raise self.error(key, f"expected comma-separated numbers, got {v!r}") from None

    def boolean(self, key: str, default: bool) -> bool:
        v = self.raw(key, "true" if default else "false").lower()
        if v not in ("true", "false"):
            raise self.error(key, f"expected true or false, got {v!r}")
        return v == "true"


_T = sympy.Symbol("t")


def polynomial_coeffs(expr: str) -> tuple:
    """Ascending coefficients of a polynomial in ``t``; raises ``ValueError`` otherwise."""
    try:
        e = sympy.sympify(expr, locals={"t": _T}, convert_xor=True)
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ValueError(f"cannot parse {expr!r}") from exc
    if e.free_symbols - {_T}:
        raise ValueError(f"{expr!r} uses symbols other than t")
    try:
        poly = sympy.Poly(e, _T)
    except sympy.PolynomialError as exc:
        raise ValueError(f"{expr!r} is not a polynomial in t") from exc
    coeffs = [float(c) for c in reversed(poly.all_coeffs())]
    return tuple(coeffs)


def _build_curve(r: _Reader, params: ModelParams) -> MapCurve:
    eta = r.real("curve.eta")
    if not 0.0 < eta <= 1.0:
        raise r.error("curve.eta", f"must lie in (0, 1], got {eta}")
    jumps = r.real_list("curve.jumps", "")
    if any(not 0.0 < j < 1.0 for j in jumps) or list(jumps) != sorted(set(jumps)):
        raise r.error("curve.jumps", "jump times must be increasing inside (0, 1)")
    idx = sorted({int(_PIECE.match(k).group(1)) for k in r.entries if _PIECE.match(k)})
    if not idx:
        raise ConfigError("missing required field 'curve.pieces[0].degree'", "curve.pieces[0].degree",
                          None, r.source)
    if idx != list(range(len(jumps) + 1)):
        key = f"curve.pieces[{idx[-1]}].degree"
        raise ConfigError(f"{len(jumps)} jump(s) need pieces 0..{len(jumps)}, found {idx}", key,
                          r.lines.get(key), r.source)
    bounds = (0.0,) + jumps + (1.0,)
    pieces = []
    for i in idx:
        pre = f"curve.pieces[{i}]"
        degree = r.integer(f"{pre}.degree")
        if degree < 2:
            raise r.error(f"{pre}.degree", "degree must be at least 2")
        freqs = r.int_list(f"{pre}.freq", "1")
        exprs = [s.strip() for s in r.raw(f"{pre}.eps_expr", "0").split(";")]
        if len(exprs) != len(freqs):
            raise r.error(f"{pre}.eps_expr", f"{len(freqs)} frequencies need {len(freqs)} expressions")
        if any(f < 1 for f in freqs) or len(set(freqs)) != len(freqs):
            raise r.error(f"{pre}.freq", "frequencies must be distinct positive integers")
        paths = []
        for e in exprs:
            try:
                paths.append(PolyPath(polynomial_coeffs(e), e))
            except ValueError as exc:
                raise r.error(f"{pre}.eps_expr", str(exc)) from None
        keep = [(f, p) for f, p in zip(freqs, paths) if any(p.coeffs)]
        pieces.append(CurvePiece(bounds[i], bounds[i + 1], degree, tuple(f for f, _ in keep),
                                 tuple(p for _, p in keep)))
    try:
        return MapCurve(tuple(pieces), eta, params)
    except ModelError as exc:
        raise ConfigError(f"curve violates the model bounds: {exc}", "curve.pieces", None, r.source) from None


def _build_initial(r: _Reader, kind: str, grid: int):
    import numpy as np

    from .montecarlo import InadmissibleMeasure

    if kind == "uniform":
        return Density.uniform(grid)
    if kind == "trig":
        a = r.real("initial.amp", 0.3)
        if not 0 <= a < 1:
            raise r.error("initial.amp", "amplitude must lie in [0, 1)")
        return Density.from_function(lambda x: 1.0 + a * np.cos(2 * np.pi * x), grid, f"trig({a})",
                                     certify=True)
    if kind == "lipschitz":
        a = r.real("initial.amp", 0.5)
        if not 0 <= a < 1:
            raise r.error("initial.amp", "amplitude must lie in [0, 1)")
        return Density.from_function(lambda x: 1.0 + a * (1.0 - 4.0 * np.abs(x - 0.5)), grid,
                                     f"tent({a})", certify=True)
    K = r.integer("initial.k", 3)
    try:
        return InadmissibleMeasure(K)
    except ValueError as exc:
        raise r.error("initial.k", str(exc)) from None


def build_scenario(entries: dict, lines: dict | None = None, source: str = "<config>") -> Scenario:
    """Validate every field and construct the model objects (fails before any computation)."""
    lines = lines or {}
    r = _Reader(entries, lines, source)
    for key in _REQUIRED:
        r.raw(key)
    try:
        params = ModelParams(r.real("model.lambda", 1.2), r.real("model.a_star", 50.0))
    except ModelError as exc:
        raise r.error("model.lambda", str(exc)) from None
    curve = _build_curve(r, params)
    mode = r.choice("array.mode", ARRAY_MODES, "on_curve")
    scale = r.real("array.scale", 0.0)
    if scale < 0:
        raise r.error("array.scale", "must be nonnegative")
    spec = ArraySpec(curve, mode, scale, r.integer("array.freq", 1))

    kind = r.choice("observable.kind", OBSERVABLE_KINDS)
    ofreq = r.integer("observable.freq", 1)
    if ofreq < 1:
        raise r.error("observable.freq", "must be a positive integer")
    obs = {"step": Observable.step, "constant": Observable.constant}.get(kind)
    observable = obs() if obs else getattr(Observable, kind)(ofreq)

    grid = r.integer("initial.grid", 4096)
    if grid < 16:
        raise r.error("initial.grid", "grid must have at least 16 cells")
    ikind = r.choice("initial.kind", INITIAL_KINDS)
    initial = _build_initial(r, ikind, grid)
    if ikind == "inadmissible" and not (spec.is_doubling() and kind == "step"):
        raise r.error("initial.kind", "the inadmissible measure is defined for the doubling map with the step observable")

    ckind = r.choice("centering.kind", tuple(k for k in CENTERING_KINDS if k != "custom"))
    n_list = r.int_list("run.n_list")
    if not n_list or min(n_list) < 1:
        raise r.error("run.n_list", "need at least one positive n")
    ensemble = r.integer("run.ensemble")
    if ensemble < 100:
        raise r.error("run.ensemble", "ensembles below 100 members are rejected")
    seed = r.integer("run.seed")
    if seed < 0:
        raise r.error("run.seed", "seed must be nonnegative")
    t_points = r.integer("run.t_points", 65)
    if t_points < 2:
        raise r.error("run.t_points", "need at least two grid times")
    tol = Tolerances(r.real("tol.ks", 0.02), r.real("tol.cov", 0.03), r.real("tol.qv", 0.05))
    for key, v in (("tol.ks", tol.ks), ("tol.cov", tol.cov), ("tol.qv", tol.qv)):
        if v <= 0:
            raise r.error(key, "tolerances must be positive")
    out = Path(r.raw("output.dir", f"out/{entries['name']}"))
    return Scenario(
        entries=dict(entries), lines=dict(lines), source=source, curve=curve, spec=spec,
        observable=observable, initial_kind=ikind, initial=initial, centering_kind=ckind,
        n_list=n_list, ensemble=ensemble, seed=seed, t_points=t_points,
        compare=r.boolean("run.compare", True), tolerances=tol, grid=grid, output_dir=out,
        marginals=r.choice("output.marginals", MARGINAL_FORMATS, "csv"),
    )


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("quasistatic") / "scenarios" / f"{name}.cfg"))


def load_scenario(path_or_name: str, overrides: dict | None = None) -> Scenario:
    """Read a scenario file (or a built-in scenario by name) and validate it."""
    p = Path(path_or_name)
    if not p.exists() and path_or_name in BUILTIN:
        p = builtin_path(path_or_name)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc.strerror}", None, None, str(p)) from None
    entries, lines = parse_text(text, str(p))
    for k, v in (overrides or {}).items():
        entries[k] = v
        lines.pop(k, None)
    return build_scenario(entries, lines, str(p))
