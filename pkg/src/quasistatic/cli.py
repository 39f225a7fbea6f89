"""Scenario runner: ``qds run | sweep | coeffs | validate <config>``.

Exit codes: 0 success, 2 configuration or IO error, 3 statistical failure.
``QDS_WORKERS`` sets the thread count of the compiled kernels and
``QDS_BACKEND=python`` forces the numpy kernels.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sympy
from scipy import stats

from . import __version__, kernels
from .coefficients import (CenteringCurve, DiffusionCurve, admissibility_gap, diffusion_curve, drift_zeta,
                           explicit_centering, inadmissible_mean_exact, lebesgue_centering, measure_centering,
                           step_grid, zero_centering)
from .config import ConfigError, Scenario, load_scenario
from .diffusion import ComparisonReport, compare_ensemble, ks_statistic
from .montecarlo import (InadmissibleMeasure, InitialPoints, PathEnsemble, ensemble_moments, sample_initial,
                         simulate_ensemble)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAT = 3

SUMMARY_COLUMNS = ("n", "t", "mean", "var", "m4", "ks", "cov_dev", "qv_dev")


def run_key(seed: int, n: int) -> int:
    """Philox key for level ``n`` of a run; distinct levels get independent ensembles."""
    return (int(seed) << 32) | (int(n) & 0xFFFFFFFF)


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------

def inadmissible_centering(n: int, t_grid, K: int) -> CenteringCurve:
    t_grid = np.asarray(t_grid, dtype=float)
    vals = [inadmissible_mean_exact(n, float(t), K) for t in t_grid]
    return CenteringCurve(t_grid, np.array(vals), "measure_mean", f"inadmissible_example({K})")


def scenario_centering(sc: Scenario, n: int, t_grid, drift=None) -> CenteringCurve:
    f = sc.observable
    kind = sc.centering_kind
    if kind == "lebesgue_mean":
        return lebesgue_centering(sc.spec, n, f, t_grid)
    if kind == "measure_mean":
        if isinstance(sc.initial, InadmissibleMeasure):
            return inadmissible_centering(n, t_grid, sc.initial.K)
        return measure_centering(sc.spec, n, f, sc.initial, t_grid)
    if kind == "explicit_zeta":
        if drift is None:
            drift = drift_zeta(sc.curve, f, t_grid)
        return explicit_centering(drift, t_grid)
    return zero_centering(t_grid, f.dim)


def scenario_points(sc: Scenario, n: int) -> InitialPoints:
    key = run_key(sc.seed, n)
    horizon = n if sc.spec.is_doubling() else 0
    if isinstance(sc.initial, InadmissibleMeasure):
        return sc.initial.sample(sc.ensemble, key, n)
    return sample_initial(sc.initial, sc.ensemble, key, horizon=horizon)


def scenario_ensemble(sc: Scenario, n: int, drift=None) -> PathEnsemble:
    t = sc.t_grid
    c = scenario_centering(sc, n, t, drift)
    meta = {"seed": sc.seed, "scenario": sc.name}
    return simulate_ensemble(sc.spec, n, sc.observable, scenario_points(sc, n), t, c, meta=meta)


def scenario_diffusion(sc: Scenario) -> DiffusionCurve:
    return diffusion_curve(sc.curve, sc.observable)


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _fmt(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_marginals_csv(ens: PathEnsemble, path: Path) -> None:
    m, T, d = ens.marginals.shape
    table = np.column_stack([np.repeat(np.arange(m), T), np.tile(ens.t_grid, m),
                             ens.marginals.reshape(m * T, d)])
    header = ",".join(["member", "t"] + [f"value_{i + 1}" for i in range(d)])
    np.savetxt(path, table, fmt=["%d"] + ["%.17g"] * (d + 1), delimiter=",", header=header, comments="")


def summary_rows(n: int, ens: PathEnsemble, report: ComparisonReport | None) -> list[list[str]]:
    mom = ensemble_moments(ens, t_pairs=[])
    rows = []
    d = ens.dim
    cov_t = report.cov_dev_by_t() if report else np.full(ens.t_grid.size, np.nan)
    qv = report.qv_dev if report else math.nan
    for j, t in enumerate(ens.t_grid):
        for c in range(d):
            ks = report.ks[j, c] if report else math.nan
            row = [str(n), _fmt(t), _fmt(mom.mean[j, c]), _fmt(mom.var[j, c]), _fmt(mom.m4[j, c]),
                   _fmt(ks), _fmt(cov_t[j]), _fmt(qv)]
            if d > 1:
                row.append(str(c + 1))
            rows.append(row)
    return rows


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")


def write_manifest(sc: Scenario, out: Path, files: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "scenario": sc.name,
        "config_hash": sc.config_hash(),
        "config": sc.serialize(),
        "seed": sc.seed,
        "backend": kernels.BACKEND,
        "versions": {"quasistatic": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__, "sympy": sympy.__version__},
        "files": {p.name: _sha256(p) for p in files},
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# Verbs
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    exit_code: int
    reports: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def inadmissible_table(sc: Scenario, ensembles: dict) -> list[list[str]]:
    rows = []
    for n, ens in ensembles.items():
        exact = math.sqrt(n) * inadmissible_mean_exact(n, 1.0, sc.initial.K)
        bound = -math.sqrt(n) / (math.log2(n) + 1) ** 2
        z = ens.zeta()[:, -1, 0] * math.sqrt(n)
        rows.append([str(n), _fmt(exact), _fmt(bound), _fmt(z.mean()), _fmt(z.std(ddof=1) / math.sqrt(z.size)),
                     str(exact <= bound)])
    return rows


def run_scenario(sc: Scenario, out: Path | None = None, log=print) -> RunResult:
    """Centering, simulation and comparison for every ``n`` of the scenario; writes all artifacts."""
    out = Path(out or sc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    sig = scenario_diffusion(sc) if sc.compare else None
    if sig is not None:
        sig.to_csv(out / "diffusion.csv")
        files.append(out / "diffusion.csv")
    drift = None
    if sc.centering_kind == "explicit_zeta":
        drift = drift_zeta(sc.curve, sc.observable, sc.t_grid)
        drift.to_csv(out / "drift.csv")
        files.append(out / "drift.csv")
    rows, text, reports, ensembles, integrators = [], [], {}, {}, {}
    status = EXIT_OK
    for n in sc.n_list:
        ens = scenario_ensemble(sc, n, drift)
        report = compare_ensemble(ens, sig, sc.tolerances) if sig is not None else None
        reports[n] = report
        if isinstance(sc.initial, InadmissibleMeasure):
            ensembles[n] = ens
        integrators[str(n)] = ens.meta["backend"]
        rows += summary_rows(n, ens, report)
        if sc.marginals == "csv":
            p = out / f"marginals_n{n}.csv"
            write_marginals_csv(ens, p)
            files.append(p)
        elif sc.marginals == "npz":
            p = out / f"marginals_n{n}.npz"
            ens.to_npz(p)
            files.append(p)
        text.append(f"[n={n}] backend={ens.meta['backend']}")
        if report is not None:
            text.append(report.to_text())
            if not report.passed:
                status = EXIT_STAT
        log(f"n={n}: " + (f"passed={report.passed} ks_max={report.ks_max:.4g} cov_max={report.cov_max:.4g} "
                          f"qv_dev={report.qv_dev:.4g}" if report else "simulated"))
    header = list(SUMMARY_COLUMNS) + (["component"] if sc.observable.dim > 1 else [])
    write_rows(out / "summary.csv", header, rows)
    files.append(out / "summary.csv")
    if ensembles:
        write_rows(out / "inadmissible_table.csv",
                   ["n", "sqrt_n_mean_exact", "divergence_bound", "sqrt_n_mean_sim", "sim_se", "below_bound"],
                   inadmissible_table(sc, ensembles))
        files.append(out / "inadmissible_table.csv")
    (out / "report.txt").write_text("\n".join(text) + "\n")
    files.append(out / "report.txt")
    write_manifest(sc, out, files, {"n_list": list(sc.n_list), "exit_code": status,
                                    "orbit_backend": integrators})
    return RunResult(status, reports, files)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    ci_low: float
    ci_high: float

    @classmethod
    def fit(cls, n, y, level: float = 0.95) -> "SlopeFit | None":
        n, y = np.asarray(n, dtype=float), np.asarray(y, dtype=float)
        if n.size < 3 or np.any(~np.isfinite(y)) or np.any(y <= 0):
            return None
        r = stats.linregress(np.log(n), np.log(y))
        q = stats.t.ppf(0.5 + level / 2, n.size - 2)
        return cls(float(r.slope), float(r.slope - q * r.stderr), float(r.slope + q * r.stderr))


@dataclass
class SweepResult:
    n: list
    mean_error: list
    gap: list
    ks: list
    fits: dict


def sweep(sc: Scenario, n_list=None, out: Path | None = None, log=print) -> SweepResult:
    """Per-level errors and their log-log slopes.

    ``mean_error`` is the median over members of ``sup_t |zeta_n - zeta|``,
    ``gap`` the admissibility gap of the scenario centering and ``ks`` the
    Kolmogorov-Smirnov distance of ``chi_n(1)`` from the limit law.
    """
    n_list = tuple(n_list or sc.n_list)
    if len(n_list) < 3:
        raise ConfigError("a sweep needs at least three values of n", "run.n_list",
                          sc.lines.get("run.n_list"), sc.source)
    f = sc.observable
    t = sc.t_grid
    drift = drift_zeta(sc.curve, f, t)
    sig = scenario_diffusion(sc) if sc.compare else None
    res = SweepResult([], [], [], [], {})
    for n in n_list:
        ens = scenario_ensemble(sc, n, drift)
        err = np.max(np.abs(ens.zeta() - drift.values[None, :, :]), axis=(1, 2))
        res.n.append(n)
        res.mean_error.append(float(np.median(err)))
        c = scenario_centering(sc, n, step_grid(n), drift_zeta(sc.curve, f, step_grid(n))
                               if sc.centering_kind == "explicit_zeta" else None)
        res.gap.append(admissibility_gap(sc.spec, n, f, c))
        if sig is not None:
            var1 = sig.quadratic_variation([1.0])[0]
            res.ks.append(max(ks_statistic(ens.marginals[:, -1, i], float(var1[i, i])) for i in range(f.dim)))
        else:
            res.ks.append(math.nan)
        log(f"n={n}: mean_error={res.mean_error[-1]:.4g} gap={res.gap[-1]:.4g} ks={res.ks[-1]:.4g}")
    for name in ("mean_error", "gap", "ks"):
        res.fits[name] = SlopeFit.fit(res.n, getattr(res, name))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "sweep.csv", ["n", "mean_error", "gap", "ks"],
                   [[str(n), _fmt(a), _fmt(b), _fmt(c)] for n, a, b, c in zip(res.n, res.mean_error, res.gap, res.ks)])
        write_rows(out / "sweep_fits.csv", ["quantity", "slope", "ci_low", "ci_high"],
                   [[k] + ([_fmt(v.slope), _fmt(v.ci_low), _fmt(v.ci_high)] if v else ["nan"] * 3)
                    for k, v in res.fits.items()])
        write_manifest(sc, out, [out / "sweep.csv", out / "sweep_fits.csv"], {"n_list": list(res.n)})
    return res


def coefficients_only(sc: Scenario, out: Path | None = None) -> list[Path]:
    out = Path(out or sc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    drift = drift_zeta(sc.curve, sc.observable, sc.t_grid)
    sig = scenario_diffusion(sc)
    drift.to_csv(out / "drift.csv")
    sig.to_csv(out / "diffusion.csv")
    return [out / "drift.csv", out / "diffusion.csv"]


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qds", description="Quasistatic dynamical system scenario runner.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("run", "simulate and compare every n of the scenario"),
                        ("sweep", "convergence table across n with log-log slopes"),
                        ("coeffs", "drift and diffusion coefficients only"),
                        ("validate", "parse and validate the scenario")):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("config", help="scenario file or built-in name")
        if verb != "validate":
            s.add_argument("--out", help="output directory (default: output.dir)")
        if verb in ("run", "sweep"):
            s.add_argument("--n", type=int, nargs="+", help="override run.n_list")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        overrides = {"run.n_list": ", ".join(map(str, args.n))} if getattr(args, "n", None) else None
        sc = load_scenario(args.config, overrides)
        if args.verb == "validate":
            print(f"ok: {sc.name}")
            return EXIT_OK
        if args.verb == "coeffs":
            for p in coefficients_only(sc, args.out):
                print(p)
            return EXIT_OK
        if args.verb == "sweep":
            res = sweep(sc, out=Path(args.out or sc.output_dir) / "sweep")
            for k, v in res.fits.items():
                print(f"{k}: " + (f"slope={v.slope:.4f} ci=[{v.ci_low:.4f}, {v.ci_high:.4f}]" if v else "no fit"))
            return EXIT_OK
        return run_scenario(sc, args.out).exit_code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
