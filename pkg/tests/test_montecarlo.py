import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from quasistatic.coefficients import (inadmissible_mean_exact, lebesgue_centering, measure_centering,
                                      zero_centering)
from quasistatic.montecarlo import (MIN_ENSEMBLE, InadmissibleMeasure, InitialPoints, PathEnsemble,
                                    coin_marginal_exact, coin_total_variation, covariance_matrix,
                                    default_t_grid, dyadic_pairs, ensemble_moments, sample_initial,
                                    simulate_ensemble, words_needed)
from quasistatic.phase import ArraySpec, Density, Observable

TWO_PI = 2 * math.pi


def coin_ensemble(doubling_spec, n, count, seed=7, t_grid=None):
    t = default_t_grid() if t_grid is None else t_grid
    pts = sample_initial(Density.uniform(), count, seed, horizon=n)
    return simulate_ensemble(doubling_spec, n, Observable.step(), pts, t, zero_centering(t))


# --- sampling -------------------------------------------------------------

def test_uniform_sampling_mean():
    x = sample_initial(Density.uniform(), 20_000, 1).x
    assert abs(x.mean() - 0.5) < 4 / math.sqrt(x.size)
    assert stats.kstest(x, "uniform").pvalue > 1e-4


def test_sampling_is_deterministic():
    rho = Density.from_function(lambda x: 1 + 0.3 * np.cos(TWO_PI * x), 256)
    a = sample_initial(rho, 5000, 99, horizon=200)
    b = sample_initial(rho, 5000, 99, horizon=200)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.words, b.words)
    assert not np.array_equal(a.x, sample_initial(rho, 5000, 100).x)


def test_sampling_prefix_independent_of_count():
    rho = Density.uniform()
    assert np.array_equal(sample_initial(rho, 300, 5).x, sample_initial(rho, 40_000, 5).x[:300])


def test_ramp_histogram_chi_square():
    M = 32
    rho = Density.from_function(lambda x: 1 + 0.5 * (x - 0.5), M, certify=True, jump_point=0.0)
    x = sample_initial(rho, 100_000, 11).x
    counts = np.bincount((x * M).astype(int), minlength=M)
    expected = rho.grid_values / rho.grid_values.sum() * x.size
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_words_carry_float_prefix():
    pts = sample_initial(Density.uniform(), 1000, 3, horizon=300)
    assert pts.words.shape[1] == words_needed(300)
    top = (pts.words[:, 0] >> np.uint64(11)).astype(float) * 2.0 ** -53
    assert np.array_equal(top, pts.x)


def test_periodic_binary_one_third():
    p = InitialPoints.periodic_binary("01", 256)
    assert p.x[0] == pytest.approx(1 / 3, abs=1e-15)
    assert p.bits == 256


def test_initial_points_reject_outside_unit_interval():
    with pytest.raises(ValueError):
        InitialPoints.from_floats([0.2, 1.0])


# --- inadmissible measure -------------------------------------------------

@given(u=st.floats(0, 1, exclude_max=True))
def test_zero_prefix_classes(u):
    meas = InadmissibleMeasure(3)
    p = int(meas.zero_prefix(np.array([u]), 256)[0])
    if u < 1 - meas.epsilon:
        assert p == 0
    else:
        assert p in (8, 16, 32, 64, 128, 256)


def test_inadmissible_sample_mixture_weights():
    meas = InadmissibleMeasure(3)
    pts = meas.sample(50_000, 4, horizon=64)
    x = pts.x
    frac_small = np.mean(x < 2.0 ** -8)
    expected = meas.epsilon + (1 - meas.epsilon) * 2.0 ** -8
    assert abs(frac_small - expected) < 4 * math.sqrt(expected / x.size)


def test_inadmissible_mean_matches_closed_form(doubling_spec):
    n = 256
    t = default_t_grid(17)
    pts = InadmissibleMeasure(3).sample(20_000, 8, horizon=n)
    ens = simulate_ensemble(doubling_spec, n, Observable.step(), pts, t, zero_centering(t))
    assert ens.meta["backend"] == "bits"
    z = ens.zeta()[:, :, 0]
    for j, ti in enumerate(t):
        se = z[:, j].std() / math.sqrt(z.shape[0]) + 1e-15
        assert abs(z[:, j].mean() - inadmissible_mean_exact(n, ti)) < 4 * se + 1e-12


def test_inadmissible_rejects_small_k():
    with pytest.raises(ValueError):
        InadmissibleMeasure(1)


# --- ensembles ------------------------------------------------------------

def test_constant_observable_gives_zero_fluctuations(smooth_curve):
    spec = ArraySpec(smooth_curve)
    t = default_t_grid(9)
    f = Observable.constant(1.0)
    c = lebesgue_centering(spec, 128, f, t, M=256)
    ens = simulate_ensemble(spec, 128, f, sample_initial(Density.uniform(), 300, 2), t, c)
    assert np.max(np.abs(ens.marginals)) < 1e-12


@pytest.mark.parametrize("n", [1, 2, 101, 1000])
def test_one_third_orbit(doubling_spec, n):
    t = np.array([0.0, 1.0])
    ens = simulate_ensemble(doubling_spec, n, Observable.step(), InitialPoints.periodic_binary("01", n + 128),
                            t, zero_centering(t))
    expected = 0.0 if n % 2 == 0 else -1 / math.sqrt(n)
    assert ens.marginals[0, 1, 0] == pytest.approx(expected, abs=1e-14)
    assert ens.meta["backend"] == "bits"


def test_one_third_orbit_fractional_time(doubling_spec):
    t = np.array([0.0, 0.25, 0.5])
    ens = simulate_ensemble(doubling_spec, 10, Observable.step(), InitialPoints.periodic_binary("01", 256),
                            t, zero_centering(t))
    # S(2.5) = -1 + 1 - 0.5, S(5) = -1
    assert ens.marginals[0, :, 0] * math.sqrt(10) == pytest.approx([0.0, -0.5, -1.0], abs=1e-14)


def test_ensemble_mean_matches_lebesgue_centering(smooth_curve):
    spec = ArraySpec(smooth_curve)
    n = 256
    t = default_t_grid(9)
    f = Observable.cos()
    c = lebesgue_centering(spec, n, f, t)
    ens = simulate_ensemble(spec, n, f, sample_initial(Density.uniform(), 20_000, 21), t, c)
    z = ens.zeta()[:, :, 0]
    se = z.std(axis=0) / math.sqrt(z.shape[0])
    assert np.all(np.abs(z.mean(axis=0) - c.values[:, 0]) <= 4 * se + 1e-15)


def test_measure_centering_matches_ensemble(smooth_curve):
    spec = ArraySpec(smooth_curve)
    n = 128
    t = default_t_grid(5)
    f = Observable.cos()
    nu = Density.from_function(lambda x: 1 + 0.5 * (1 - 4 * np.abs(x - 0.5)), 1024, certify=True)
    c = measure_centering(spec, n, f, nu, t)
    ens = simulate_ensemble(spec, n, f, sample_initial(nu, 20_000, 6), t, c)
    m = ens.marginals[:, :, 0]
    assert np.all(np.abs(m.mean(axis=0)) <= 4 * m.std(axis=0) / math.sqrt(m.shape[0]) + 1e-15)


def test_paths_start_at_zero_and_are_lipschitz(smooth_curve):
    spec = ArraySpec(smooth_curve)
    n = 300
    t = default_t_grid(33)
    f = Observable.cos(1, 2.0)
    c = lebesgue_centering(spec, n, f, t, M=1024)
    ens = simulate_ensemble(spec, n, f, sample_initial(Density.uniform(), 500, 4), t, c)
    chi = ens.marginals[:, :, 0]
    assert np.all(chi[:, 0] == 0)
    bound = math.sqrt(n) * (2.0 * np.diff(t) + np.abs(np.diff(c.values[:, 0])))
    assert np.all(np.abs(np.diff(chi, axis=1)) <= bound + 1e-12)


def test_centering_grid_must_match(doubling_spec):
    with pytest.raises(ValueError, match="centering grid"):
        simulate_ensemble(doubling_spec, 10, Observable.step(), InitialPoints.from_floats([0.1]),
                          default_t_grid(5), zero_centering(default_t_grid(9)))


def test_doubling_in_floats_warns(doubling_spec):
    t = default_t_grid(3)
    with pytest.warns(RuntimeWarning):
        simulate_ensemble(doubling_spec, 64, Observable.step(), InitialPoints.from_floats([0.1]), t,
                          zero_centering(t))


def test_ensemble_serialization(tmp_path, doubling_spec):
    ens = coin_ensemble(doubling_spec, 16, 120, t_grid=default_t_grid(5))
    ens.to_npz(tmp_path / "e.npz")
    with np.load(tmp_path / "e.npz") as z:
        assert np.array_equal(z["marginals"], ens.marginals)
    ens.to_csv(tmp_path / "e.csv")
    table = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1)
    assert table.shape == (120 * 5, 3)
    assert np.array_equal(table[:, 2].reshape(120, 5), ens.marginals[:, :, 0])


# --- moments --------------------------------------------------------------

def test_small_ensemble_rejected(doubling_spec):
    ens = coin_ensemble(doubling_spec, 16, MIN_ENSEMBLE - 1)
    with pytest.raises(ValueError):
        ensemble_moments(ens)


def test_covariance_on_diagonal_equals_variance(doubling_spec):
    ens = coin_ensemble(doubling_spec, 64, 2000)
    rep = ensemble_moments(ens, t_pairs=[(0.5, 0.5), (1.0, 1.0), (0.25, 0.75)])
    j = ens.t_index(0.5)
    assert rep.cov[0, 0] == rep.var[j, 0]
    assert rep.cov[1, 0] == rep.var[-1, 0]


def test_jackknife_se_of_mean_matches_analytic():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(50_000, 2, 1))
    m[:, 0] = 0.0
    t = np.array([0.0, 1.0])
    ens = PathEnsemble(1, t, zero_centering(t), m)
    rep = ensemble_moments(ens)
    assert rep.mean_se[1, 0] == pytest.approx(1 / math.sqrt(50_000), rel=0.2)
    assert rep.var_se[1, 0] == pytest.approx(math.sqrt(2 / 50_000), rel=0.2)
    assert abs(rep.excess_kurtosis[1, 0]) < 5 * rep.excess_kurtosis_se[1, 0]
    assert np.isnan(rep.excess_kurtosis[0, 0])


def test_dyadic_pairs_levels():
    pairs = dyadic_pairs(default_t_grid(5))
    assert pairs[0] == (0.0, 1.0)
    assert len(pairs) == 1 + 2 + 4
    assert dyadic_pairs(default_t_grid(65), max_level=1) == [(0.0, 1.0), (0.0, 0.5), (0.5, 1.0)]


def test_coin_variance_tends_to_one(doubling_spec):
    devs = []
    for n in (256, 1024, 4096):
        rep = ensemble_moments(coin_ensemble(doubling_spec, n, 20_000, seed=n))
        assert abs(rep.var[-1, 0] - 1) < 4 * rep.var_se[-1, 0]
        devs.append(abs(rep.var[-1, 0] - 1))
    assert max(devs) < 0.05


def test_coin_kolmogorov_ratio_bounded(doubling_spec):
    worst = []
    for n in (256, 1024, 4096, 16384):
        rep = ensemble_moments(coin_ensemble(doubling_spec, n, 5000, seed=n + 1))
        worst.append(np.nanmax(rep.kolmogorov_ratio))
    assert max(worst) <= 3 * 3.0  # Brownian increments have E X^4 / h^2 = 3


def test_vector_covariance_matrix(smooth_curve):
    spec = ArraySpec(smooth_curve)
    t = default_t_grid(3)
    f = Observable.cos_sin()
    ens = simulate_ensemble(spec, 64, f, sample_initial(Density.uniform(), 500, 9), t,
                            lebesgue_centering(spec, 64, f, t, M=512))
    cm = covariance_matrix(ens, 1.0)
    assert cm.shape == (2, 2)
    assert np.allclose(cm, cm.T)


# --- exact coin law -------------------------------------------------------

def test_coin_exact_n1():
    tab = coin_marginal_exact(1)
    assert tab.values.tolist() == [-1.0, 1.0]
    assert tab.probs == pytest.approx([0.5, 0.5], abs=1e-15)


def test_coin_exact_n2():
    tab = coin_marginal_exact(2)
    assert tab.values == pytest.approx([-math.sqrt(2), 0.0, math.sqrt(2)])
    assert tab.probs == pytest.approx([0.25, 0.5, 0.25], abs=1e-15)


@settings(max_examples=20)
@given(st.integers(1, 3000))
def test_coin_exact_matches_integer_binomials(n):
    tab = coin_marginal_exact(n)
    exact = np.array([float(Fraction(math.comb(n, j), 2 ** n)) for j in range(n + 1)])
    assert tab.probs.sum() == pytest.approx(1.0, abs=1e-13)
    assert np.max(np.abs(tab.probs - exact)) < 1e-13


def test_coin_total_variation_small_n(doubling_spec):
    n, count = 256, 40_000
    ens = coin_ensemble(doubling_spec, n, count, seed=3, t_grid=np.array([0.0, 1.0]))
    assert coin_total_variation(ens.at(1.0)[:, 0], n) < 3 * math.sqrt((n + 1) / count)


def test_total_variation_of_off_lattice_sample():
    assert coin_total_variation(np.full(100, 0.123), 4) == pytest.approx(1.0, abs=1e-15)
