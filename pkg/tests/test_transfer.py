import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quasistatic.phase import ArraySpec, CircleMap, Density, MapCurve, ModelError, Observable, grid_points, linear_curve
from quasistatic.transfer import (TransferOperator, apply_transfer, correlation_term, evolve_pushforward,
                                  fit_exponential_rate, fixed_point_residual, inverse_branches, l1_distance,
                                  memory_loss_curve, srb_density, transfer_operator, ulam_matrix, ulam_vs_grid_l1)

TWO_PI = 2 * math.pi


def pointwise_transfer(tmap, h, x):
    """Oracle: sum over preimages of h(y) / T'(y), preimages by mpmath root finding."""
    out = []
    for xi in x:
        total = 0.0
        for j in range(tmap.degree):
            g = lambda y: tmap.degree * y + sum(a * mpmath.sin(2 * mpmath.pi * f * y)
                                                 for f, a in zip(tmap.freqs, tmap.amps)) - (xi + j)
            y = float(mpmath.findroot(g, (xi + j) / tmap.degree))
            total += h(y) / float(tmap.deriv(np.array([y]))[0])
        out.append(total)
    return np.array(out)


# --- inverse branches -----------------------------------------------------

def test_inverse_branches_doubling_half(doubling):
    assert inverse_branches(doubling, 0.5) == [(0.25, 2.0), (0.75, 2.0)]


def test_inverse_branches_doubling_zero(doubling):
    assert inverse_branches(doubling, 0.0) == [(0.0, 2.0), (0.5, 2.0)]


def test_inverse_branches_sine_map(sine_map):
    br = inverse_branches(sine_map, 0.0)
    assert len(br) == 2
    for y, d in br:
        tx = sine_map.lift(y)
        assert min(tx % 1.0, 1 - tx % 1.0) < 1e-12
        assert d >= 1.2


@given(x=st.floats(0, 1, exclude_max=True), a=st.floats(-0.12, 0.12))
def test_inverse_branches_match_mpmath(x, a):
    m = CircleMap(2, (1,), (a,))
    for j, (y, d) in enumerate(inverse_branches(m, x)):
        g = lambda v: 2 * v + a * mpmath.sin(2 * mpmath.pi * v) - (x + j)
        ref = float(mpmath.findroot(g, (x + j) / 2)) % 1.0
        assert min(abs(y - ref), 1 - abs(y - ref)) < 1e-12


# --- transfer operator ----------------------------------------------------

def test_doubling_preserves_lebesgue(doubling):
    assert np.max(np.abs(apply_transfer(doubling, np.ones(4096)) - 1)) < 1e-12


def test_doubling_annihilates_cos(doubling):
    h = np.cos(TWO_PI * grid_points(4096))
    assert np.max(np.abs(apply_transfer(doubling, h))) < 1e-10


@settings(max_examples=20)
@given(h=arrays(np.float64, 256, elements=st.floats(-5, 5)), a=st.floats(-0.12, 0.12))
def test_conservation_and_positivity(h, a):
    op = TransferOperator(2, (1,), (a,), 256)
    Lh = op.apply(h)
    assert abs(Lh.mean() - h.mean()) < 1e-10
    Lp = op.apply(np.abs(h))
    assert Lp.min() >= 0.0


def test_transfer_matches_pointwise_formula(sine_map):
    h = lambda x: 1 + 0.5 * np.sin(TWO_PI * x) + 0.2 * np.cos(4 * math.pi * x)
    M = 4096
    Lh = apply_transfer(sine_map, h(grid_points(M)))
    idx = np.array([0, 517, 2048, 3333, 4095])
    ref = pointwise_transfer(sine_map, h, grid_points(M)[idx])
    assert np.max(np.abs(Lh[idx] - ref)) < 1e-5


def test_duality(sine_map):
    M = 8192
    x = grid_points(M)
    h = 1 + 0.4 * np.cos(TWO_PI * x)
    for f in (lambda y: np.cos(TWO_PI * y), lambda y: np.sin(4 * math.pi * y)):
        lhs = np.mean(f(sine_map(x)) * h)
        rhs = np.mean(f(x) * TransferOperator.from_map(sine_map, M).apply(h))
        assert abs(lhs - rhs) < 1e-8


def test_operator_multi_column_apply(sine_map):
    op = transfer_operator(sine_map, 512)
    h = np.random.default_rng(1).random((512, 3))
    assert np.allclose(op.apply(h), np.column_stack([op.apply(h[:, i]) for i in range(3)]))


# --- SRB densities --------------------------------------------------------

def test_srb_doubling_is_uniform(doubling):
    rho = srb_density(doubling)
    assert np.max(np.abs(rho.grid_values - 1)) < 1e-10
    assert fixed_point_residual(doubling, rho) < 1e-10


def test_srb_sine_map_fixed_point(sine_map):
    rho = srb_density(sine_map)
    assert rho.grid_values.mean() == pytest.approx(1.0, abs=1e-12)
    assert fixed_point_residual(sine_map, rho) < 1e-10
    assert np.ptp(rho.grid_values) > 0.05


@pytest.mark.parametrize("tmap", [CircleMap(2, (1,), (0.1,)), CircleMap(3, (1, 2), (0.1, 0.02)),
                                  CircleMap(2, (1,), (-0.08,))])
def test_srb_agrees_with_ulam(tmap):
    rho = srb_density(tmap)
    u = ulam_matrix(tmap, 8192)
    assert ulam_vs_grid_l1(rho, u.stationary_density()) < 1e-3


@settings(max_examples=10)
@given(a=st.floats(-0.12, 0.12), c=st.floats(-1, 1))
def test_srb_duality_for_trig_observables(a, c):
    m = CircleMap(2, (1,), (a,))
    M = 8192
    rho = srb_density(m, M=M)
    x = grid_points(M)
    f = lambda y: np.cos(TWO_PI * y) + c * np.sin(TWO_PI * y)
    assert abs(np.mean(f(m(x)) * rho.grid_values) - np.mean(f(x) * rho.grid_values)) < 1e-8


def test_srb_regularity_along_curve(smooth_curve):
    ref = srb_density(smooth_curve.at(0.5))
    hs = np.array([0.2, 0.1, 0.05, 0.025])
    d = [l1_distance(srb_density(smooth_curve.at(0.5 + h)), ref) for h in hs]
    slope = np.polyfit(np.log(hs), np.log(d), 1)[0]
    assert slope >= 0.8 * 0.9 * smooth_curve.holder_exponent


# --- pushforwards ---------------------------------------------------------

def test_evolve_zero_steps_returns_input(smooth_curve):
    rho0 = Density.from_function(lambda x: 1 + 0.2 * np.sin(TWO_PI * x), 1024)
    assert evolve_pushforward(ArraySpec(smooth_curve), 10, rho0, 0) is rho0


def test_evolve_doubling_keeps_lebesgue(doubling_spec):
    out = evolve_pushforward(doubling_spec, 50, Density.uniform(), 37)
    assert np.max(np.abs(out.grid_values - 1)) < 1e-12


def test_evolve_rejects_bad_k(doubling_spec):
    with pytest.raises(ValueError):
        evolve_pushforward(doubling_spec, 5, Density.uniform(), 6)


def test_pushforward_approaches_srb(smooth_curve):
    spec = ArraySpec(smooth_curve)
    t = 0.5
    dists = []
    for n in [2 ** p for p in (6, 8, 10, 12)]:
        k = int(n * t)
        rho = evolve_pushforward(spec, n, Density.uniform(), k)
        dists.append(l1_distance(rho, srb_density(smooth_curve.at(k / n))))
    assert all(b < a for a, b in zip(dists, dists[1:]))


# --- Ulam -----------------------------------------------------------------

def test_ulam_doubling_two_cells(doubling):
    assert np.allclose(ulam_matrix(doubling, 2).dense(), 0.5)


def test_ulam_doubling_four_cells(doubling):
    P = ulam_matrix(doubling, 4).dense()
    expected = np.array([[.5, .5, 0, 0], [0, 0, .5, .5], [.5, .5, 0, 0], [0, 0, .5, .5]])
    assert np.allclose(P, expected, atol=1e-15)


@pytest.mark.parametrize("N", [16, 300])
def test_ulam_stochastic_with_unit_eigenvalue(sine_map, N):
    u = ulam_matrix(sine_map, N)
    assert np.max(np.abs(u.row_sums() - 1)) < 1e-12
    assert abs(u.leading_eigenvalue() - 1) < 1e-10


def test_ulam_entries_are_preimage_overlaps(sine_map):
    N = 8
    P = ulam_matrix(sine_map, N).dense()
    # oracle: fraction of a fine sub-grid of cell i landing in cell j
    for i in (0, 3, 7):
        y = (i + (np.arange(400_000) + 0.5) / 400_000) / N
        j = np.minimum((sine_map(y) * N).astype(int), N - 1)
        frac = np.bincount(j, minlength=N) / y.size
        assert np.allclose(P[i], frac, atol=1e-5)


# --- memory loss ----------------------------------------------------------

def _sawtooth(a=0.5, M=4096):
    return Density.from_function(lambda x: 1 + a * (x - 0.5), M, "sawtooth", certify=True, jump_point=0.0)


def test_memory_loss_identical_pair(doubling_spec):
    psi = _sawtooth()
    rep = memory_loss_curve(doubling_spec, 50, psi, psi, 20)
    assert all(v == 0.0 for _, v in rep.distances)
    assert rep.theta_hat == 0.0


def test_memory_loss_cos_pair_annihilated_in_one_step(doubling_spec):
    psi2 = Density.from_function(lambda x: 1 + 0.3 * np.cos(TWO_PI * x), 4096, certify=True)
    rep = memory_loss_curve(doubling_spec, 50, Density.uniform(), psi2, 10)
    d = dict(rep.distances)
    assert d[0] == pytest.approx(0.3 * 2 / math.pi, rel=1e-6)
    assert max(d[k] for k in range(1, 11)) < 1e-13
    assert rep.theta_hat == 0.0  # degenerate-fit sentinel


def test_memory_loss_sawtooth_pair_halves(doubling_spec):
    rep = memory_loss_curve(doubling_spec, 50, Density.uniform(), _sawtooth(), 40)
    assert 0.45 <= rep.theta_hat <= 0.55
    assert rep.fit_residual > 0.98
    d = dict(rep.distances)
    for k in range(1, 6):
        assert d[k] / d[k - 1] == pytest.approx(0.5, abs=0.01)


def test_memory_loss_perturbed_curve():
    spec = ArraySpec(linear_curve(0.1), "perturbed", 1.0)
    rep = memory_loss_curve(spec, 1024, Density.uniform(), _sawtooth(), 60)
    assert rep.passed and rep.theta_hat < 0.7


def test_memory_loss_requires_certificates(doubling_spec):
    with pytest.raises(ModelError):
        memory_loss_curve(doubling_spec, 10, Density(np.ones(64)), Density(np.ones(64)), 5)


def test_fit_rate_on_exact_geometric():
    k = np.arange(20)
    theta, r2, _ = fit_exponential_rate(k, 3 * 0.7 ** k)
    assert theta == pytest.approx(0.7, rel=1e-12)
    assert r2 == pytest.approx(1.0)


# --- correlation terms ----------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 5])
def test_step_correlations_vanish(doubling, k):
    assert abs(correlation_term(doubling, Observable.step(), k)) < 1e-10


def test_step_variance_term(doubling):
    assert correlation_term(doubling, Observable.step(), 0) == pytest.approx(1.0, abs=1e-12)


def test_cos4_one_step_correlation(doubling):
    assert abs(correlation_term(doubling, Observable.cos(2), 1)) < 1e-10
