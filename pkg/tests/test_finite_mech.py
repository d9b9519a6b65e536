import math

import numpy as np
import pytest

from dpcate.basis import PolynomialBasis
from dpcate.data import Domain, Sample
from dpcate.finite_mech import (InfluenceEvaluator, OptimizerOptions, calibration_c, gross_error_sensitivity,
                                influence_vector_krr, influence_vector_parametric, noise_scale, release_finite,
                                tilt_derivative)
from dpcate.privacy import PrivacyBudget
from dpcate.pseudo import targets_arrays
from dpcate.secondstage import KernelSpec, fit_krr_arrays, fit_linear_basis_arrays

DOMAIN = Domain(np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([-2.0, 9.0]))


def test_calibration_reference_value():
    assert calibration_c(1.0, 0.05, 1000) == pytest.approx(0.03569445091515227, rel=1e-12)


def test_calibration_properties():
    assert calibration_c(2.0, 0.05, 1000) == pytest.approx(calibration_c(1.0, 0.05, 1000) / 2, rel=1e-15)
    assert calibration_c(1.0, 0.05, 2000) < calibration_c(1.0, 0.05, 1000)
    assert calibration_c(math.inf, 0.05, 10) == 0.0
    with pytest.raises(ValueError):
        calibration_c(1.0, 0.05, 1)


def test_calibration_random_triples():
    rng = np.random.default_rng(0)
    for _ in range(10):
        eps, delta, n = rng.uniform(0.01, 10), rng.uniform(1e-6, 0.5), int(rng.integers(2, 10 ** 6))
        ref = 5.0 / (eps * n) * np.sqrt(2.0 * np.log(n) * np.log(2.0 / delta))
        assert abs(calibration_c(eps, delta, n) - ref) <= 1e-12 * ref


def test_noise_scale_decays_with_n():
    b = PrivacyBudget(1.0, 0.05)
    for n in (100, 200, 400):
        assert noise_scale(3.0, b, 2 * n) / noise_scale(3.0, b, n) <= 0.6


@pytest.fixture(scope="module")
def fitted(small_data_module):
    d, eta = small_data_module
    rho, phi = targets_arrays(d, eta, "DR")
    krr = fit_krr_arrays(d.x, rho, phi, KernelSpec(0.4, 2), 0.1)
    lin = fit_linear_basis_arrays(d.x, rho, phi, PolynomialBasis(2, 2, [[0, 1], [0, 1]]), reg=0.01)
    return d, eta, krr, lin


@pytest.fixture(scope="module")
def small_data_module():
    from dpcate.data import SyntheticConfig, generate_synthetic
    from dpcate.nuisance import fit_nuisances_nonprivate
    d, _ = generate_synthetic(SyntheticConfig(n=110, seed=21))
    eta = fit_nuisances_nonprivate(d.subset(np.arange(60)))
    return d.subset(np.arange(60, 110)), eta


def test_if_vanishes_for_zero_residual(fitted):
    d, eta, krr, _ = fitted
    x = d.x[0]
    ev = InfluenceEvaluator(krr, d.x[:4], eta, "DR", include_penalty_shift=False)
    # choose y so that phi(z) = g(x): phi is affine in y
    p0 = ev.weights_and_residuals(1, x, 0.0)[1][0]
    p1 = ev.weights_and_residuals(1, x, 1.0)[1][0]
    y = -p0 / (p1 - p0)
    assert np.allclose(ev(1, x, y)[0], 0.0, atol=1e-9)
    full = InfluenceEvaluator(krr, d.x[:4], eta, "DR")
    assert np.allclose(full(1, x, y)[0], full.shift, atol=1e-9)


def test_r_weight_shrinks_influence(const_eta):
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(20, 1))
    kappa = 0.05
    eta = const_eta(pi=1 - kappa, mu1=0.3, mu0=0.1, kappa=kappa)
    krr = fit_krr_arrays(x, np.ones(20), rng.normal(size=20), KernelSpec(0.3, 1), 0.1)
    ev = InfluenceEvaluator(krr, x[:3], eta, "R", include_penalty_shift=False)
    z = np.array([0.4])
    rho, resid = ev.weights_and_residuals(1, z, 2.0)
    assert rho[0] == pytest.approx(kappa ** 2)
    assert np.allclose(ev(1, z, 2.0)[0], kappa ** 2 * resid[0] * ev.h(z)[0])


def test_resolvent_matches_discretized_operator():
    # n = 3 points on a fine grid; the empirical operator acts on grid functions
    grid = np.linspace(0.0, 1.0, 2001)
    idx = np.array([400, 1000, 1700])
    xs = grid[idx][:, None]
    rho = np.array([0.3, 1.0, 0.6])
    lam, n = 0.2, 3
    kernel = KernelSpec(0.25, 1)
    krr = fit_krr_arrays(xs, rho, np.array([1.0, -0.5, 2.0]), kernel, lam)
    queries = grid[[100, 900, 1500]][:, None]
    z = grid[1200]
    ev = InfluenceEvaluator(krr, queries, None, "DR")
    h_resolvent = ev.h(np.array([[z]]))[0]
    kg = kernel(grid[:, None], grid[:, None])
    op = np.zeros((grid.size, grid.size))
    op[:, idx] = kg[:, idx] * rho / n
    f = np.linalg.solve(op + lam * np.eye(grid.size), kg[:, 1200])
    h_grid = f[[100, 900, 1500]]
    assert np.allclose(h_resolvent, h_grid, rtol=1e-4)


def test_constant_basis_gives_constant_vector(const_eta):
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(10, 2))
    lin = fit_linear_basis_arrays(x, np.ones(10), rng.normal(size=10), PolynomialBasis(2, 0))
    v = influence_vector_parametric(lin, rng.uniform(size=(6, 2)), Sample(np.array([0.2, 0.9]), 1, 1.0),
                                    const_eta(), "DR")
    assert np.allclose(v, v[0])


def test_parametric_matches_weighted_least_squares_by_hand(const_eta):
    # p = 2 (basis 1, x), n = 5, rho = 1, reg = 0: IF = Psi(q) (X'X/n)^-1 psi(x) r
    x = np.array([[0.0], [0.25], [0.5], [0.75], [1.0]])
    phi = np.array([1.0, 0.0, 2.0, 1.0, 3.0])
    lin = fit_linear_basis_arrays(x, np.ones(5), phi, PolynomialBasis(1, 1))
    eta = const_eta(pi=0.5)
    z = Sample(np.array([0.6]), 1, 0.7)
    # phi(z) = 2 * 0.7 = 1.4 under pi = 0.5 and zero outcome model
    design = np.column_stack([np.ones(5), x[:, 0]])
    gram = design.T @ design / 5
    theta = np.linalg.solve(gram, design.T @ phi / 5)
    r = 1.4 - (theta[0] + theta[1] * 0.6)
    q = np.array([[0.1], [0.9]])
    expected = np.column_stack([np.ones(2), q[:, 0]]) @ np.linalg.solve(gram, np.array([1.0, 0.6])) * r
    assert np.allclose(influence_vector_parametric(lin, q, z, eta, "DR"), expected, rtol=1e-12)


@pytest.mark.parametrize("model_name", ["krr", "lin"])
def test_tilt_finite_difference(fitted, model_name):
    d, eta, krr, lin = fitted
    model = krr if model_name == "krr" else lin
    rng = np.random.default_rng(3)
    queries = rng.uniform(size=(5, 2))
    for _ in range(5):
        z = Sample(rng.uniform(size=2), int(rng.integers(2)), float(rng.uniform(-2, 9)))
        fd = tilt_derivative(model, queries, z, eta, "DR")
        if_vec = (influence_vector_krr if model_name == "krr" else influence_vector_parametric)(
            model, queries, z, eta, "DR")
        assert np.linalg.norm(fd - if_vec) <= 0.01 * np.linalg.norm(fd)


def test_if_affine_in_y(fitted):
    d, eta, krr, _ = fitted
    ev = InfluenceEvaluator(krr, d.x[:5], eta, "R")
    x = d.x[7]
    v = [ev(0, x, y)[0] for y in (-1.0, 2.0, 5.0)]
    assert np.allclose((v[1] - v[0]) / 3.0, (v[2] - v[1]) / 3.0, atol=1e-10)


def test_gamma_closed_form_on_constant_model(const_eta):
    # DR with mu = 0 and pi = 0.5: phi = +-2y; constant basis without ridge: IF = phi - theta
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(5, 1))
    phi = np.array([1.0, -0.5, 0.3, 2.0, 0.0])
    lin = fit_linear_basis_arrays(x, np.ones(5), phi, PolynomialBasis(1, 0))
    theta = phi.mean()
    dom = Domain(np.array([[0.0, 1.0]]), np.array([-1.0, 3.0]))
    res = gross_error_sensitivity(lin, np.array([[0.2], [0.7]]), dom, const_eta(pi=0.5), "DR",
                                  OptimizerOptions(scan_points=16, starts=2))
    expected = math.sqrt(2) * max(abs(s * 2 * y - theta) for s in (-1, 1) for y in (-1.0, 3.0))
    assert res.gamma == pytest.approx(expected, rel=1e-9)


def test_gamma_grows_with_outcome_bounds(fitted):
    d, eta, krr, _ = fitted
    opts = OptimizerOptions(scan_points=64, starts=3)
    g1 = gross_error_sensitivity(krr, d.x[:5], DOMAIN, eta, "DR", opts).gamma
    wide = Domain(DOMAIN.covariate_bounds, np.array([-4.0, 12.0]))
    g2 = gross_error_sensitivity(krr, d.x[:5], wide, eta, "DR", opts).gamma
    assert g2 > g1


def test_gamma_matches_dense_grid_in_one_dimension():
    from dpcate.data import SyntheticConfig, generate_synthetic
    from dpcate.nuisance import fit_nuisances_nonprivate
    d, _ = generate_synthetic(SyntheticConfig(p=1, n=200, seed=5))
    eta = fit_nuisances_nonprivate(d.subset(np.arange(100)))
    d2 = d.subset(np.arange(100, 200))
    rho, phi = targets_arrays(d2, eta, "R")
    krr = fit_krr_arrays(d2.x, rho, phi, KernelSpec(0.3, 1), 0.05)
    queries = np.linspace(0.05, 0.95, 10)[:, None]
    res = gross_error_sensitivity(krr, queries, d2, eta, "R")
    ev = InfluenceEvaluator(krr, queries, eta, "R")
    grid = np.linspace(0, 1, 10 ** 4)[:, None]
    dense = max(ev.norm_sq(a, grid, y).max() for a in (0, 1) for y in d2.outcome_bounds) ** 0.5
    assert abs(res.gamma - dense) <= 0.05 * dense


def test_release_limits_and_report(fitted):
    d, eta, krr, _ = fitted
    q = d.x[:6]
    opts = OptimizerOptions(scan_points=32, starts=2)
    rep = release_finite(krr, q, eta, PrivacyBudget(math.inf, 0.05), DOMAIN, "DR", 0, opts)
    assert np.array_equal(rep.private_estimates, rep.raw_estimates) and rep.noise_scale == 0.0
    rep = release_finite(krr, q, eta, PrivacyBudget(1.0, 0.05), DOMAIN, "DR", 0, opts)
    assert rep.noise_scale == pytest.approx(rep.gamma * rep.c_const)
    assert np.allclose(rep.private_estimates, rep.raw_estimates + rep.noise_scale * rep.noise)
    public = rep.to_dict()
    assert "raw_estimates" not in public
    assert "raw_estimates" in rep.to_dict(audit=True)


def test_zero_gamma_releases_raw(fitted):
    from dpcate.finite_mech import SensitivityResult
    d, eta, krr, _ = fitted
    sens = SensitivityResult(0.0, Sample(d.x[0], 0, 0.0))
    rep = release_finite(krr, d.x[:3], eta, PrivacyBudget(1.0, 0.05), DOMAIN, "DR", 1, sensitivity=sens)
    assert np.array_equal(rep.private_estimates, rep.raw_estimates)


def test_release_noise_statistics(fitted):
    d, eta, krr, _ = fitted
    q = np.random.default_rng(0).uniform(size=(300, 2))
    sens = gross_error_sensitivity(krr, q, DOMAIN, eta, "DR", OptimizerOptions(scan_points=64, starts=2))
    budget = PrivacyBudget(1.0, 0.05)
    draws = np.array([release_finite(krr, q, eta, budget, DOMAIN, "DR", s, sensitivity=sens).private_estimates
                      for s in range(100)])
    scale = sens.gamma * calibration_c(1.0, 0.05, krr.n)
    per_query = draws.std(axis=0, ddof=1)
    assert per_query.mean() == pytest.approx(scale, rel=0.05)
    assert np.median(np.abs(per_query / scale - 1)) < 0.1
    u = np.random.default_rng(7).standard_normal((10 ** 4, 4))
    corr = np.corrcoef(u.T)
    assert np.max(np.abs(corr[np.triu_indices(4, 1)])) < 0.05
