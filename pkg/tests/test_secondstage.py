import math

import numpy as np
import pytest

from dpcate.basis import PolynomialBasis
from dpcate.pseudo import WeightedTarget
from dpcate.secondstage import (KernelSpec, KrrModel, LinearBasisModel, NumericError, fit_krr, fit_krr_arrays,
                                fit_linear_basis, fit_linear_basis_arrays, median_bandwidth, model_from_dict)


def _targets(x, rho, phi):
    return [WeightedTarget(np.atleast_1d(xi), float(r), float(p)) for xi, r, p in zip(x, rho, phi)]


def test_kernel_self_value():
    assert KernelSpec(1.0, 2)(np.zeros(2), np.zeros(2))[0, 0] == pytest.approx(0.15915494309189535, rel=1e-14)
    with pytest.raises(ValueError):
        KernelSpec(0.0, 1)


def test_two_point_system_matches_hand_solution():
    # x = (0, 1), rho = (1, 0.5), phi = (1, -1), h = 1, lambda = 0.1, n = 2
    m = fit_krr(_targets([[0.0], [1.0]], [1.0, 0.5], [1.0, -1.0]), KernelSpec(1.0, 1), 0.1)
    assert m.alpha == pytest.approx([2.4785385044095845, -2.0023145562615445], rel=1e-12)
    assert m.predict([[0.5]])[0] == pytest.approx(0.16766193991772451, rel=1e-12)


def test_zero_targets_give_zero():
    x = np.random.default_rng(0).uniform(size=(10, 2))
    m = fit_krr_arrays(x, np.ones(10), np.zeros(10), KernelSpec(0.3, 2), 0.1)
    assert np.all(m.alpha == 0)
    assert np.all(m.predict(x) == 0)


def test_shrinkage_limit():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(20, 1))
    phi = rng.normal(size=20)
    preds = [np.abs(fit_krr_arrays(x, np.ones(20), phi, KernelSpec(0.3, 1), lam).predict(x)).max()
             for lam in (1e2, 1e4, 1e6)]
    assert preds[0] > preds[1] > preds[2] and preds[2] < 1e-5


def test_interpolation_limit():
    x = np.array([[0.0], [0.5], [1.0]])
    phi = np.array([1.0, -2.0, 0.5])
    m = fit_krr_arrays(x, np.ones(3), phi, KernelSpec(0.2, 1), 1e-9)
    assert m.predict(x) == pytest.approx(phi, abs=1e-6)


def test_normal_equation_residual_and_permutation_invariance():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(200, 2))
    rho = rng.uniform(0.05, 1.0, 200)
    phi = rng.normal(size=200) * 5
    m = fit_krr_arrays(x, rho, phi, KernelSpec(0.1, 2), 0.01)
    assert m.normal_residual() <= 1e-8
    perm = rng.permutation(200)
    m2 = fit_krr_arrays(x[perm], rho[perm], phi[perm], KernelSpec(0.1, 2), 0.01)
    q = rng.uniform(size=(50, 2))
    assert np.max(np.abs(m.predict(q) - m2.predict(q))) <= 1e-10


def test_predict_batch_and_dimension_check():
    rng = np.random.default_rng(3)
    m = fit_krr_arrays(rng.uniform(size=(30, 2)), np.ones(30), rng.normal(size=30), KernelSpec(0.5, 2), 0.1)
    assert m.predict(rng.uniform(size=(300, 2))).shape == (300,)
    with pytest.raises(ValueError):
        m.predict(rng.uniform(size=(5, 3)))


def test_krr_serialization_roundtrip():
    rng = np.random.default_rng(4)
    m = fit_krr_arrays(rng.uniform(size=(15, 2)), rng.uniform(0.1, 1, 15), rng.normal(size=15),
                       KernelSpec(0.4, 2), 0.05)
    back = model_from_dict(m.to_dict())
    assert isinstance(back, KrrModel)
    q = rng.uniform(size=(5, 2))
    assert np.array_equal(back.predict(q), m.predict(q))


def test_median_bandwidth():
    assert median_bandwidth(np.array([[0.0], [1.0], [3.0]])) == pytest.approx(2.0)


# ------------------------------------------------------------------ linear basis


def test_constant_basis_is_weighted_mean():
    const = PolynomialBasis(1, 0)
    phi = np.array([1.0, 2.0, 6.0])
    x = np.zeros((3, 1))
    m = fit_linear_basis(_targets(x, np.ones(3), phi), const, reg=0.0)
    assert m.theta[0] == pytest.approx(3.0)
    m = fit_linear_basis(_targets(x, np.ones(3), phi), const, reg=0.5)
    assert m.theta[0] == pytest.approx(3.0 / 1.5)


def test_doubling_weight_equals_duplication():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(12, 2))
    rho = rng.uniform(0.1, 1, 12)
    phi = rng.normal(size=12)
    basis = PolynomialBasis(2, 2)
    rho2 = rho.copy()
    rho2[4] *= 2
    a = fit_linear_basis_arrays(x, rho2, phi, basis, reg=0.0)
    dup = np.r_[np.arange(12), 4]
    # duplication changes n, so compare with masses that keep the 1/n normalization identical
    b = fit_linear_basis_arrays(x[dup], rho[dup], phi[dup], basis, reg=0.0, mass=np.full(13, 1 / 12))
    assert np.allclose(a.theta, b.theta, atol=1e-12)
    assert np.allclose(a.hessian, b.hessian, atol=1e-12)


def test_realizable_targets_recovered():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(40, 2))
    basis = PolynomialBasis(2, 2)
    theta0 = rng.normal(size=basis.n_features)
    m = fit_linear_basis_arrays(x, rng.uniform(0.2, 1, 40), basis(x) @ theta0, basis)
    assert np.allclose(m.theta, theta0, atol=1e-9)


def test_hessian_formula_and_positive_definite():
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(30, 1))
    rho = rng.uniform(0.2, 1, 30)
    basis = PolynomialBasis(1, 2)
    m = fit_linear_basis_arrays(x, rho, rng.normal(size=30), basis, reg=0.1, alpha_damp=0.01)
    psi = basis(x)
    expected = 2 / 30 * psi.T @ (rho[:, None] * psi) + 0.2 * np.eye(3) + 0.01 * np.eye(3)
    assert np.allclose(m.hessian, expected)
    assert np.linalg.eigvalsh(m.hessian).min() > 0


def test_rank_deficient_without_damping_errors():
    x = np.full((10, 1), 0.5)
    with pytest.raises(NumericError, match="damping"):
        fit_linear_basis_arrays(x, np.ones(10), np.arange(10.0), PolynomialBasis(1, 2), reg=0.0)
    m = fit_linear_basis_arrays(x, np.ones(10), np.arange(10.0), PolynomialBasis(1, 2), reg=0.0, alpha_damp=1e-3)
    assert np.linalg.eigvalsh(m.hessian).min() > 0


def test_fewer_samples_than_features_warns():
    with pytest.warns(UserWarning):
        fit_linear_basis_arrays(np.array([[0.1, 0.2]]), [1.0], [1.0], PolynomialBasis(2, 2), reg=0.1)


def test_linear_serialization_roundtrip():
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(20, 2))
    m = fit_linear_basis_arrays(x, np.ones(20), rng.normal(size=20), PolynomialBasis(2, 2, [[0, 1], [0, 1]]))
    back = model_from_dict(m.to_dict())
    assert isinstance(back, LinearBasisModel)
    assert np.array_equal(back.predict(x), m.predict(x))
