import numpy as np
from hypothesis import given, settings, strategies as st

from dpcate.basis import PolynomialBasis


def test_terms_and_values():
    b = PolynomialBasis(2, 2)
    assert b.n_features == 6
    v = b(np.array([[2.0, 3.0]]))[0]
    assert sorted(v.tolist()) == sorted([1, 2, 3, 4, 6, 9])


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_unit_norm_on_box(x):
    b = PolynomialBasis(3, 3, bounds=[[-5, 5]] * 3, unit_norm=True)
    assert np.linalg.norm(b(np.array([x]))) <= 1 + 1e-12


def test_value_range_is_sound():
    rng = np.random.default_rng(0)
    b = PolynomialBasis(2, 2, bounds=[[0, 1], [0, 2]], unit_norm=True)
    coef = rng.normal(size=b.n_features)
    lo, hi = b.value_range(coef)
    vals = b(rng.uniform([0, 0], [1, 2], size=(5000, 2))) @ coef
    assert lo <= vals.min() and vals.max() <= hi


def test_gradient_matches_finite_difference():
    b = PolynomialBasis(2, 3, bounds=[[0, 2], [-1, 1]])
    x = np.array([[0.7, 0.2]])
    g = b.gradient(x)[0]
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1e-6
        fd = (b(x + e) - b(x - e))[0] / 2e-6
        assert np.allclose(g[:, j], fd, atol=1e-6)


def test_dict_roundtrip():
    b = PolynomialBasis(2, 2, bounds=[[0, 1], [0, 1]], unit_norm=True)
    c = PolynomialBasis.from_dict(b.to_dict())
    x = np.random.default_rng(1).uniform(size=(4, 2))
    assert np.array_equal(b(x), c(x))
