import numpy as np
import pytest

from dpcate.data import SyntheticConfig, generate_synthetic, oracle_nuisances
from dpcate.nuisance import nuisances_from_callables


@pytest.fixture(scope="session")
def small_data():
    d, true_cate = generate_synthetic(SyntheticConfig(n=400, seed=11))
    return d, true_cate


@pytest.fixture(scope="session")
def oracle_eta(small_data):
    _, true_cate = small_data
    mu, pi = oracle_nuisances(true_cate)
    return nuisances_from_callables(mu, pi, 0.05)


class ConstEta:
    """Nuisances that ignore x: handy for closed-form checks."""

    def __init__(self, pi=0.5, mu1=0.0, mu0=0.0, kappa=0.05):
        self._pi, self._mu1, self._mu0, self.kappa = pi, mu1, mu0, kappa

    def pi(self, x):
        return np.full(np.atleast_2d(x).shape[0], self._pi)

    def mu(self, x, a):
        a = np.broadcast_to(np.asarray(a, float), (np.atleast_2d(x).shape[0],))
        return np.where(a == 1, self._mu1, self._mu0)

    def outcome_abs_bound(self):
        return max(abs(self._mu1), abs(self._mu0))

    def propensity_range(self):
        return self._pi, self._pi


@pytest.fixture
def const_eta():
    return ConstEta
