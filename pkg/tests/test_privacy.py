import math

import pytest
from hypothesis import given, strategies as st

from dpcate.privacy import BudgetPlan, PrivacyBudget, dp_composition_budget, gaussian_sigma, per_step_budget


def test_budget_validation():
    with pytest.raises(ValueError):
        PrivacyBudget(0.0, 0.1)
    with pytest.raises(ValueError):
        PrivacyBudget(1.0, 1.0)
    assert PrivacyBudget(math.inf, 0.1).is_infinite


def test_budget_json_roundtrip_with_infinity():
    b = PrivacyBudget(math.inf, 0.05)
    assert PrivacyBudget.from_dict(b.to_dict()) == b


def test_advanced_composition_reference_value():
    # 100 steps at eps=0.01, delta=1e-6 with slack 1e-4
    total = dp_composition_budget(PrivacyBudget(0.01, 1e-6), 100, 1e-4)
    assert total.epsilon == pytest.approx(0.4392433723420375, rel=1e-12)
    assert total.delta == pytest.approx(2e-4)


def test_single_step_is_identity():
    b = PrivacyBudget(0.7, 1e-5)
    assert dp_composition_budget(b, 1, 1e-4) == b


def test_plan_splits_stage_one_in_half():
    plan = BudgetPlan.from_total(PrivacyBudget(2.0, 0.1))
    assert plan.stage1_mu == PrivacyBudget(1.0, 0.05)
    assert plan.stage1_total() == PrivacyBudget(2.0, 0.1)
    assert plan.stage2 == plan.total


def test_gaussian_sigma_formula():
    b = PrivacyBudget(0.5, 1e-5)
    assert gaussian_sigma(b, 2.0) == pytest.approx(math.sqrt(2 * math.log(1.25e5)) * 4.0)
    assert gaussian_sigma(PrivacyBudget(math.inf, 0.1), 2.0) == 0.0


@given(st.floats(0.05, 20.0), st.floats(1e-8, 0.2), st.integers(1, 500))
def test_per_step_budget_fits_inside_total(eps, delta, steps):
    total = PrivacyBudget(eps, delta)
    step = per_step_budget(total, steps)
    used = dp_composition_budget(step, steps, delta / 2)
    basic = dp_composition_budget(step, steps, mode="basic")
    assert min(used.epsilon, basic.epsilon) <= eps * (1 + 1e-9)
    assert used.delta <= delta * (1 + 1e-9)
    assert step.epsilon >= eps / steps * (1 - 1e-12)
