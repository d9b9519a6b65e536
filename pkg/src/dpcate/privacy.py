"""Privacy budgets, the Gaussian mechanism scale and composition rules."""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.optimize import brentq


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair. ``epsilon = inf`` means no privacy (no noise)."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.epsilon)

    def halve(self) -> "PrivacyBudget":
        return PrivacyBudget(self.epsilon / 2.0, self.delta / 2.0)

    def to_dict(self) -> dict:
        return {"epsilon": _enc(self.epsilon), "delta": self.delta}

    @classmethod
    def from_dict(cls, d) -> "PrivacyBudget":
        return cls(float(d["epsilon"]), float(d["delta"]))


def _enc(v: float):
    return "inf" if math.isinf(v) else v


@dataclass(frozen=True)
class BudgetPlan:
    """How one total budget is spent across the two stages.

    Stage 1 fits the outcome and propensity models on the nuisance split, each
    at half the budget, so they compose sequentially to ``total`` on that split.
    Stage 2 runs on the disjoint second split, so it may spend ``total`` again
    (parallel composition); releases are post-processed nuisances plus a fresh
    stage-2 mechanism.
    """

    total: PrivacyBudget
    stage1_mu: PrivacyBudget
    stage1_pi: PrivacyBudget
    stage2: PrivacyBudget
    note: str = "stage 1 and stage 2 use disjoint data splits"

    @classmethod
    def from_total(cls, total: PrivacyBudget) -> "BudgetPlan":
        half = total.halve()
        return cls(total=total, stage1_mu=half, stage1_pi=half, stage2=total)

    def stage1_total(self) -> PrivacyBudget:
        return basic_composition([self.stage1_mu, self.stage1_pi])

    def to_dict(self) -> dict:
        return {"total": self.total.to_dict(), "stage1_mu": self.stage1_mu.to_dict(),
                "stage1_pi": self.stage1_pi.to_dict(), "stage2": self.stage2.to_dict(),
                "note": self.note}


def gaussian_sigma(budget: PrivacyBudget, l2_sensitivity: float) -> float:
    """Noise std of the classical Gaussian mechanism.

    ``sigma = sqrt(2 ln(1.25/delta)) * sensitivity / epsilon``; zero for an
    infinite epsilon.
    """
    if l2_sensitivity < 0:
        raise ValueError("sensitivity must be nonnegative")
    if budget.is_infinite:
        return 0.0
    return math.sqrt(2.0 * math.log(1.25 / budget.delta)) * l2_sensitivity / budget.epsilon


def basic_composition(budgets) -> PrivacyBudget:
    budgets = list(budgets)
    return PrivacyBudget(sum(b.epsilon for b in budgets), min(0.999999, sum(b.delta for b in budgets)))


def dp_composition_budget(per_step: PrivacyBudget, steps: int,
                          delta_slack: float = 0.0, mode: str = "advanced") -> PrivacyBudget:
    """Total budget of ``steps`` adaptive runs of a ``per_step`` mechanism.

    Advanced composition: ``eps = sqrt(2 k ln(1/slack)) eps_s + k eps_s (e^eps_s - 1)``
    and ``delta = k delta_s + slack``. With ``steps == 1`` or ``delta_slack <= 0``
    (or ``mode="basic"``) this falls back to additive composition.
    """
    if steps < 1 or int(steps) != steps:
        raise ValueError("steps must be a positive integer")
    if mode not in ("advanced", "basic"):
        raise ValueError("mode must be 'advanced' or 'basic'")
    k = int(steps)
    eps_s, delta_s = per_step.epsilon, per_step.delta
    if mode == "basic" or k == 1 or delta_slack <= 0:
        return PrivacyBudget(k * eps_s, min(0.999999, k * delta_s))
    if not delta_slack < 1:
        raise ValueError("delta_slack must be < 1")
    eps = math.sqrt(2 * k * math.log(1 / delta_slack)) * eps_s + k * eps_s * math.expm1(eps_s)
    return PrivacyBudget(eps, min(0.999999, k * delta_s + delta_slack))


def per_step_budget(total: PrivacyBudget, steps: int) -> PrivacyBudget:
    """Largest per-step budget whose advanced composition fits inside ``total``.

    Half of ``total.delta`` is used as composition slack and the other half is
    spread evenly across steps. The result is never worse than the basic split.
    """
    if total.is_infinite:
        return total
    slack = total.delta / 2.0
    delta_s = total.delta / (2.0 * steps)
    basic = total.epsilon / steps
    if steps == 1:
        return PrivacyBudget(total.epsilon, total.delta)

    def excess(e):
        return dp_composition_budget(PrivacyBudget(e, delta_s), steps, slack).epsilon - total.epsilon

    hi = total.epsilon
    if excess(hi) <= 0:
        best = hi
    else:
        best = brentq(excess, 1e-12, hi, xtol=1e-14)
        # brentq may land a hair above the root
        while excess(best) > 0:
            best *= 1 - 1e-12
    return PrivacyBudget(max(best, basic), delta_s)
