"""Stage 1: outcome and propensity models, privately or not.

Two privatization routes are offered:

``param_output_perturbation`` (default)
    L2-regularized convex models (ridge outcome with one coefficient block per
    arm, L2-logistic propensity) on unit-norm polynomial features. The exact
    minimizer has replace-one sensitivity ``2 L / (n reg)`` and Gaussian noise is
    added to the parameter vector, so the fitted function can be queried any
    number of times.

``dp_gradient_descent``
    A one-hidden-layer ReLU network trained by full-batch gradient descent with
    per-sample clipping and Gaussian noise on the summed gradient, accounted with
    advanced composition over the steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .basis import PolynomialBasis, as_2d
from .data import Dataset
from .privacy import BudgetPlan, PrivacyBudget, dp_composition_budget, gaussian_sigma, per_step_budget

logger = logging.getLogger(__name__)

METHODS = ("param_output_perturbation", "dp_gradient_descent")
DEFAULT_KAPPA = 0.05

DEFAULT_HYPER = {
    "degree": 2,       # polynomial degree of the convex models
    "reg": 1.0,        # strong-convexity constant of the convex models
    "width": 32,
    "steps": 200,
    "lr": 0.01,
    "clip": 1.0,
    "init_seed": 0,
}


class FitError(RuntimeError):
    pass


def _hyper(hyper):
    out = dict(DEFAULT_HYPER)
    out.update(hyper or {})
    return out


# --------------------------------------------------------------------------- models


class RidgeOutcome:
    """``mu(x, a) = mid + half * theta_a . psi(x)`` with ``||psi|| <= 1``."""

    def __init__(self, basis: PolynomialBasis, theta, y_mid: float, y_half: float):
        self.basis = basis
        self.theta = np.asarray(theta, dtype=float)
        self.y_mid, self.y_half = float(y_mid), float(y_half)

    @staticmethod
    def design(basis, x, a):
        psi = basis(x)
        a = np.broadcast_to(np.asarray(a, dtype=float), (psi.shape[0],))[:, None]
        return np.hstack([psi * (1.0 - a), psi * a])

    def __call__(self, x, a):
        return self.y_mid + self.y_half * (self.design(self.basis, x, a) @ self.theta)

    def abs_bound(self) -> float:
        m = self.basis.n_features
        bound = 0.0
        for block in (self.theta[:m], self.theta[m:]):
            lo, hi = self.basis.value_range(block)
            bound = max(bound, abs(self.y_mid + self.y_half * lo), abs(self.y_mid + self.y_half * hi))
        return bound

    def to_dict(self):
        return {"type": "ridge_outcome", "basis": self.basis.to_dict(), "theta": self.theta.tolist(),
                "y_mid": self.y_mid, "y_half": self.y_half}


class LogisticPropensity:
    def __init__(self, basis: PolynomialBasis, theta):
        self.basis = basis
        self.theta = np.asarray(theta, dtype=float)

    def __call__(self, x):
        return expit(self.basis(x) @ self.theta)

    def value_range(self):
        lo, hi = self.basis.value_range(self.theta)
        return float(expit(lo)), float(expit(hi))

    def to_dict(self):
        return {"type": "logistic_propensity", "basis": self.basis.to_dict(), "theta": self.theta.tolist()}


class MLP:
    """One hidden ReLU layer on box-normalized inputs (plus the arm for outcomes)."""

    def __init__(self, bounds, params: dict, with_arm: bool, link: str,
                 y_mid: float = 0.0, y_half: float = 1.0):
        self.bounds = np.asarray(bounds, dtype=float)
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self.with_arm = with_arm
        self.link = link
        self.y_mid, self.y_half = float(y_mid), float(y_half)

    def inputs(self, x, a=None):
        x = as_2d(x, self.bounds.shape[0])
        u = np.clip((x - self.bounds[:, 0]) / (self.bounds[:, 1] - self.bounds[:, 0]), 0.0, 1.0)
        if self.with_arm:
            a = np.broadcast_to(np.asarray(a, dtype=float), (u.shape[0],))
            u = np.column_stack([u, a])
        return u

    def raw(self, u):
        p = self.params
        return np.maximum(u @ p["W1"] + p["b1"], 0.0) @ p["w2"] + p["b2"]

    def __call__(self, x, a=None):
        s = self.raw(self.inputs(x, a))
        if self.link == "logistic":
            return expit(s)
        return self.y_mid + self.y_half * s

    def raw_range(self):
        """Interval bound of the pre-link output over the unit input box."""
        p = self.params
        w_pos, w_neg = np.maximum(p["W1"], 0), np.minimum(p["W1"], 0)
        h_lo = np.maximum(w_neg.sum(axis=0) + p["b1"], 0.0)
        h_hi = np.maximum(w_pos.sum(axis=0) + p["b1"], 0.0)
        v_pos, v_neg = np.maximum(p["w2"], 0), np.minimum(p["w2"], 0)
        lo = h_lo @ v_pos + h_hi @ v_neg + p["b2"]
        hi = h_hi @ v_pos + h_lo @ v_neg + p["b2"]
        return float(lo), float(hi)

    def abs_bound(self):
        lo, hi = self.raw_range()
        return max(abs(self.y_mid + self.y_half * lo), abs(self.y_mid + self.y_half * hi))

    def value_range(self):
        lo, hi = self.raw_range()
        return float(expit(lo)), float(expit(hi))

    def to_dict(self):
        return {"type": "mlp", "bounds": self.bounds.tolist(), "with_arm": self.with_arm,
                "link": self.link, "y_mid": self.y_mid, "y_half": self.y_half,
                "params": {k: np.asarray(v).tolist() for k, v in self.params.items()}}


def model_from_dict(d):
    t = d["type"]
    if t == "ridge_outcome":
        return RidgeOutcome(PolynomialBasis.from_dict(d["basis"]), d["theta"], d["y_mid"], d["y_half"])
    if t == "logistic_propensity":
        return LogisticPropensity(PolynomialBasis.from_dict(d["basis"]), d["theta"])
    if t == "mlp":
        return MLP(d["bounds"], d["params"], d["with_arm"], d["link"], d["y_mid"], d["y_half"])
    raise ValueError(f"unknown nuisance model type {t!r}")


@dataclass
class NuisancePair:
    """Fitted ``(mu, pi)``; ``pi`` is clipped to ``[kappa, 1 - kappa]``."""

    mu_model: Callable
    pi_model: Callable
    kappa: float = DEFAULT_KAPPA
    fit_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.kappa < 0.5:
            raise ValueError("kappa must lie in (0, 0.5)")

    def mu(self, x, a):
        return np.asarray(self.mu_model(x, a), dtype=float)

    def pi(self, x):
        return np.clip(np.asarray(self.pi_model(x), dtype=float), self.kappa, 1.0 - self.kappa)

    def outcome_abs_bound(self) -> Optional[float]:
        """Certified ``sup |mu|`` over the covariate box, if the model supports it."""
        f = getattr(self.mu_model, "abs_bound", None)
        return None if f is None else float(f())

    def propensity_range(self) -> tuple[float, float]:
        """Certified range of the clipped propensity over the covariate box."""
        lo, hi = self.kappa, 1.0 - self.kappa
        f = getattr(self.pi_model, "value_range", None)
        if f is not None:
            p_lo, p_hi = f()
            lo, hi = max(lo, min(p_lo, hi)), min(hi, max(p_hi, lo))
        return lo, hi

    def to_dict(self):
        for m in (self.mu_model, self.pi_model):
            if not hasattr(m, "to_dict"):
                raise TypeError("only fitted library models can be serialized")
        return {"mu": self.mu_model.to_dict(), "pi": self.pi_model.to_dict(),
                "kappa": self.kappa, "fit_meta": self.fit_meta}

    @classmethod
    def from_dict(cls, d):
        return cls(model_from_dict(d["mu"]), model_from_dict(d["pi"]), d["kappa"], d.get("fit_meta", {}))


# ------------------------------------------------------------------ convex fitting


def _check_arms(d: Dataset):
    if len(d) == 0:
        raise FitError("empty nuisance dataset")
    if d.a.min() == d.a.max():
        raise FitError("both treatment arms must be present")


def _outcome_scale(d: Dataset):
    lo, hi = d.outcome_bounds
    return (lo + hi) / 2.0, (hi - lo) / 2.0


def ridge_outcome_sensitivity(reg: float, n: int) -> tuple[float, float]:
    """``(lipschitz, l2_sensitivity)`` of the ridge outcome parameters.

    Targets are scaled into [-1, 1] and features have norm <= 1, so the exact
    minimizer satisfies ``||theta|| <= sqrt(2/reg)`` and the squared loss is
    ``L = 2 (sqrt(2/reg) + 1)``-Lipschitz on that ball. Replacing one of ``n``
    samples moves the minimizer by at most ``2 L / (n reg)``.
    """
    lip = 2.0 * (math.sqrt(2.0 / reg) + 1.0)
    return lip, 2.0 * lip / (n * reg)


def logistic_sensitivity(reg: float, n: int) -> tuple[float, float]:
    return 1.0, 2.0 / (n * reg)


def fit_ridge_outcome(d: Dataset, reg: float, degree: int = 2) -> RidgeOutcome:
    """Exact minimizer of ``mean((theta.z - y~)^2) + reg/2 ||theta||^2``."""
    if not reg > 0:
        raise ValueError("regularization must be > 0 (sensitivity is unbounded otherwise)")
    _check_arms(d)
    basis = PolynomialBasis(d.q, degree, d.covariate_bounds, unit_norm=True)
    mid, half = _outcome_scale(d)
    z = RidgeOutcome.design(basis, d.x, d.a)
    yt = (d.y - mid) / half
    n = len(d)
    gram = z.T @ z + 0.5 * n * reg * np.eye(z.shape[1])
    theta = np.linalg.solve(gram, z.T @ yt)
    return RidgeOutcome(basis, theta, mid, half)


def fit_logistic_propensity(d: Dataset, reg: float, degree: int = 2) -> LogisticPropensity:
    """Minimizer of mean logistic loss + reg/2 ||theta||^2 (tight L-BFGS)."""
    if not reg > 0:
        raise ValueError("regularization must be > 0 (sensitivity is unbounded otherwise)")
    if len(d) == 0:
        raise FitError("empty nuisance dataset")
    basis = PolynomialBasis(d.q, degree, d.covariate_bounds, unit_norm=True)
    psi = basis(d.x)
    s = 2.0 * d.a - 1.0
    n = len(d)

    def obj(theta):
        m = s * (psi @ theta)
        loss = np.logaddexp(0.0, -m).mean() + 0.5 * reg * theta @ theta
        grad = -(psi * (s * expit(-m))[:, None]).mean(axis=0) + reg * theta
        return loss, grad

    res = minimize(obj, np.zeros(psi.shape[1]), jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 5000})
    return LogisticPropensity(basis, res.x)


# ------------------------------------------------------------------- DP gradient descent


def per_sample_grad_norms(parts: dict) -> np.ndarray:
    """Euclidean norm of each row-wise per-sample gradient (parts share axis 0)."""
    sq = 0.0
    for g in parts.values():
        sq = sq + (g.reshape(g.shape[0], -1) ** 2).sum(axis=1)
    return np.sqrt(sq)


def clip_factors(norms: np.ndarray, clip: float) -> np.ndarray:
    return np.minimum(1.0, clip / np.maximum(norms, 1e-300))


def _mlp_init(n_in, width, rng):
    return {"W1": rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, width)),
            "b1": np.zeros(width),
            "w2": rng.normal(0.0, math.sqrt(1.0 / width), size=width),
            "b2": np.zeros(())}


def mlp_loss(params, u, target, link):
    """Per-sample losses (squared error, or logistic loss on 0/1 targets)."""
    out = np.maximum(u @ params["W1"] + params["b1"], 0.0) @ params["w2"] + params["b2"]
    if link == "logistic":
        return np.logaddexp(0.0, out) - target * out
    return (out - target) ** 2


def _backward(params, u, target, link):
    pre = u @ params["W1"] + params["b1"]
    hid = np.maximum(pre, 0.0)
    out = hid @ params["w2"] + params["b2"]
    g = expit(out) - target if link == "logistic" else 2.0 * (out - target)
    delta = g[:, None] * params["w2"][None, :] * (pre > 0)
    return g, delta, hid


def mlp_sample_grads(params, u, target, link) -> dict:
    """Explicit per-sample gradients, each with a leading sample axis."""
    g, delta, hid = _backward(params, u, target, link)
    return {"W1": u[:, :, None] * delta[:, None, :], "b1": delta, "w2": g[:, None] * hid, "b2": g}


def mlp_sample_grad_norms(params, u, target, link) -> np.ndarray:
    """Per-sample gradient norms without materializing the gradients."""
    return _norms(*_backward(params, u, target, link), u)


def _norms(g, delta, hid, u):
    # |grad W1|^2 = |u|^2 |delta|^2, |grad b1|^2 = |delta|^2, and likewise for the output layer
    return np.sqrt(g ** 2 * ((hid ** 2).sum(axis=1) + 1.0)
                   + (delta ** 2).sum(axis=1) * ((u ** 2).sum(axis=1) + 1.0))


def _train_mlp(u, target, link, hyper, noise_rng, budget: Optional[PrivacyBudget]):
    """Full-batch Adam on clipped, optionally noised, summed per-sample gradients.

    ``budget=None`` trains without clipping or noise.
    """
    n, n_in = u.shape
    steps, lr, clip = int(hyper["steps"]), float(hyper["lr"]), float(hyper["clip"])
    params = _mlp_init(n_in, int(hyper["width"]), np.random.default_rng(hyper["init_seed"]))
    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    sigma, step_budget = 0.0, None
    if budget is not None and not budget.is_infinite:
        step_budget = per_step_budget(budget, steps)
        # replacing one sample changes the clipped sum by at most 2 * clip
        sigma = gaussian_sigma(step_budget, 2.0 * clip)
    max_norm = 0.0
    for t in range(1, steps + 1):
        g, delta, hid = _backward(params, u, target, link)
        norms = _norms(g, delta, hid, u)
        c = clip_factors(norms, clip) if budget is not None else np.ones(n)
        max_norm = max(max_norm, float((c * norms).max()))
        cg, cd = c * g, c[:, None] * delta
        grads = {"W1": u.T @ cd, "b1": cd.sum(axis=0), "w2": hid.T @ cg, "b2": np.asarray(cg.sum())}
        for k in grads:
            if sigma > 0:
                grads[k] = grads[k] + noise_rng.normal(0.0, sigma, size=np.shape(grads[k]))
            grads[k] = grads[k] / n
            m_state[k] = 0.9 * m_state[k] + 0.1 * grads[k]
            v_state[k] = 0.999 * v_state[k] + 0.001 * grads[k] ** 2
            mh = m_state[k] / (1 - 0.9 ** t)
            vh = v_state[k] / (1 - 0.999 ** t)
            params[k] = params[k] - lr * mh / (np.sqrt(vh) + 1e-8)
    meta = {"steps": steps, "clip": clip if budget is not None else None,
            "noise_std_per_step": sigma, "max_clipped_norm": max_norm,
            "per_step_budget": None if step_budget is None else step_budget.to_dict()}
    if step_budget is not None:
        meta["accounted_budget"] = dp_composition_budget(step_budget, steps, budget.delta / 2.0).to_dict()
        if step_budget.epsilon > 1.0:
            logger.warning("per-step epsilon %.3g > 1: classical Gaussian calibration is loose there",
                           step_budget.epsilon)
    return params, meta


# ------------------------------------------------------------------- public fitting API


def fit_outcome_private(d_tilde: Dataset, budget: PrivacyBudget,
                        method: str = "param_output_perturbation", hyper=None, seed=None):
    """Outcome model whose parameters are ``budget``-DP; returns ``(model, meta)``."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    hyper = _hyper(hyper)
    _check_arms(d_tilde)
    rng = np.random.default_rng(seed)
    n = len(d_tilde)
    if method == "param_output_perturbation":
        reg = float(hyper["reg"])
        model = fit_ridge_outcome(d_tilde, reg, int(hyper["degree"]))
        lip, sens = ridge_outcome_sensitivity(reg, n)
        sigma = gaussian_sigma(budget, sens)
        if sigma > 0:
            model.theta = model.theta + rng.normal(0.0, sigma, size=model.theta.shape)
        meta = {"method": method, "reg": reg, "degree": int(hyper["degree"]), "lipschitz": lip,
                "sensitivity": sens, "noise_std": sigma, "budget": budget.to_dict()}
        return model, meta
    mid, half = _outcome_scale(d_tilde)
    probe = MLP(d_tilde.covariate_bounds, {}, True, "identity", mid, half)
    u = probe.inputs(d_tilde.x, d_tilde.a)
    params, tmeta = _train_mlp(u, (d_tilde.y - mid) / half, "identity", hyper, rng, budget)
    model = MLP(d_tilde.covariate_bounds, params, True, "identity", mid, half)
    return model, {"method": method, "budget": budget.to_dict(), **tmeta}


def fit_propensity_private(d_tilde: Dataset, budget: PrivacyBudget, kappa: float = DEFAULT_KAPPA,
                           method: str = "param_output_perturbation", hyper=None, seed=None):
    """Propensity model whose parameters are ``budget``-DP; returns ``(model, meta)``.

    Clipping to ``[kappa, 1 - kappa]`` happens in :class:`NuisancePair` and is
    post-processing.
    """
    if not 0.0 < kappa < 0.5:
        raise ValueError("kappa must lie in (0, 0.5)")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    hyper = _hyper(hyper)
    if len(d_tilde) == 0:
        raise FitError("empty nuisance dataset")
    rng = np.random.default_rng(seed)
    n = len(d_tilde)
    if method == "param_output_perturbation":
        reg = float(hyper["reg"])
        model = fit_logistic_propensity(d_tilde, reg, int(hyper["degree"]))
        lip, sens = logistic_sensitivity(reg, n)
        sigma = gaussian_sigma(budget, sens)
        if sigma > 0:
            model.theta = model.theta + rng.normal(0.0, sigma, size=model.theta.shape)
        meta = {"method": method, "reg": reg, "degree": int(hyper["degree"]), "lipschitz": lip,
                "sensitivity": sens, "noise_std": sigma, "budget": budget.to_dict()}
        return model, meta
    probe = MLP(d_tilde.covariate_bounds, {}, False, "logistic")
    u = probe.inputs(d_tilde.x)
    params, tmeta = _train_mlp(u, d_tilde.a.astype(float), "logistic", hyper, rng, budget)
    return MLP(d_tilde.covariate_bounds, params, False, "logistic"), {"method": method,
                                                                     "budget": budget.to_dict(), **tmeta}


def fit_nuisances_private(d_tilde: Dataset, total: PrivacyBudget, kappa: float = DEFAULT_KAPPA,
                          method: str = "param_output_perturbation", hyper=None, seed=None) -> NuisancePair:
    """Both nuisances at half of ``total`` each (sequential composition on ``d_tilde``)."""
    plan = BudgetPlan.from_total(total)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_mu, s_pi = ss.spawn(2)
    mu, mu_meta = fit_outcome_private(d_tilde, plan.stage1_mu, method, hyper, np.random.default_rng(s_mu))
    pi, pi_meta = fit_propensity_private(d_tilde, plan.stage1_pi, kappa, method, hyper,
                                         np.random.default_rng(s_pi))
    meta = {"method": method, "kappa": kappa, "plan": plan.to_dict(), "mu": mu_meta, "pi": pi_meta,
            "n": len(d_tilde)}
    return NuisancePair(mu, pi, kappa, meta)


def fit_nuisances_nonprivate(d_tilde: Dataset, kappa: float = DEFAULT_KAPPA, hyper=None) -> NuisancePair:
    """Same model classes without any noise or clipping; ``hyper["model"]`` picks
    ``"convex"`` (default) or ``"mlp"``."""
    if not 0.0 < kappa < 0.5:
        raise ValueError("kappa must lie in (0, 0.5)")
    hyper = _hyper(hyper)
    _check_arms(d_tilde)
    kind = hyper.get("model", "convex")
    if kind == "convex":
        mu = fit_ridge_outcome(d_tilde, float(hyper["reg"]), int(hyper["degree"]))
        pi = fit_logistic_propensity(d_tilde, float(hyper["reg"]), int(hyper["degree"]))
    elif kind == "mlp":
        mid, half = _outcome_scale(d_tilde)
        probe = MLP(d_tilde.covariate_bounds, {}, True, "identity", mid, half)
        p_mu, _ = _train_mlp(probe.inputs(d_tilde.x, d_tilde.a), (d_tilde.y - mid) / half,
                             "identity", hyper, None, None)
        mu = MLP(d_tilde.covariate_bounds, p_mu, True, "identity", mid, half)
        probe = MLP(d_tilde.covariate_bounds, {}, False, "logistic")
        p_pi, _ = _train_mlp(probe.inputs(d_tilde.x), d_tilde.a.astype(float), "logistic", hyper, None, None)
        pi = MLP(d_tilde.covariate_bounds, p_pi, False, "logistic")
    else:
        raise ValueError("hyper['model'] must be 'convex' or 'mlp'")
    return NuisancePair(mu, pi, kappa, {"method": "nonprivate", "model": kind, "kappa": kappa,
                                        "n": len(d_tilde)})


def nuisances_from_callables(mu, pi, kappa: float = DEFAULT_KAPPA, **meta) -> NuisancePair:
    """Wrap known functions (e.g. the true nuisances of a synthetic design)."""
    return NuisancePair(mu, pi, kappa, {"method": "callable", **meta})
