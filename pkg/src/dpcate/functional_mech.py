"""Private release of the whole stage-2 function via Gaussian-process noise.

The kernel ridge fit ``g`` is released as ``g + r * U`` with ``U`` a centred
Gaussian process whose covariance is the regression kernel. Batch queries draw
``U`` jointly; the iterative sampler draws one coordinate at a time from the
conditional law given the noise values already handed out, so any sequence of
answers has the same joint law as one batch release.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .basis import as_2d
from .privacy import PrivacyBudget
from .pseudo import LearnerKind, rho_sup
from .secondstage import KernelSpec, KrrModel, NumericError

REFACTOR_EVERY = 64
JITTER_REL = 1e-9
JITTER_STEPS = 3


def rkhs_sensitivity_bound(sup_w: float, L: float, lambda_reg: float, n: int, kernel: KernelSpec) -> float:
    """``sup_w * L / (lambda n) * (sqrt(2 pi) h)^-q``: RKHS-norm change of the
    fit when one of ``n`` samples is replaced."""
    for name, v in (("sup_w", sup_w), ("L", L), ("lambda_reg", lambda_reg), ("n", n)):
        if not v > 0:
            raise ValueError(f"{name} must be > 0")
    if kernel.dim < 1:
        raise ValueError("kernel dimension must be >= 1")
    return sup_w * L / (lambda_reg * n) * kernel.peak


@dataclass(frozen=True)
class FunctionalCalibration:
    sup_rho: float
    lipschitz_L: float
    lambda_reg: float
    n: int
    kernel: KernelSpec
    budget: PrivacyBudget
    r_factor: float
    kind: str = "DR"
    kappa: Optional[float] = None

    def to_dict(self):
        return {"sup_rho": self.sup_rho, "lipschitz_L": self.lipschitz_L, "lambda_reg": self.lambda_reg,
                "n": self.n, "kernel": self.kernel.to_dict(), "budget": self.budget.to_dict(),
                "r_factor": self.r_factor, "kind": self.kind, "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d):
        return cls(d["sup_rho"], d["lipschitz_L"], d["lambda_reg"], int(d["n"]),
                   KernelSpec.from_dict(d["kernel"]), PrivacyBudget.from_dict(d["budget"]),
                   d["r_factor"], d.get("kind", "DR"), d.get("kappa"))


def r_formula(sup_rho, L, lambda_reg, n, kernel: KernelSpec, budget: PrivacyBudget) -> float:
    if budget.is_infinite:
        return 0.0
    return (sup_rho * 4.0 * L * math.sqrt(2.0 * math.log(2.0 / budget.delta))
            * kernel.peak / (lambda_reg * n * budget.epsilon))


def calibration_r(kind, kappa: float, L: float, lambda_reg: float, n: int, kernel: KernelSpec,
                  budget: PrivacyBudget) -> FunctionalCalibration:
    """Noise multiplier ``r`` for a kernel ridge fit on ``n`` samples."""
    kind = LearnerKind.parse(kind)
    if not 0.0 < kappa < 0.5:
        raise ValueError("kappa must lie in (0, 0.5)")
    if not (L > 0 and lambda_reg > 0 and n >= 1):
        raise ValueError("L, lambda_reg and n must be positive")
    s = rho_sup(kind, kappa)
    r = r_formula(s, L, lambda_reg, n, kernel, budget)
    return FunctionalCalibration(s, float(L), float(lambda_reg), int(n), kernel, budget, r, kind.value, kappa)


def lipschitz_bound(eta, outcome_bounds, kind, lambda_reg: float, kernel: KernelSpec) -> dict:
    """Lipschitz constant of ``g -> (phi - g)^2`` over the reachable range.

    ``L = 2 (sup|phi| + sup|g|)``. ``sup|phi|`` follows from the outcome bounds,
    a certified bound on ``|mu|`` and the smallest value of ``min(pi, 1 - pi)``
    over the covariate box; ``sup|g| <= sqrt(K(x, x)) |g|_H`` with
    ``|g|_H^2 <= sup(rho phi^2) / lambda`` because ``g = 0`` is feasible.
    Only the (already private) nuisances and the declared domain are used.
    """
    kind = LearnerKind.parse(kind)
    y_max = float(np.max(np.abs(outcome_bounds)))
    m_max = eta.outcome_abs_bound()
    if m_max is None:
        raise ValueError("nuisance outcome model has no certified bound; pass L explicitly")
    p_lo, p_hi = eta.propensity_range()
    p_min = min(p_lo, 1.0 - p_hi)
    phi_max = (y_max + m_max) / p_min + 2.0 * m_max
    if kind is LearnerKind.R:
        rho_phi_sq = (y_max + m_max + (1.0 - p_min) * 2.0 * m_max) ** 2
    else:
        rho_phi_sq = phi_max ** 2
    g_max = math.sqrt(rho_phi_sq / lambda_reg) * math.sqrt(kernel.peak)
    return {"L": 2.0 * (phi_max + g_max), "phi_max": phi_max, "g_max": g_max,
            "outcome_abs_bound": m_max, "p_min": p_min, "y_max": y_max}


def _jittered_cholesky(cov, jitter):
    j = jitter
    for _ in range(JITTER_STEPS + 1):
        try:
            return cholesky(cov + j * np.eye(cov.shape[0]), lower=True), j
        except np.linalg.LinAlgError:
            j *= 10.0
    raise NumericError("covariance factorization failed after jitter escalation")


def default_jitter(kernel: KernelSpec) -> float:
    return JITTER_REL * kernel.peak


def sample_gp_batch(kernel: KernelSpec, queries, rng_seed=None, jitter: Optional[float] = None) -> np.ndarray:
    """One draw of ``N(0, K(queries, queries) + jitter I)``."""
    x = as_2d(queries, kernel.dim)
    if x.shape[0] < 1:
        raise ValueError("need at least one query")
    jitter = default_jitter(kernel) if jitter is None else jitter
    chol, _ = _jittered_cholesky(kernel(x, x), jitter)
    return chol @ np.random.default_rng(rng_seed).standard_normal(x.shape[0])


def _check_calibration(model: KrrModel, cal: FunctionalCalibration):
    if cal.n != model.n or not math.isclose(cal.lambda_reg, model.lambda_reg, rel_tol=1e-12) \
            or cal.kernel != model.kernel:
        raise ValueError("calibration does not match the model (n, lambda_reg or kernel differ)")


def release_function_batch(model: KrrModel, queries, calibration: FunctionalCalibration, rng_seed=None,
                           jitter: Optional[float] = None) -> np.ndarray:
    _check_calibration(model, calibration)
    x = as_2d(queries, model.q)
    raw = model.predict(x)
    if calibration.r_factor == 0.0:
        return raw
    return raw + calibration.r_factor * sample_gp_batch(model.kernel, x, rng_seed, jitter)


@dataclass
class GpNoiseState:
    """Sequential sampler state.

    ``past_values`` holds the realized noise path ``U(x_i)`` (or, in
    ``"literal"`` mode, the returned outputs themselves). ``chol`` is the
    lower Cholesky factor of ``K(past, past) + jitter I`` and ``beta`` is
    ``chol^-1 past_values``.
    """

    model: KrrModel
    calibration: FunctionalCalibration
    seed: int = 0
    jitter: float = 0.0
    mode: str = "noise_path"
    past_queries: list = field(default_factory=list)
    past_values: list = field(default_factory=list)
    chol: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    since_refactor: int = 0
    last_conditional: Optional[dict] = None

    @property
    def count(self) -> int:
        return len(self.past_queries)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "jitter": self.jitter, "mode": self.mode,
                "calibration": self.calibration.to_dict(),
                "past_queries": [list(map(float, q)) for q in self.past_queries],
                "past_values": [float(v) for v in self.past_values],
                "chol": self.chol.tolist(), "beta": self.beta.tolist(),
                "since_refactor": self.since_refactor}

    @classmethod
    def from_dict(cls, d, model: KrrModel) -> "GpNoiseState":
        cal = FunctionalCalibration.from_dict(d["calibration"])
        _check_calibration(model, cal)
        k = len(d["past_queries"])
        return cls(model, cal, int(d["seed"]), float(d["jitter"]), d["mode"],
                   [np.asarray(q, dtype=float) for q in d["past_queries"]], list(d["past_values"]),
                   np.asarray(d["chol"], dtype=float).reshape(k, k), np.asarray(d["beta"], dtype=float),
                   int(d["since_refactor"]))


def iterative_init(model: KrrModel, calibration: FunctionalCalibration, seed: int = 0,
                   jitter: Optional[float] = None, mode: str = "noise_path") -> GpNoiseState:
    """Empty sampler. ``mode="literal"`` conditions on past outputs and returns the
    posterior draw itself (kept for comparison only; it is not the private mechanism)."""
    if mode not in ("noise_path", "literal"):
        raise ValueError("mode must be 'noise_path' or 'literal'")
    _check_calibration(model, calibration)
    jitter = default_jitter(model.kernel) if jitter is None else float(jitter)
    return GpNoiseState(model, calibration, int(seed), jitter, mode)


def _refactor(state: GpNoiseState):
    x = np.vstack(state.past_queries)
    chol, j = _jittered_cholesky(state.model.kernel(x, x), state.jitter)
    state.jitter = j
    state.chol = chol
    state.beta = solve_triangular(chol, np.asarray(state.past_values, dtype=float), lower=True)
    state.since_refactor = 0


def query_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def iterative_query(state: GpNoiseState, x, rng_seed=None) -> tuple[float, GpNoiseState]:
    """Answer one query and extend ``state`` in place (also returned).

    The noise value is drawn from its Gaussian conditional given the noise
    values already released. ``rng_seed`` defaults to a stream derived from the
    state seed and the query index, which makes checkpoint/resume reproducible.
    """
    kernel = state.model.kernel
    x = as_2d(x, kernel.dim)
    if x.shape[0] != 1:
        raise ValueError("iterative queries take a single point")
    rng = query_rng(state.seed, state.count) if rng_seed is None else np.random.default_rng(rng_seed)
    prior_var = float(kernel.peak) + state.jitter
    if state.count:
        past = np.vstack(state.past_queries)
        kvec = kernel(past, x)[:, 0]
        w = solve_triangular(state.chol, kvec, lower=True)
        mean = float(w @ state.beta)
        var = prior_var - float(w @ w)
        coef = solve_triangular(state.chol.T, w, lower=False)
    else:
        w = np.zeros(0)
        mean, var, coef = 0.0, prior_var, np.zeros(0)
    if var < -1e-8 * kernel.peak:
        raise NumericError(f"negative conditional variance {var:.3e}")
    var = max(var, 0.0)
    xi = float(rng.standard_normal())
    r = state.calibration.r_factor
    raw = float(state.model.predict(x)[0])
    if state.mode == "literal" and state.count:
        value = mean + math.sqrt(var) * xi
        estimate = value
    else:
        u = mean + math.sqrt(var) * xi
        if state.mode == "literal":
            value = raw + r * u
            estimate = value
        else:
            value = u
            estimate = raw + r * u
    diag = math.sqrt(max(var, 1e-300))
    k = state.count
    new = np.zeros((k + 1, k + 1))
    new[:k, :k] = state.chol
    new[k, :k] = w
    new[k, k] = diag
    state.chol = new
    state.beta = np.append(state.beta, (value - mean) / diag)
    state.past_queries.append(x[0].copy())
    state.past_values.append(value)
    state.since_refactor += 1
    state.last_conditional = {"coef": coef, "mean": mean, "var": var}
    if state.since_refactor >= REFACTOR_EVERY:
        _refactor(state)
    return estimate, state


def joint_from_conditionals(coefs, variances) -> np.ndarray:
    """Covariance implied by sequential conditionals ``U_i = b_i . U_<i + D_i e_i``."""
    k = len(variances)
    b = np.zeros((k, k))
    for i, c in enumerate(coefs):
        b[i, :i] = c
    inv = np.linalg.inv(np.eye(k) - b)
    return inv @ np.diag(variances) @ inv.T
