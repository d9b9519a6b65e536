"""Private release of a finite vector of CATE estimates.

The stage-2 estimate at the query points is perturbed with independent Gaussian
noise of scale ``gamma * c(eps, delta, n)``, where ``gamma`` is the supremum of
the influence-function norm over the data domain and
``c = 5 sqrt(2 ln(n) ln(2/delta)) / (eps n)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .basis import as_2d
from .data import Sample
from .privacy import PrivacyBudget
from .pseudo import LearnerKind, phi_from_parts, rho_weight_closed
from .secondstage import KrrModel, LinearBasisModel

logger = logging.getLogger(__name__)


@dataclass
class OptimizerOptions:
    """Settings of the multistart search for the gross-error sensitivity."""

    scan_points: int = 256
    starts: int = 8
    maxiter: int = 200
    inflate_on_failure: float = 1.10
    seed: int = 0


def calibration_c(eps: float, delta: float, n: int) -> float:
    """``5 sqrt(2 ln(n) ln(2/delta)) / (eps n)``; zero for infinite ``eps``."""
    if n < 2 or int(n) != n:
        raise ValueError("n must be an integer >= 2")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if math.isinf(eps):
        return 0.0
    return 5.0 * math.sqrt(2.0 * math.log(n) * math.log(2.0 / delta)) / (eps * n)


def noise_scale(gamma: float, budget: PrivacyBudget, n: int) -> float:
    return gamma * calibration_c(budget.epsilon, budget.delta, n)


class InfluenceEvaluator:
    """Influence vectors of a fitted stage-2 model at fixed query points.

    For a sample ``z = (a, x, y)`` the influence vector is
    ``h(queries, x) * rho(a, pi(x)) * (phi(z) - g(x)) + b`` where ``h`` is the
    resolvent kernel of the fitted estimator and ``b`` is a ``z``-independent
    shift coming from the ridge penalty (the derivative of the penalty term under
    a point-mass tilt). ``include_penalty_shift=False`` drops ``b``.
    """

    def __init__(self, model, queries, eta, kind, include_penalty_shift: bool = True):
        self.model = model
        self.kind = LearnerKind.parse(kind)
        self.eta = eta
        self.queries = as_2d(queries, model.q)
        self.include_penalty_shift = include_penalty_shift
        if isinstance(model, KrrModel):
            self._setup_krr()
        elif isinstance(model, LinearBasisModel):
            self._setup_linear()
        else:
            raise TypeError(f"unsupported stage-2 model {type(model).__name__}")

    def _setup_krr(self):
        m = self.model
        lam = m.lambda_reg
        kq = m.kernel(self.queries, m.train_x)                       # (d, n)
        # (d, n) matrix M with M k = K(queries, X) V u for (K V + lam) u = k
        self._m = m.resolvent_weights(kq.T).T
        self._kq = kq
        if self.include_penalty_shift:
            g_train = m.gram() @ m.alpha
            self.shift = -(m.predict(self.queries) - kq @ m.resolvent_weights(g_train))
        else:
            self.shift = np.zeros(self.queries.shape[0])
        self._lam = lam

    def _setup_linear(self):
        m = self.model
        psi_q = m.features(self.queries)                             # (d, p)
        self._a = 2.0 * m.hessian_solve(psi_q.T).T                   # (d, p)
        if self.include_penalty_shift and m.reg > 0:
            self.shift = -self._a @ (m.reg * m.theta)
        else:
            self.shift = np.zeros(self.queries.shape[0])

    def h(self, x) -> np.ndarray:
        """Resolvent kernel, shape ``(m, d)`` for ``m`` points ``x``."""
        x = as_2d(x, self.model.q)
        if isinstance(self.model, KrrModel):
            kx = self.model.kernel(x, self.model.train_x)            # (m, n)
            kqx = self.model.kernel(x, self.queries)                 # (m, d)
            return (kqx - kx @ self._m.T) / self._lam
        return self.model.features(x) @ self._a.T

    def weights_and_residuals(self, a, x, y):
        """``rho`` and ``phi - g(x)`` at points ``x`` for arm ``a``, outcome ``y``."""
        x = as_2d(x, self.model.q)
        m = x.shape[0]
        av = np.broadcast_to(np.asarray(a, dtype=float), (m,))
        pi = self.eta.pi(x)
        mu1 = self.eta.mu(x, np.ones(m))
        mu0 = self.eta.mu(x, np.zeros(m))
        mu_a = np.where(av == 1.0, mu1, mu0)
        phi = phi_from_parts(self.kind, av, np.broadcast_to(np.asarray(y, float), (m,)), pi, mu_a, mu1, mu0)
        rho = rho_weight_closed(self.kind, av, pi)
        return rho, phi - self.model.predict(x)

    def __call__(self, a, x, y) -> np.ndarray:
        """Influence vectors, shape ``(m, d)``."""
        rho, resid = self.weights_and_residuals(a, x, y)
        return self.h(x) * (rho * resid)[:, None] + self.shift[None, :]

    def norm_sq(self, a, x, y) -> np.ndarray:
        v = self(a, x, y)
        return np.einsum("ij,ij->i", v, v)


def influence_vector_krr(model: KrrModel, queries, z: Sample, eta, kind,
                         include_penalty_shift: bool = True) -> np.ndarray:
    return InfluenceEvaluator(model, queries, eta, kind, include_penalty_shift)(z.a, z.x, z.y)[0]


def influence_vector_parametric(model: LinearBasisModel, queries, z: Sample, eta, kind,
                                include_penalty_shift: bool = True) -> np.ndarray:
    return InfluenceEvaluator(model, queries, eta, kind, include_penalty_shift)(z.a, z.x, z.y)[0]


def tilt_derivative(model, queries, z: Sample, eta, kind, t: float = 1e-4) -> np.ndarray:
    """Central difference of the estimate when mass ``t`` is moved onto ``z``.

    Independent of :class:`InfluenceEvaluator`: refits the model on the data
    plus ``z`` with masses ``(1 - t)/n`` and ``t``.
    """
    kind = LearnerKind.parse(kind)
    zx = np.reshape(np.asarray(z.x, dtype=float), (1, -1))
    pi = eta.pi(zx)
    mu1, mu0 = eta.mu(zx, np.ones(1)), eta.mu(zx, np.zeros(1))
    mu_a = mu1 if z.a == 1 else mu0
    phi_z = phi_from_parts(kind, np.array([float(z.a)]), np.array([z.y]), pi, mu_a, mu1, mu0)
    rho_z = rho_weight_closed(kind, np.array([float(z.a)]), pi)
    x = np.vstack([model.train_x, zx])
    rho = np.concatenate([model.rho, rho_z])
    phi = np.concatenate([model.phi, phi_z])
    n = model.n

    def predict_tilted(tt):
        # dense direct solves, deliberately not sharing the fitting code
        v = np.concatenate([np.full(n, (1.0 - tt) / n), [tt]]) * rho
        if isinstance(model, KrrModel):
            gram = model.kernel(x, x)
            alpha = np.linalg.solve(v[:, None] * gram + model.lambda_reg * np.eye(n + 1), v * phi)
            return model.kernel(queries, x) @ alpha
        psi = model.basis(x)
        a_mat = psi.T @ (v[:, None] * psi) + model.reg * np.eye(psi.shape[1])
        theta = np.linalg.solve(a_mat, psi.T @ (v * phi))
        return model.basis(as_2d(queries, model.q)) @ theta

    return (predict_tilted(t) - predict_tilted(-t)) / (2.0 * t)


@dataclass
class SensitivityResult:
    gamma: float
    argmax: Sample
    trace: dict = field(default_factory=dict)


def gross_error_sensitivity(model, queries, domain, eta, kind, opts: Optional[OptimizerOptions] = None,
                            include_penalty_shift: bool = True) -> SensitivityResult:
    """Supremum of the influence-vector norm over ``{0,1} x X x Y``.

    The influence vector is affine in ``y`` for fixed ``(a, x)``, so the
    supremum in ``y`` sits at an endpoint of the outcome bounds. Each of the
    four ``(a, y)`` branches runs a quasi-random scan over the covariate box and
    L-BFGS-B from the best scan points. If any local run fails to converge the
    returned ``gamma`` is inflated by ``opts.inflate_on_failure``.
    """
    opts = opts or OptimizerOptions()
    ev = InfluenceEvaluator(model, queries, eta, kind, include_penalty_shift)
    cb = np.asarray(domain.covariate_bounds, dtype=float).reshape(-1, 2)
    y_lo, y_hi = (float(v) for v in domain.outcome_bounds)
    q = cb.shape[0]
    sob = qmc.Sobol(d=q, scramble=True, seed=opts.seed)
    m_pow = max(0, math.ceil(math.log2(max(opts.scan_points, 1))))
    scan = qmc.scale(sob.random_base2(m_pow), cb[:, 0], cb[:, 1]) if q > 0 else None
    scan = np.vstack([scan, cb.mean(axis=1)[None, :], cb[:, 0][None, :], cb[:, 1][None, :]])
    branches = []
    best = (-1.0, None)
    failed = False
    for a in (0, 1):
        for y in (y_lo, y_hi):
            vals = ev.norm_sq(a, scan, y)
            order = np.argsort(vals)[::-1][: opts.starts]
            b_best, b_x = float(vals[order[0]]), scan[order[0]].copy()
            runs = []
            for i in order:
                res = minimize(lambda u: -float(ev.norm_sq(a, u[None, :], y)[0]), scan[i],
                               method="L-BFGS-B", bounds=cb, options={"maxiter": opts.maxiter})
                val = -float(res.fun)
                runs.append({"start": scan[i].tolist(), "value": val, "success": bool(res.success),
                             "nit": int(res.nit)})
                if not res.success:
                    failed = True
                if val > b_best:
                    b_best, b_x = val, np.clip(res.x, cb[:, 0], cb[:, 1])
            branches.append({"a": a, "y": y, "best_norm": math.sqrt(max(b_best, 0.0)),
                             "x": b_x.tolist(), "runs": runs})
            if b_best > best[0]:
                best = (b_best, Sample(b_x, a, y))
    gamma = math.sqrt(max(best[0], 0.0))
    if failed:
        warnings.warn("sensitivity optimizer did not converge on every start; inflating gamma")
        gamma *= opts.inflate_on_failure
    trace = {"branches": branches, "non_converged": failed, "scan_points": int(scan.shape[0]),
             "starts": opts.starts, "inflated": failed,
             "penalty_shift_norm": float(np.linalg.norm(ev.shift))}
    return SensitivityResult(gamma, best[1], trace)


@dataclass
class FiniteReleaseReport:
    queries: np.ndarray
    raw_estimates: np.ndarray
    gamma: float
    c_const: float
    noise_scale: float
    private_estimates: np.ndarray
    budget: PrivacyBudget
    argmax_z: Sample
    optimizer_trace: dict
    seed: Optional[int] = None
    noise: Optional[np.ndarray] = None

    def to_dict(self, audit: bool = False) -> dict:
        """JSON-ready report; raw estimates (and the noise draw) only with ``audit``."""
        out = {
            "mechanism": "finite",
            "queries": self.queries.tolist(),
            "private_estimates": self.private_estimates.tolist(),
            "gamma": self.gamma,
            "c_const": self.c_const,
            "noise_scale": self.noise_scale,
            "budget": self.budget.to_dict(),
            "seed": self.seed,
            "argmax_z": {"a": int(self.argmax_z.a), "x": np.asarray(self.argmax_z.x).tolist(),
                         "y": float(self.argmax_z.y)},
            "optimizer": {k: v for k, v in self.optimizer_trace.items() if k != "branches"},
        }
        if audit:
            out["AUDIT_WARNING"] = ("raw estimates are included: this report is NOT differentially "
                                    "private and must not leave the trusted environment")
            out["raw_estimates"] = self.raw_estimates.tolist()
            out["noise_std_normal"] = None if self.noise is None else self.noise.tolist()
        return out


def release_finite(model, queries, eta, budget: PrivacyBudget, domain, kind, rng_seed=None,
                   opts: Optional[OptimizerOptions] = None,
                   include_penalty_shift: bool = True,
                   sensitivity: Optional[SensitivityResult] = None) -> FiniteReleaseReport:
    """Raw stage-2 estimates at ``queries`` plus ``gamma * c * N(0, I)`` noise.

    Each call draws fresh noise. Releasing the same queries twice under one
    budget is not covered by the guarantee; use the ledger to prevent that.
    ``sensitivity`` may carry a result already computed for the same model,
    queries and domain.
    """
    queries = as_2d(queries, model.q)
    raw = np.asarray(model.predict(queries), dtype=float)
    sens = sensitivity or gross_error_sensitivity(model, queries, domain, eta, kind, opts, include_penalty_shift)
    c = calibration_c(budget.epsilon, budget.delta, model.n)
    scale = sens.gamma * c
    u = np.random.default_rng(rng_seed).standard_normal(queries.shape[0])
    private = raw + scale * u if scale > 0 else raw.copy()
    return FiniteReleaseReport(queries, raw, sens.gamma, c, scale, private, budget, sens.argmax,
                               sens.trace, rng_seed if isinstance(rng_seed, int) else None, u)
