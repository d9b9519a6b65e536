"""Stage 2: weighted regression of pseudo-outcomes on covariates.

Both regressors minimize ``sum_i v_i rho_i (phi_i - g(X_i))^2 + penalty(g)``
where ``v_i`` is the sample mass (``1/n`` for an ordinary fit). Non-uniform
masses are only used to tilt a fit toward one point when checking influence
functions numerically.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .basis import PolynomialBasis, as_2d
from .pseudo import stack_targets

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Normalized Gaussian kernel ``(sqrt(2 pi) h)^-q exp(-|x - x'|^2 / (2 h^2))``."""

    bandwidth: float
    dim: int

    def __post_init__(self):
        if not self.bandwidth > 0 or not math.isfinite(self.bandwidth):
            raise ValueError("bandwidth must be a positive finite number")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def peak(self) -> float:
        """``K(x, x)``, the largest value the kernel takes."""
        return (math.sqrt(2.0 * math.pi) * self.bandwidth) ** (-self.dim)

    def __call__(self, a, b) -> np.ndarray:
        a, b = as_2d(a, self.dim), as_2d(b, self.dim)
        sq = cdist(a, b, "sqeuclidean")
        return self.peak * np.exp(-sq / (2.0 * self.bandwidth ** 2))

    def to_dict(self):
        return {"bandwidth": self.bandwidth, "dim": self.dim}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["bandwidth"]), int(d["dim"]))


def median_bandwidth(x) -> float:
    """Median pairwise distance. Data dependent, hence not private."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] < 2:
        raise ValueError("need at least two points")
    return float(np.median(pdist(x)))


class _SpdSystem:
    """Factorization of ``V^1/2 K V^1/2 + lam I`` for solves with ``V K + lam I``."""

    def __init__(self, gram, v, lam):
        self.sv = np.sqrt(v)
        s = self.sv[:, None] * gram * self.sv[None, :]
        s[np.diag_indices_from(s)] += lam
        self.s = s
        try:
            self.cho = cho_factor(s, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"kernel system is not positive definite: {exc}") from exc

    def solve(self, rhs):
        sol = cho_solve(self.cho, rhs)
        # one pass of iterative refinement
        return sol + cho_solve(self.cho, rhs - self.s @ sol)


def _fit_krr_core(x, v, phi, kernel: KernelSpec, lam: float):
    gram = kernel(x, x)
    system = _SpdSystem(gram, v, lam)
    alpha = system.sv * system.solve(system.sv * phi)
    rhs = v * phi
    scale = np.linalg.norm(rhs)
    if scale > 0:
        resid = np.linalg.norm(v * (gram @ alpha) + lam * alpha - rhs) / scale
        if resid > 1e-6:
            raise NumericError(f"kernel ridge solve residual {resid:.2e} too large")
        if resid > RESIDUAL_TOL:
            warnings.warn(f"kernel ridge solve residual {resid:.2e} exceeds {RESIDUAL_TOL}")
    return alpha, gram, system


class KrrModel:
    """Weighted kernel ridge regression ``g(x) = sum_i alpha_i K(x, X_i)``."""

    def __init__(self, train_x, alpha, lambda_reg, kernel: KernelSpec, rho, phi, mass=None):
        self.train_x = np.asarray(train_x, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float)
        self.lambda_reg = float(lambda_reg)
        self.kernel = kernel
        self.rho = np.asarray(rho, dtype=float)
        self.phi = np.asarray(phi, dtype=float)
        n = self.train_x.shape[0]
        self.mass = np.full(n, 1.0 / n) if mass is None else np.asarray(mass, dtype=float)
        self._gram = None
        self._system = None

    @property
    def n(self) -> int:
        return self.train_x.shape[0]

    @property
    def q(self) -> int:
        return self.kernel.dim

    @property
    def v(self):
        return self.mass * self.rho

    def predict(self, x_query):
        x = as_2d(x_query, self.q)
        return self.kernel(x, self.train_x) @ self.alpha

    __call__ = predict

    def system(self) -> _SpdSystem:
        if self._system is None:
            self._gram = self.kernel(self.train_x, self.train_x)
            self._system = _SpdSystem(self._gram, self.v, self.lambda_reg)
        return self._system

    def gram(self):
        self.system()
        return self._gram

    def normal_residual(self) -> float:
        """``|(V K + lam I) alpha - V phi| / |V phi|`` with ``V = diag(mass * rho)``."""
        v = self.v
        rhs = v * self.phi
        lhs = v * (self.gram() @ self.alpha) + self.lambda_reg * self.alpha
        scale = np.linalg.norm(rhs)
        return float(np.linalg.norm(lhs - rhs) / scale) if scale > 0 else float(np.linalg.norm(lhs))

    def resolvent_weights(self, f_train) -> np.ndarray:
        """``V f`` where ``(K V + lam I) f = f_train`` (columnwise)."""
        sys_ = self.system()
        f_train = np.asarray(f_train, dtype=float)
        sv = sys_.sv if f_train.ndim == 1 else sys_.sv[:, None]
        return sv * sys_.solve(sv * f_train)

    def rkhs_norm(self) -> float:
        return float(math.sqrt(max(self.alpha @ self.gram() @ self.alpha, 0.0)))

    def to_dict(self):
        return {"type": "krr", "train_x": self.train_x.tolist(), "alpha": self.alpha.tolist(),
                "lambda_reg": self.lambda_reg, "kernel": self.kernel.to_dict(),
                "rho": self.rho.tolist(), "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["train_x"], d["alpha"], d["lambda_reg"], KernelSpec.from_dict(d["kernel"]),
                   d["rho"], d["phi"])


def fit_krr_arrays(x, rho, phi, kernel: KernelSpec, lambda_reg: float, mass=None) -> KrrModel:
    x = as_2d(x, kernel.dim)
    rho, phi = np.asarray(rho, dtype=float), np.asarray(phi, dtype=float)
    n = x.shape[0]
    if n < 1:
        raise ValueError("need at least one target")
    if not lambda_reg > 0:
        raise ValueError("lambda_reg must be > 0")
    if rho.shape != (n,) or phi.shape != (n,):
        raise ValueError("rho and phi must have one entry per sample")
    if np.any(rho < 0):
        raise ValueError("weights must be nonnegative")
    mass = np.full(n, 1.0 / n) if mass is None else np.asarray(mass, dtype=float)
    alpha, gram, system = _fit_krr_core(x, mass * rho, phi, kernel, lambda_reg)
    model = KrrModel(x, alpha, lambda_reg, kernel, rho, phi, mass)
    model._gram, model._system = gram, system
    return model


def fit_krr(targets, kernel: KernelSpec, lambda_reg: float) -> KrrModel:
    """Solve ``(W K + n lam I) alpha = W phi`` with ``W = diag(rho)``."""
    x, rho, phi = stack_targets(targets)
    return fit_krr_arrays(x, rho, phi, kernel, lambda_reg)


def default_basis(q: int, bounds=None, degree: int = 2) -> PolynomialBasis:
    return PolynomialBasis(q, degree, bounds)


class LinearBasisModel:
    """``g(x) = theta . psi(x)`` fitted by weighted ridge least squares."""

    def __init__(self, basis, theta, hessian, reg, alpha_damp, rho, phi, train_x, mass=None):
        self.basis = basis
        self.theta = np.asarray(theta, dtype=float)
        self.hessian = np.asarray(hessian, dtype=float)
        self.reg = float(reg)
        self.alpha_damp = float(alpha_damp)
        self.rho = np.asarray(rho, dtype=float)
        self.phi = np.asarray(phi, dtype=float)
        self.train_x = np.asarray(train_x, dtype=float)
        n = self.train_x.shape[0]
        self.mass = np.full(n, 1.0 / n) if mass is None else np.asarray(mass, dtype=float)
        self._hcho = None

    @property
    def n(self):
        return self.train_x.shape[0]

    @property
    def q(self):
        return self.train_x.shape[1]

    def features(self, x):
        return self.basis(as_2d(x, self.q))

    def predict(self, x_query):
        return self.features(x_query) @ self.theta

    __call__ = predict

    def hessian_solve(self, rhs):
        if self._hcho is None:
            try:
                self._hcho = cho_factor(self.hessian, lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericError("hessian is singular; use alpha_damp > 0") from exc
        return cho_solve(self._hcho, rhs)

    def to_dict(self):
        if not hasattr(self.basis, "to_dict"):
            raise TypeError("basis is not serializable")
        return {"type": "linear_basis", "basis": self.basis.to_dict(), "theta": self.theta.tolist(),
                "hessian": self.hessian.tolist(), "reg": self.reg, "alpha_damp": self.alpha_damp,
                "rho": self.rho.tolist(), "phi": self.phi.tolist(), "train_x": self.train_x.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(PolynomialBasis.from_dict(d["basis"]), d["theta"], d["hessian"], d["reg"],
                   d["alpha_damp"], d["rho"], d["phi"], d["train_x"])


def fit_linear_basis_arrays(x, rho, phi, basis=None, reg: float = 0.0, alpha_damp: float = 0.0,
                            mass=None) -> LinearBasisModel:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rho, phi = np.asarray(rho, dtype=float), np.asarray(phi, dtype=float)
    n = x.shape[0]
    if reg < 0 or alpha_damp < 0:
        raise ValueError("reg and alpha_damp must be nonnegative")
    if basis is None:
        basis = default_basis(x.shape[1])
    psi = basis(x)
    p = psi.shape[1]
    if n < p:
        warnings.warn(f"fewer samples ({n}) than basis functions ({p})")
    mass = np.full(n, 1.0 / n) if mass is None else np.asarray(mass, dtype=float)
    v = mass * rho
    gram = psi.T @ (v[:, None] * psi)
    a = gram + reg * np.eye(p)
    b = psi.T @ (v * phi)
    hess = 2.0 * a + alpha_damp * np.eye(p)
    hess = 0.5 * (hess + hess.T)
    min_eig = float(np.linalg.eigvalsh(hess).min())
    tol = 1e-12 * max(1.0, float(np.abs(hess).max()))
    if min_eig <= tol:
        if alpha_damp == 0.0:
            raise NumericError("rank-deficient design with reg=0; pass alpha_damp > 0 (damping)")
        theta = np.linalg.lstsq(a, b, rcond=None)[0]
    else:
        try:
            theta = np.linalg.solve(a, b) if np.linalg.eigvalsh(a).min() > tol else \
                np.linalg.lstsq(a, b, rcond=None)[0]
        except np.linalg.LinAlgError as exc:
            raise NumericError(str(exc)) from exc
    if np.linalg.eigvalsh(hess).min() <= 0:
        raise NumericError("hessian not positive definite after damping")
    return LinearBasisModel(basis, theta, hess, reg, alpha_damp, rho, phi, x, mass)


def fit_linear_basis(targets, basis=None, reg: float = 0.0, alpha_damp: float = 0.0) -> LinearBasisModel:
    """Minimize ``(1/n) sum rho (phi - theta . psi)^2 + reg |theta|^2``.

    The stored Hessian is ``(2/n) Psi' W Psi + 2 reg I + alpha_damp I``.
    """
    x, rho, phi = stack_targets(targets)
    return fit_linear_basis_arrays(x, rho, phi, basis, reg, alpha_damp)


def predict(model, x_query):
    return model.predict(x_query)


def refit_with_mass(model, mass):
    """Same data and hyperparameters, different sample masses."""
    if isinstance(model, KrrModel):
        return fit_krr_arrays(model.train_x, model.rho, model.phi, model.kernel, model.lambda_reg, mass)
    return fit_linear_basis_arrays(model.train_x, model.rho, model.phi, model.basis, model.reg,
                                   model.alpha_damp, mass)


def model_from_dict(d):
    if d["type"] == "krr":
        return KrrModel.from_dict(d)
    if d["type"] == "linear_basis":
        return LinearBasisModel.from_dict(d)
    raise ValueError(f"unknown stage-2 model type {d['type']!r}")
