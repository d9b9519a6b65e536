"""Orthogonal weights and pseudo-outcomes for the R- and DR-learners.

For a weight function ``lam(pi)`` the stage-2 risk weights each sample by
``rho = (a - pi) lam'(pi) + lam(pi)`` and regresses the pseudo-outcome
``phi = lam(pi) / rho * (a - pi) / (pi (1 - pi)) * (y - mu(x, a)) + mu(x, 1) - mu(x, 0)``.
Propensity clipping is done by the nuisance pair; here ``pi`` is trusted.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, Sample


class LearnerKind(str, enum.Enum):
    R = "R"
    DR = "DR"

    @classmethod
    def parse(cls, kind) -> "LearnerKind":
        if isinstance(kind, cls):
            return kind
        try:
            return cls(str(kind).upper())
        except ValueError:
            raise ValueError(f"learner kind must be 'R' or 'DR', got {kind!r}") from None

    def lam(self, pi):
        pi = np.asarray(pi, dtype=float)
        return pi * (1.0 - pi) if self is LearnerKind.R else np.ones_like(pi)

    def lam_prime(self, pi):
        pi = np.asarray(pi, dtype=float)
        return 1.0 - 2.0 * pi if self is LearnerKind.R else np.zeros_like(pi)


@dataclass(frozen=True)
class WeightedTarget:
    x: np.ndarray
    rho: float
    phi: float


def _check_pi(pi, kappa: Optional[float]):
    pi = np.asarray(pi, dtype=float)
    lo, hi = (0.0, 1.0) if kappa is None else (kappa, 1.0 - kappa)
    tol = 0.0 if kappa is None else 1e-12
    bad = ~np.isfinite(pi) | (pi < lo - tol) | (pi > hi + tol)
    if kappa is None:
        bad |= (pi == 0.0) | (pi == 1.0)
    if np.any(bad):
        raise ValueError(f"propensity outside [{lo}, {hi}]: {pi[bad].ravel()[:3]}")
    return pi


def _check_a(a):
    a = np.asarray(a, dtype=float)
    if np.any((a != 0.0) & (a != 1.0)):
        raise ValueError("treatment must be 0 or 1")
    return a


def rho_weight(kind, a, pi_x, kappa: Optional[float] = None):
    """``(a - pi) lam'(pi) + lam(pi)``; vectorized over ``a`` and ``pi_x``.

    Computed through the general expression, which for ``R`` equals
    ``(a - pi)^2`` and for ``DR`` equals 1.
    """
    kind = LearnerKind.parse(kind)
    a = _check_a(a)
    pi = _check_pi(pi_x, kappa)
    out = (a - pi) * kind.lam_prime(pi) + kind.lam(pi)
    return float(out) if np.ndim(out) == 0 else out


def rho_weight_closed(kind, a, pi_x):
    kind = LearnerKind.parse(kind)
    a, pi = np.asarray(a, dtype=float), np.asarray(pi_x, dtype=float)
    return (a - pi) ** 2 if kind is LearnerKind.R else np.ones(np.broadcast(a, pi).shape)


def rho_sup(kind, kappa: float) -> float:
    """``sup rho`` over ``{0, 1} x [kappa, 1 - kappa]``."""
    kind = LearnerKind.parse(kind)
    return (1.0 - kappa) ** 2 if kind is LearnerKind.R else 1.0


def phi_from_parts(kind, a, y, pi, mu_a, mu1, mu0):
    """Pseudo-outcome from already evaluated nuisances (vectorized)."""
    kind = LearnerKind.parse(kind)
    a, y, pi = np.asarray(a, float), np.asarray(y, float), np.asarray(pi, float)
    resid = y - np.asarray(mu_a, float)
    contrast = np.asarray(mu1, float) - np.asarray(mu0, float)
    if kind is LearnerKind.R:
        return resid / (a - pi) + contrast
    return (a - pi) / (pi * (1.0 - pi)) * resid + contrast


def phi_generic(kind, a, y, pi, mu_a, mu1, mu0):
    """The general weighted quotient, kept for comparison with the reduced forms."""
    kind = LearnerKind.parse(kind)
    a, y, pi = np.asarray(a, float), np.asarray(y, float), np.asarray(pi, float)
    rho = (a - pi) * kind.lam_prime(pi) + kind.lam(pi)
    return (kind.lam(pi) / rho) * ((a - pi) / (pi * (1.0 - pi))) * (y - np.asarray(mu_a, float)) \
        + np.asarray(mu1, float) - np.asarray(mu0, float)


def _eval_eta(eta, x, a):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pi = eta.pi(x)
    mu1 = eta.mu(x, np.ones(x.shape[0]))
    mu0 = eta.mu(x, np.zeros(x.shape[0]))
    mu_a = np.where(np.asarray(a, float) == 1.0, mu1, mu0)
    return pi, mu_a, mu1, mu0


def pseudo_outcome(kind, z: Sample, eta) -> float:
    a = _check_a(z.a)
    pi, mu_a, mu1, mu0 = _eval_eta(eta, np.reshape(z.x, (1, -1)), np.atleast_1d(a))
    _check_pi(pi, eta.kappa)
    return float(phi_from_parts(kind, a, z.y, pi, mu_a, mu1, mu0)[0])


def targets_arrays(d: Dataset, eta, kind) -> tuple[np.ndarray, np.ndarray]:
    """``(rho, phi)`` arrays aligned with the samples of ``d``."""
    if len(d) == 0:
        raise ValueError("dataset is empty")
    pi, mu_a, mu1, mu0 = _eval_eta(eta, d.x, d.a)
    rho = np.asarray(rho_weight(kind, d.a, pi, eta.kappa), dtype=float).reshape(-1)
    phi = phi_from_parts(kind, d.a, d.y, pi, mu_a, mu1, mu0)
    return rho, phi


def build_targets(d: Dataset, eta, kind) -> list[WeightedTarget]:
    rho, phi = targets_arrays(d, eta, kind)
    return [WeightedTarget(d.x[i].copy(), float(rho[i]), float(phi[i])) for i in range(len(d))]


def stack_targets(targets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(X, rho, phi)`` arrays from a list of :class:`WeightedTarget`."""
    targets = list(targets)
    if not targets:
        raise ValueError("no targets")
    x = np.vstack([np.atleast_1d(t.x) for t in targets]).astype(float)
    rho = np.array([t.rho for t in targets], dtype=float)
    phi = np.array([t.phi for t in targets], dtype=float)
    return x, rho, phi
