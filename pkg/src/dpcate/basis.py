"""Polynomial feature maps on a box."""

from __future__ import annotations

import itertools
import math
from typing import Optional

import numpy as np


class PolynomialBasis:
    """All monomials of total degree <= ``degree`` (constant included).

    With ``bounds`` given, inputs are first mapped affinely onto ``[0, 1]^q``
    (and clipped there). With ``unit_norm=True`` every feature is divided by
    ``sqrt(n_features)`` so that ``||psi(x)||_2 <= 1`` on the box, which is what
    the output-perturbation sensitivity bounds rely on.
    """

    def __init__(self, dim: int, degree: int = 2, bounds=None, unit_norm: bool = False):
        if dim < 1 or degree < 0:
            raise ValueError("need dim >= 1 and degree >= 0")
        self.dim = int(dim)
        self.degree = int(degree)
        self.bounds = None if bounds is None else np.asarray(bounds, dtype=float).reshape(dim, 2)
        self.unit_norm = bool(unit_norm)
        self.terms = [c for k in range(self.degree + 1)
                      for c in itertools.combinations_with_replacement(range(self.dim), k)]
        self.scale = 1.0 / math.sqrt(len(self.terms)) if unit_norm else 1.0

    @property
    def n_features(self) -> int:
        return len(self.terms)

    def normalize(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} covariates, got {x.shape[1]}")
        if self.bounds is None:
            return x
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)

    def __call__(self, x) -> np.ndarray:
        u = self.normalize(x)
        out = np.ones((u.shape[0], len(self.terms)))
        for j, term in enumerate(self.terms):
            for i in term:
                out[:, j] *= u[:, i]
        return out * self.scale

    def gradient(self, x) -> np.ndarray:
        """Jacobian of the features wrt. the raw inputs, shape ``(m, p, q)``."""
        u = self.normalize(x)
        m = u.shape[0]
        jac = np.zeros((m, len(self.terms), self.dim))
        for j, term in enumerate(self.terms):
            for pos, i in enumerate(term):
                rest = term[:pos] + term[pos + 1:]
                col = np.ones(m)
                for r in rest:
                    col = col * u[:, r]
                jac[:, j, i] += col
        if self.bounds is not None:
            jac /= (self.bounds[:, 1] - self.bounds[:, 0])
        return jac * self.scale

    def value_range(self, coef) -> tuple[float, float]:
        """Sound interval for ``coef . psi(x)`` over the box (requires ``bounds``)."""
        if self.bounds is None:
            raise ValueError("value_range needs a bounded basis")
        coef = np.asarray(coef, dtype=float)
        # every normalized monomial lies in [0, scale]
        lo = self.scale * coef[coef < 0].sum()
        hi = self.scale * coef[coef > 0].sum()
        return float(lo), float(hi)

    def to_dict(self) -> dict:
        return {"type": "polynomial", "dim": self.dim, "degree": self.degree,
                "bounds": None if self.bounds is None else self.bounds.tolist(),
                "unit_norm": self.unit_norm}

    @classmethod
    def from_dict(cls, d) -> "PolynomialBasis":
        return cls(d["dim"], d["degree"], d.get("bounds"), d.get("unit_norm", False))

    def __repr__(self):
        return f"PolynomialBasis(dim={self.dim}, degree={self.degree}, unit_norm={self.unit_norm})"


def as_2d(x, dim: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if dim is None or x.shape[0] == dim else x.reshape(-1, 1)
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"expected {dim} covariates, got {x.shape[1]}")
    return x
