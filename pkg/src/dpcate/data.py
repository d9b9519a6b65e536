"""Datasets of observed (X, A, Y) triples on a bounded domain.

A :class:`Dataset` is the unit of privacy: every sample lies inside the
declared covariate and outcome bounds, and those bounds (not the observed
values) define the domain over which sensitivities are taken.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

EFFECT_KINDS = ("dataset1", "dataset2", "constant")


class DataError(ValueError):
    """Raised for malformed or out-of-domain input data."""


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    a: int
    y: float


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of samples plus the domain they live in.

    Attributes:
        x: covariates, shape ``(n, q)``.
        a: binary treatments, shape ``(n,)``.
        y: outcomes, shape ``(n,)``.
        covariate_bounds: ``(q, 2)`` array of ``(lo, hi)`` per coordinate.
        outcome_bounds: ``(lo, hi)`` for the outcome.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    covariate_bounds: np.ndarray
    outcome_bounds: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        a = np.asarray(self.a).astype(int).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        cb = np.asarray(self.covariate_bounds, dtype=float).reshape(-1, 2)
        ob = np.asarray(self.outcome_bounds, dtype=float).ravel()
        if x.shape[0] != a.shape[0] or x.shape[0] != y.shape[0]:
            raise DataError("x, a and y must have the same number of rows")
        if cb.shape[0] != x.shape[1]:
            raise DataError(f"expected {x.shape[1]} covariate bounds, got {cb.shape[0]}")
        if ob.shape != (2,):
            raise DataError("outcome_bounds must be a (lo, hi) pair")
        if not (np.all(np.isfinite(cb)) and np.all(cb[:, 0] < cb[:, 1])):
            raise DataError("covariate bounds must be finite with lo < hi")
        if not (np.all(np.isfinite(ob)) and ob[0] < ob[1]):
            raise DataError("outcome bounds must be finite with lo < hi")
        if not np.all((a == 0) | (a == 1)):
            raise DataError("treatment must be binary")
        if np.any(x < cb[:, 0]) or np.any(x > cb[:, 1]):
            raise DataError("covariate outside declared bounds")
        if np.any(y < ob[0]) or np.any(y > ob[1]):
            raise DataError("outcome outside declared bounds")
        for name, value in (("x", x), ("a", a), ("y", y),
                            ("covariate_bounds", cb), ("outcome_bounds", ob)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    @property
    def q(self) -> int:
        return self.x.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def sample(self, i: int) -> Sample:
        return Sample(self.x[i].copy(), int(self.a[i]), float(self.y[i]))

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.x[idx], self.a[idx], self.y[idx],
                       self.covariate_bounds, self.outcome_bounds)

    def with_sample(self, i: int, z: Sample) -> "Dataset":
        """Neighbouring dataset: row ``i`` replaced by ``z``."""
        x, a, y = self.x.copy(), self.a.copy(), self.y.copy()
        x[i], a[i], y[i] = z.x, z.a, z.y
        return Dataset(x, a, y, self.covariate_bounds, self.outcome_bounds)


@dataclass
class SyntheticConfig:
    """Settings for the two-arm synthetic generator.

    ``support_size`` limits how many coordinates of the treatment and outcome
    coefficient vectors are nonzero (``None`` means all ``p``).
    """

    p: int = 2
    effect_kind: str = "dataset1"
    n: int = 3000
    seed: int = 0
    beta_support: tuple[float, float] = (0.0, 0.3)
    gamma_support: tuple[float, float] = (0.0, 1.0)
    support_size: Optional[int] = None
    effect_constant: float = 1.0

    def __post_init__(self):
        self.beta_support = tuple(float(v) for v in self.beta_support)
        self.gamma_support = tuple(float(v) for v in self.gamma_support)
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.effect_kind not in EFFECT_KINDS:
            raise ValueError(f"effect_kind must be one of {EFFECT_KINDS}")
        if self.effect_kind == "dataset2" and self.p < 2:
            raise ValueError("dataset2 needs p >= 2")
        for lo, hi in (self.beta_support, self.gamma_support):
            if not lo <= hi:
                raise ValueError("support intervals need lo <= hi")
        if self.support_size is not None and not 1 <= self.support_size <= self.p:
            raise ValueError("support_size must lie in [1, p]")

    @classmethod
    def from_json(cls, path_or_text) -> "SyntheticConfig":
        text = str(path_or_text)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        return cls(**json.loads(text))


def cate_function(kind: str, constant: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Ground-truth treatment effect for a synthetic ``effect_kind``."""
    if kind == "dataset1":
        return lambda x: np.exp(2 * np.atleast_2d(x)[:, 0]) + 3 * np.sin(4 * np.atleast_2d(x)[:, 0])
    if kind == "dataset2":
        return lambda x: np.exp(2 * np.atleast_2d(x)[:, 0]) + 3 * np.sin(4 * np.atleast_2d(x)[:, 1])
    if kind == "constant":
        return lambda x: np.full(np.atleast_2d(x).shape[0], float(constant))
    raise ValueError(f"unknown effect kind {kind!r}")


def _effect_range(cfg: SyntheticConfig) -> tuple[float, float]:
    # both effect surfaces are separable sums of 1-d terms on [0, 1]
    if cfg.effect_kind == "constant":
        return cfg.effect_constant, cfg.effect_constant
    t = np.linspace(0.0, 1.0, 100001)
    e, s = np.exp(2 * t), 3 * np.sin(4 * t)
    if cfg.effect_kind == "dataset1":
        v = e + s
        return float(v.min()), float(v.max())
    return float(e.min() + s.min()), float(e.max() + s.max())


def _draw_coefficients(rng, cfg, support):
    coef = np.zeros(cfg.p)
    k = cfg.p if cfg.support_size is None else cfg.support_size
    coef[:k] = rng.uniform(support[0], support[1], size=k)
    return coef


def generate_synthetic(cfg: SyntheticConfig):
    """Draw a dataset from the confounded two-arm design.

    ``X ~ U[0,1]^p``, ``A = 1{X.beta >= eta}``, ``Y = theta(X) A + X.gamma + eps``
    with ``eta, eps ~ U[-1, 1]``.

    Returns:
        ``(dataset, true_cate)`` where ``true_cate`` maps an ``(m, p)`` array of
        covariates to the treatment effect. The generating coefficients are
        attached to ``true_cate`` as ``beta`` and ``gamma`` attributes.
    """
    rng = np.random.default_rng(cfg.seed)
    beta = _draw_coefficients(rng, cfg, cfg.beta_support)
    gamma = _draw_coefficients(rng, cfg, cfg.gamma_support)
    x = rng.uniform(0.0, 1.0, size=(cfg.n, cfg.p))
    eta = rng.uniform(-1.0, 1.0, size=cfg.n)
    eps = rng.uniform(-1.0, 1.0, size=cfg.n)
    theta = cate_function(cfg.effect_kind, cfg.effect_constant)
    a = (x @ beta >= eta).astype(int)
    y = theta(x) * a + x @ gamma + eps

    t_lo, t_hi = _effect_range(cfg)
    y_lo = min(0.0, t_lo) + min(0.0, gamma[gamma < 0].sum()) - 1.0
    y_hi = max(0.0, t_hi) + gamma[gamma > 0].sum() + 1.0
    # tiny pad so float rounding in the draw never lands outside
    pad = 1e-9 * max(1.0, y_hi - y_lo)
    bounds = np.tile([0.0, 1.0], (cfg.p, 1))
    ds = Dataset(x, a, y, bounds, (y_lo - pad, y_hi + pad))
    theta.beta, theta.gamma = beta, gamma
    return ds, theta


def oracle_nuisances(true_cate, kind: str = "dataset1"):
    """True ``(mu, pi)`` of the synthetic design, as plain callables.

    ``pi(x) = P(eta <= x.beta) = (1 + x.beta) / 2`` clipped to [0, 1] and
    ``mu(x, a) = theta(x) a + x.gamma``.
    """
    beta, gamma = true_cate.beta, true_cate.gamma

    def mu(x, a):
        x = np.atleast_2d(x)
        return true_cate(x) * np.asarray(a) + x @ gamma

    def pi(x):
        return np.clip((1.0 + np.atleast_2d(x) @ beta) / 2.0, 0.0, 1.0)

    return mu, pi


def load_csv(path, covariate_bounds=None, outcome_bounds=None) -> Dataset:
    """Read ``x1..xq,a,y`` rows.

    Bounds not supplied are taken from the observed per-column range widened
    by 1% on each side, so that the domain strictly contains the data.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        q = len(header) - 2
        expected = [f"x{j + 1}" for j in range(q)] + ["a", "y"]
        if q < 1 or header != expected:
            raise DataError(f"{path}: header must be x1..xq,a,y, got {','.join(header)}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != q + 2:
                raise DataError(f"{path}: line {line_no}: expected {q + 2} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}: line {line_no}: non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: line {line_no}: non-finite value")
            if vals[q] not in (0.0, 1.0):
                raise DataError(f"{path}: line {line_no}: treatment a={row[q].strip()} not in {{0,1}}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    arr = np.asarray(rows)
    x, a, y = arr[:, :q], arr[:, q].astype(int), arr[:, q + 1]
    if covariate_bounds is None:
        covariate_bounds = np.column_stack([_widen(x[:, j]) for j in range(q)]).T
    if outcome_bounds is None:
        outcome_bounds = _widen(y)
    return Dataset(x, a, y, covariate_bounds, outcome_bounds)


def _widen(col, margin=0.01):
    lo, hi = float(np.min(col)), float(np.max(col))
    span = hi - lo
    if span == 0.0:
        span = max(abs(lo), 1.0)
    return np.array([lo - margin * span, hi + margin * span])


def write_csv(d: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(d.q)] + ["a", "y"])
        for xi, ai, yi in zip(d.x, d.a, d.y):
            w.writerow([repr(float(v)) for v in xi] + [int(ai), repr(float(yi))])


def split_disjoint(d: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random partition into parts of size ``floor(ratio*N)`` and the rest."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(d)
    k = int(math.floor(ratio * n))
    if k == 0 or k == n:
        raise ValueError(f"ratio {ratio} leaves an empty part for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return d.subset(np.sort(perm[:k])), d.subset(np.sort(perm[k:]))


def sample_covariates(bounds, m: int, seed) -> np.ndarray:
    """Uniform draws from the covariate box (used for query sets)."""
    bounds = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng(seed)
    return bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.uniform(size=(m, bounds.shape[0]))


@dataclass(frozen=True)
class Domain:
    """Declared bounds of the sample space, without any data."""

    covariate_bounds: np.ndarray
    outcome_bounds: np.ndarray

    @classmethod
    def of(cls, d: Dataset) -> "Domain":
        return cls(d.covariate_bounds, d.outcome_bounds)

    def to_dict(self) -> dict:
        return {"covariate_bounds": np.asarray(self.covariate_bounds).tolist(),
                "outcome_bounds": np.asarray(self.outcome_bounds).tolist()}

    @classmethod
    def from_dict(cls, d) -> "Domain":
        return cls(np.asarray(d["covariate_bounds"], dtype=float).reshape(-1, 2),
                   np.asarray(d["outcome_bounds"], dtype=float).reshape(2))

    def contains_x(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        cb = np.asarray(self.covariate_bounds)
        return bool(np.all(x >= cb[:, 0]) and np.all(x <= cb[:, 1]))
