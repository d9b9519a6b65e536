"""Experiment harness: PEHE, privacy-budget sweeps and numerical audits."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .basis import PolynomialBasis
from .data import Dataset, Sample, SyntheticConfig, generate_synthetic, oracle_nuisances, sample_covariates, split_disjoint
from .finite_mech import OptimizerOptions, release_finite
from .functional_mech import calibration_r, lipschitz_bound, release_function_batch, rkhs_sensitivity_bound
from .nuisance import (DEFAULT_KAPPA, NuisancePair, fit_nuisances_nonprivate, fit_nuisances_private,
                       nuisances_from_callables)
from .privacy import BudgetPlan, PrivacyBudget
from .pseudo import LearnerKind, targets_arrays
from .secondstage import KernelSpec, fit_krr_arrays, fit_linear_basis_arrays

logger = logging.getLogger(__name__)

MECHANISMS = ("finite", "functional", "none")


def pehe(predictions, true_cate) -> float:
    """Root mean squared difference between estimated and true effects."""
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(true_cate, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {t.shape[0]}")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((p - t) ** 2)))


DEFAULT_LAMBDA = {"R": 0.05, "DR": 0.1}


@dataclass
class NuisanceSpec:
    method: str = "param_output_perturbation"
    kappa: float = DEFAULT_KAPPA
    reg: float = 1.0
    degree: int = 2
    hyper: dict = field(default_factory=dict)

    def hyper_dict(self):
        return {"reg": self.reg, "degree": self.degree, **self.hyper}


@dataclass
class StageTwoSpec:
    """Second-stage regressor.

    ``model="krr"`` uses a fixed bandwidth (a data-independent configuration
    value, so it costs no privacy budget). ``lambda_reg=None`` picks the
    learner default from ``DEFAULT_LAMBDA``: R-learner weights ``(a - pi)^2``
    average ``pi (1 - pi) <= 1/4``, so it gets a smaller ridge than the
    unit-weight DR-learner. ``L`` overrides the computed Lipschitz constant of
    the functional mechanism.
    """

    model: str = "krr"
    bandwidth: float = 0.5
    lambda_reg: Optional[float] = None
    degree: int = 2
    reg: float = 0.0
    alpha_damp: float = 0.0
    L: Optional[float] = None

    def resolved_lambda(self, kind) -> float:
        if self.lambda_reg is not None:
            return float(self.lambda_reg)
        return DEFAULT_LAMBDA[LearnerKind.parse(kind).value]


def fit_stage_two(d: Dataset, eta: NuisancePair, kind, spec: StageTwoSpec):
    rho, phi = targets_arrays(d, eta, kind)
    if spec.model == "krr":
        return fit_krr_arrays(d.x, rho, phi, KernelSpec(spec.bandwidth, d.q), spec.resolved_lambda(kind))
    if spec.model == "linear":
        basis = PolynomialBasis(d.q, spec.degree, d.covariate_bounds)
        return fit_linear_basis_arrays(d.x, rho, phi, basis, spec.reg, spec.alpha_damp)
    raise ValueError(f"unknown stage-2 model {spec.model!r}")


def functional_calibration(model, eta: NuisancePair, domain: Dataset, kind, budget: PrivacyBudget,
                           L: Optional[float] = None):
    if L is None:
        L = lipschitz_bound(eta, domain.outcome_bounds, kind, model.lambda_reg, model.kernel)["L"]
    return calibration_r(kind, eta.kappa, L, model.lambda_reg, model.n, model.kernel, budget)


def release(model, queries, eta: NuisancePair, budget: PrivacyBudget, mechanism: str, domain: Dataset,
            kind, seed, spec: StageTwoSpec, opts: Optional[OptimizerOptions] = None):
    """Private estimates at ``queries``; returns ``(estimates, info)``."""
    if mechanism == "none" or budget.is_infinite:
        return model.predict(queries), {"mechanism": mechanism, "noise_scale": 0.0}
    if mechanism == "finite":
        rep = release_finite(model, queries, eta, budget, domain, kind, seed, opts)
        return rep.private_estimates, {"mechanism": "finite", "gamma": rep.gamma, "noise_scale": rep.noise_scale}
    if mechanism == "functional":
        if spec.model != "krr":
            raise ValueError("the functional mechanism needs a kernel ridge second stage")
        cal = functional_calibration(model, eta, domain, kind, budget, spec.L)
        est = release_function_batch(model, queries, cal, seed)
        return est, {"mechanism": "functional", "r_factor": cal.r_factor, "L": cal.lipschitz_L,
                     "noise_scale": cal.r_factor * math.sqrt(model.kernel.peak)}
    raise ValueError(f"mechanism must be one of {MECHANISMS}")


@dataclass
class SweepConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    kind: str = "DR"
    mechanism: str = "finite"
    epsilons: Sequence[float] = (0.1, 1.0, 10.0, math.inf)
    delta: float = 0.05
    seeds: Sequence[int] = tuple(range(10))
    stage2: StageTwoSpec = field(default_factory=StageTwoSpec)
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)
    n_queries: int = 300
    test_ratio: float = 0.1
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)

    def __post_init__(self):
        eps = [float(e) for e in self.epsilons]
        if not eps or any(not e > 0 for e in eps) or any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilons must be positive and strictly ascending")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        LearnerKind.parse(self.kind)
        self.epsilons = tuple(eps)
        self.seeds = tuple(int(s) for s in self.seeds)


@dataclass
class SweepResult:
    rows: list                    # dicts with epsilon, seed, pehe, baseline_pehe
    summary: dict

    def mean(self, eps) -> float:
        return self.summary[_eps_key(eps)]["mean"]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "seed", "pehe", "baseline_pehe"])
            for r in self.rows:
                w.writerow([_eps_key(r["epsilon"]), r["seed"], repr(r["pehe"]), repr(r["baseline_pehe"])])

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.summary, indent=2, sort_keys=True))


def _eps_key(e) -> str:
    return "inf" if math.isinf(e) else repr(float(e))


def split_for_experiment(d: Dataset, seed: int, test_ratio: float = 0.1):
    """``(nuisance_split, stage2_split, test_split)`` with a 50/50 training split."""
    train, test = split_disjoint(d, 1.0 - test_ratio, seed)
    d_nuis, d_2 = split_disjoint(train, 0.5, seed + 1)
    return d_nuis, d_2, test


def run_seed(cfg: SweepConfig, seed: int) -> list:
    syn = replace(cfg.synthetic, seed=seed)
    d, true_cate = generate_synthetic(syn)
    d_nuis, d_2, test = split_for_experiment(d, seed, cfg.test_ratio)
    queries = test.x[: cfg.n_queries]
    truth = true_cate(queries)
    kind = LearnerKind.parse(cfg.kind)
    hyper = cfg.nuisance.hyper_dict()

    eta0 = fit_nuisances_nonprivate(d_nuis, cfg.nuisance.kappa, hyper)
    base_model = fit_stage_two(d_2, eta0, kind, cfg.stage2)
    baseline = pehe(base_model.predict(queries), truth)

    rows = []
    for i, eps in enumerate(cfg.epsilons):
        if math.isinf(eps):
            # no noise anywhere: identical to the baseline computation
            est = base_model.predict(queries)
            info = {"noise_scale": 0.0}
        else:
            ss = np.random.SeedSequence([seed, i])
            s_nuis, s_rel = ss.spawn(2)
            plan = BudgetPlan.from_total(PrivacyBudget(eps, cfg.delta))
            eta = fit_nuisances_private(d_nuis, plan.total, cfg.nuisance.kappa, cfg.nuisance.method, hyper,
                                        s_nuis)
            model = fit_stage_two(d_2, eta, kind, cfg.stage2)
            est, info = release(model, queries, eta, plan.stage2, cfg.mechanism, d_2, kind,
                                np.random.default_rng(s_rel), cfg.stage2, cfg.optimizer)
        rows.append({"epsilon": eps, "seed": seed, "pehe": pehe(est, truth), "baseline_pehe": baseline,
                     "noise_scale": float(info.get("noise_scale", 0.0))})
    return rows


def summarize(rows, epsilons) -> dict:
    out = {}
    for eps in epsilons:
        vals = np.array([r["pehe"] for r in rows if r["epsilon"] == eps])
        base = np.array([r["baseline_pehe"] for r in rows if r["epsilon"] == eps])
        out[_eps_key(eps)] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0)),
                              "baseline_mean": float(base.mean()), "runs": int(vals.size)}
    return out


def run_sweep(cfg: SweepConfig, csv_path=None, json_path=None) -> SweepResult:
    """PEHE over the ``epsilons x seeds`` grid; files are rewritten after each seed."""
    rows = []
    for seed in cfg.seeds:
        rows.extend(run_seed(cfg, seed))
        res = SweepResult(rows, summarize(rows, cfg.epsilons))
        if csv_path:
            res.to_csv(csv_path)
        if json_path:
            res.to_json(json_path)
    res = SweepResult(rows, summarize(rows, cfg.epsilons))
    res.summary["config"] = {"kind": cfg.kind, "mechanism": cfg.mechanism, "delta": cfg.delta,
                             "seeds": list(cfg.seeds), "stage2": asdict(cfg.stage2),
                             "nuisance": asdict(cfg.nuisance), "n_queries": cfg.n_queries,
                             "synthetic": {k: v for k, v in asdict(cfg.synthetic).items() if k != "seed"}}
    if json_path:
        res.to_json(json_path)
    return res


# ---------------------------------------------------------------- orthogonality probe


MIN_PROBE_SPAN = 8.0  # three doublings, e.g. 0.02 ... 0.16


def _probe_directions(x):
    x0 = x[:, 0]
    return np.sin(2.0 * np.pi * x0), 0.5 * np.cos(np.pi * x0)


def orthogonality_probe(base_seed: int = 0, ts=(0.02, 0.04, 0.08, 0.16), n: int = 200_000, seeds: int = 10,
                        kind="DR", plug_in: bool = False, degree: int = 2, n_eval: int = 2000) -> dict:
    """Log-log slope of the stage-2 fit error against nuisance perturbation size.

    Oracle nuisances of the synthetic design are perturbed as
    ``mu(x, a) + t (2a - 1) u(x)`` and ``pi(x) + t v(x)`` with smooth fixed
    ``u, v`` of the first covariate. For each ``t`` the linear-basis stage 2 is
    refitted on the same data and compared with the oracle-nuisance fit in L2
    over uniform evaluation points. With ``plug_in=True`` the pseudo-outcome is
    replaced by ``mu(x, 1) - mu(x, 0)``.
    """
    ts = np.asarray(ts, dtype=float)
    if ts.size < 3 or np.any(ts <= 0) or ts.max() / ts.min() < MIN_PROBE_SPAN:
        raise ValueError(f"need >= 3 positive magnitudes spanning a factor >= {MIN_PROBE_SPAN:g}")
    kind = LearnerKind.parse(kind)
    errors = np.zeros((seeds, ts.size))
    for s in range(seeds):
        syn = SyntheticConfig(n=n, seed=int(np.random.SeedSequence([base_seed, s]).generate_state(1)[0]))
        d, true_cate = generate_synthetic(syn)
        mu, pi = oracle_nuisances(true_cate)
        basis = PolynomialBasis(d.q, degree, d.covariate_bounds)
        x_eval = sample_covariates(d.covariate_bounds, n_eval, s)

        def fit_with(t):
            def mu_t(x, a):
                u, _ = _probe_directions(np.atleast_2d(x))
                return mu(x, a) + t * (2.0 * np.asarray(a, float) - 1.0) * u

            def pi_t(x):
                _, v = _probe_directions(np.atleast_2d(x))
                return pi(x) + t * v

            eta = nuisances_from_callables(mu_t, pi_t, DEFAULT_KAPPA)
            rho, phi = targets_arrays(d, eta, kind)
            if plug_in:
                phi = eta.mu(d.x, np.ones(len(d))) - eta.mu(d.x, np.zeros(len(d)))
                rho = np.ones(len(d))
            return fit_linear_basis_arrays(d.x, rho, phi, basis).predict(x_eval)

        ref = fit_with(0.0)
        for j, t in enumerate(ts):
            errors[s, j] = math.sqrt(np.mean((fit_with(t) - ref) ** 2))
    mean_err = errors.mean(axis=0)
    if np.any(mean_err <= 0):
        raise ArithmeticError("zero error at a positive perturbation; slope undefined")
    slope = float(np.polyfit(np.log(ts), np.log(mean_err), 1)[0])
    return {"slope": slope, "ts": ts.tolist(), "mean_error": mean_err.tolist(), "plug_in": plug_in,
            "kind": kind.value, "n": n, "seeds": seeds}


# --------------------------------------------------------------- sensitivity audit


def _rkhs_distance(m1, m2) -> float:
    x = np.vstack([m1.train_x, m2.train_x])
    coef = np.concatenate([m1.alpha, -m2.alpha])
    k = m1.kernel(x, x)
    return float(math.sqrt(max(coef @ k @ coef, 0.0)))


def sensitivity_audit(n: int = 50, trials: int = 200, kernel: Optional[KernelSpec] = None,
                      lambda_reg: float = 0.05, kind="DR", seed: int = 0, kappa: float = DEFAULT_KAPPA) -> dict:
    """Replace one sample at a time and compare the realized RKHS distance of
    the kernel ridge fits with the stability bound ``sup_rho L / (lambda n) K(x, x)``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    kind = LearnerKind.parse(kind)
    rng = np.random.default_rng(seed)
    d_all, _ = generate_synthetic(SyntheticConfig(n=n + 500, seed=seed))
    aux, d = d_all.subset(np.arange(500)), d_all.subset(np.arange(500, 500 + n))
    eta = fit_nuisances_nonprivate(aux, kappa)
    kernel = kernel or KernelSpec(0.2, d.q)
    lip = lipschitz_bound(eta, d.outcome_bounds, kind, lambda_reg, kernel)
    cal = calibration_r(kind, kappa, lip["L"], lambda_reg, n, kernel, PrivacyBudget(1.0, 0.05))
    bound = rkhs_sensitivity_bound(cal.sup_rho, lip["L"], lambda_reg, n, kernel)
    rho, phi = targets_arrays(d, eta, kind)
    base = fit_krr_arrays(d.x, rho, phi, kernel, lambda_reg)
    lo_y, hi_y = d.outcome_bounds
    worst = 0.0
    distances = []
    for _ in range(trials):
        i = int(rng.integers(n))
        x_new = sample_covariates(d.covariate_bounds, 1, rng)[0]
        a_new = int(rng.integers(2))
        y_new = float(rng.choice([lo_y, hi_y]) if rng.random() < 0.5 else rng.uniform(lo_y, hi_y))
        d2 = d.with_sample(i, Sample(x_new, a_new, y_new))
        rho2, phi2 = targets_arrays(d2, eta, kind)
        m2 = fit_krr_arrays(d2.x, rho2, phi2, kernel, lambda_reg)
        dist = _rkhs_distance(base, m2)
        distances.append(dist)
        worst = max(worst, dist)
    return {"n": n, "trials": trials, "lambda_reg": lambda_reg, "bandwidth": kernel.bandwidth,
            "kind": kind.value, "L": lip["L"], "bound": bound, "max_distance": worst,
            "max_ratio": worst / bound, "mean_distance": float(np.mean(distances)),
            "passed": bool(worst <= bound)}
