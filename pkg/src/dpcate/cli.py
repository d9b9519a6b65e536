"""Command-line interface: ``dpcate {gen,fit,release,serve,sweep,audit}``.

Exit codes: 0 success, 1 audit failure or runtime error, 2 usage error,
3 privacy budget refused by the ledger.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import DataError, Domain, SyntheticConfig, generate_synthetic, load_csv, sample_covariates, \
    split_disjoint, write_csv
from .evaluation import (NuisanceSpec, StageTwoSpec, SweepConfig, fit_stage_two, functional_calibration,
                         orthogonality_probe, run_sweep, sensitivity_audit)
from .finite_mech import OptimizerOptions, release_finite
from .functional_mech import GpNoiseState, iterative_init, iterative_query, release_function_batch
from .ledger import BudgetRefused, Ledger, content_id, resolve_path
from .nuisance import NuisancePair, fit_nuisances_nonprivate, fit_nuisances_private
from .privacy import BudgetPlan, PrivacyBudget
from .pseudo import LearnerKind
from .secondstage import model_from_dict

log = logging.getLogger("dpcate")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise argparse.ArgumentTypeError("nan is not allowed")
    return v


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _read_queries(path, q=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty query file")
    header = [h.strip() for h in rows[0]]
    cols = [i for i, h in enumerate(header) if h.startswith("x")]
    if not cols or (q is not None and len(cols) != q):
        raise DataError(f"{path}: expected {q} covariate columns x1..xq")
    x = np.array([[float(r[i]) for i in cols] for r in rows[1:] if r], dtype=float)
    return x


def _write_estimates(path, x, est):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(x.shape[1])] + ["estimate"])
        for xi, e in zip(x, est):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(e))])


# ------------------------------------------------------------------------ commands


def cmd_gen(args):
    if args.config:
        cfg = SyntheticConfig.from_json(args.config)
    else:
        if args.n is None:
            raise UsageError("--n is required (or pass --config)")
        cfg = SyntheticConfig(p=args.p, effect_kind=args.kind, n=args.n, seed=args.seed)
    d, true_cate = generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(d, out)
    _write_json(str(out) + ".domain.json", Domain.of(d).to_dict())
    qx = sample_covariates(d.covariate_bounds, args.n_queries, np.random.SeedSequence([cfg.seed, 99]))
    qpath = Path(args.queries_out) if args.queries_out else out.with_name(out.stem + "_queries.csv")
    with open(qpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(d.q)] + ["true_cate"])
        for xi, t in zip(qx, true_cate(qx)):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(t))])
    print(f"wrote {len(d)} samples to {out} and {len(qx)} queries to {qpath}")
    return EXIT_OK


def _load_data(path, domain_path=None):
    domain_path = Path(domain_path) if domain_path else Path(str(path) + ".domain.json")
    if domain_path.exists():
        dom = Domain.from_dict(json.loads(domain_path.read_text()))
        return load_csv(path, dom.covariate_bounds, dom.outcome_bounds)
    log.warning("no domain file found: bounds are derived from the data, which is not private")
    return load_csv(path)


def cmd_fit(args):
    d = _load_data(args.data, args.domain)
    kind = LearnerKind.parse(args.kind)
    budget = PrivacyBudget(args.epsilon, args.delta)
    plan = BudgetPlan.from_total(budget)
    d_nuis, d_2 = split_disjoint(d, args.split_ratio, args.seed)
    out = Path(args.model_dir)
    data_id = content_id(Path(args.data).read_bytes())
    nspec = NuisanceSpec(method=args.method, kappa=args.kappa, reg=args.nuisance_reg)
    if budget.is_infinite:
        eta = fit_nuisances_nonprivate(d_nuis, nspec.kappa, nspec.hyper_dict())
    else:
        ledger = Ledger(resolve_path(args.ledger, out))
        ledger.consume(content_id(data_id, args.seed, args.split_ratio, "stage1"), "fit", plan.stage1_total(),
                       data=str(args.data))
        eta = fit_nuisances_private(d_nuis, budget, nspec.kappa, nspec.method, nspec.hyper_dict(),
                                    np.random.SeedSequence([args.seed, 1]))
    spec = StageTwoSpec(model=args.stage2, bandwidth=args.bandwidth, lambda_reg=args.lambda_reg, L=args.L)
    model = fit_stage_two(d_2, eta, kind, spec)
    _write_json(out / "nuisance.json", eta.to_dict())
    _write_json(out / "model.json", {
        "kind": kind.value, "stage2": asdict(spec), "model": model.to_dict(), "plan": plan.to_dict(),
        "domain": Domain.of(d).to_dict(), "seed": args.seed,
        "stage2_budget_id": content_id(data_id, args.seed, args.split_ratio, "stage2"),
    })
    print(f"fitted {kind.value}-learner ({model.n} stage-2 samples) into {out}")
    return EXIT_OK


def _load_fit(model_dir):
    model_dir = Path(model_dir)
    meta = json.loads((model_dir / "model.json").read_text())
    eta = NuisancePair.from_dict(json.loads((model_dir / "nuisance.json").read_text()))
    model = model_from_dict(meta["model"])
    return meta, eta, model


def _consume_stage2(args, meta, command):
    plan = meta["plan"]
    budget = PrivacyBudget.from_dict(plan["stage2"])
    if not budget.is_infinite:
        Ledger(resolve_path(args.ledger, args.model_dir)).consume(meta["stage2_budget_id"], command, budget,
                                                                 mechanism=getattr(args, "mechanism", "functional"))
    return budget


def _precheck_stage2(args, meta):
    ledger = Ledger(resolve_path(args.ledger, args.model_dir))
    if ledger.is_spent(meta["stage2_budget_id"]):
        raise BudgetRefused(f"budget {meta['stage2_budget_id']} was already consumed (ledger {ledger.path})")


def cmd_release(args):
    meta, eta, model = _load_fit(args.model_dir)
    _precheck_stage2(args, meta)
    kind = meta["kind"]
    domain = Domain.from_dict(meta["domain"])
    queries = _read_queries(args.queries, model.q)
    spec = StageTwoSpec(**meta["stage2"])
    if args.L is not None:
        spec.L = args.L
    budget = PrivacyBudget.from_dict(meta["plan"]["stage2"])
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 2]))
    if args.mechanism == "finite":
        opts = OptimizerOptions(seed=args.seed)
        rep = release_finite(model, queries, eta, budget, domain, kind, rng, opts)
        _consume_stage2(args, meta, "release")
        report = rep.to_dict(audit=args.audit)
        report["seed"] = args.seed
        _write_json(args.out, report)
    else:
        if model.__class__.__name__ != "KrrModel":
            raise UsageError("the functional mechanism needs a kernel ridge model (fit --stage2 krr)")
        cal = functional_calibration(model, eta, domain, kind, budget, spec.L)
        est = release_function_batch(model, queries, cal, rng)
        _consume_stage2(args, meta, "release")
        _write_estimates(args.out, queries, est)
        if args.audit:
            _write_estimates(str(args.out) + ".raw.csv", queries, model.predict(queries))
    if args.audit:
        print("WARNING: --audit output contains raw, NON-PRIVATE estimates. Do not publish it.", file=sys.stderr)
    print(f"released {queries.shape[0]} estimates ({args.mechanism}) to {args.out}")
    return EXIT_OK


def cmd_serve(args, stdin=None, stdout=None):
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    meta, eta, model = _load_fit(args.model_dir)
    domain = Domain.from_dict(meta["domain"])
    if args.resume:
        if not args.checkpoint or not Path(args.checkpoint).exists():
            raise UsageError("--resume needs an existing --checkpoint file")
        state = GpNoiseState.from_dict(json.loads(Path(args.checkpoint).read_text()), model)
    else:
        budget = PrivacyBudget.from_dict(meta["plan"]["stage2"])
        spec = StageTwoSpec(**meta["stage2"])
        cal = functional_calibration(model, eta, domain, meta["kind"], budget, spec.L)
        _consume_stage2(args, meta, "serve")
        state = iterative_init(model, cal, args.seed)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            x = np.asarray(req["x"], dtype=float).ravel()
            if x.shape != (model.q,) or not np.all(np.isfinite(x)):
                raise ValueError(f"x must be a list of {model.q} finite numbers")
            if not domain.contains_x(x):
                raise ValueError("x outside the covariate domain")
        except (ValueError, KeyError, TypeError) as exc:
            stdout.write(json.dumps({"error": str(exc)}) + "\n")
            stdout.flush()
            continue
        index = state.count
        estimate, state = iterative_query(state, x)
        if args.checkpoint:
            _write_json(args.checkpoint, state.to_dict())
        stdout.write(json.dumps({"estimate": estimate, "query_index": index}) + "\n")
        stdout.flush()
    return EXIT_OK


def cmd_sweep(args):
    eps = [float(e) for e in args.epsilons.split(",")]
    cfg = SweepConfig(synthetic=SyntheticConfig(p=args.p, effect_kind=args.effect, n=args.n),
                      kind=args.kind, mechanism=args.mechanism, epsilons=eps, delta=args.delta,
                      seeds=range(args.seed, args.seed + args.seeds),
                      stage2=StageTwoSpec(bandwidth=args.bandwidth, lambda_reg=args.lambda_reg),
                      nuisance=NuisanceSpec(reg=args.nuisance_reg, kappa=args.kappa))
    res = run_sweep(cfg, args.out_csv, args.out_json)
    for e in cfg.epsilons:
        s = res.summary["inf" if math.isinf(e) else repr(e)]
        print(f"epsilon={e:g} mean_pehe={s['mean']:.4f} std={s['std']:.4f}")
    return EXIT_OK


def cmd_audit(args):
    if args.check == "orthogonality":
        orth = orthogonality_probe(args.seed, n=args.n, seeds=args.seeds, kind=args.kind)
        plug = orthogonality_probe(args.seed, n=args.n, seeds=args.seeds, kind=args.kind, plug_in=True)
        print(f"orthogonal slope: {orth['slope']:.3f}")
        print(f"plug-in slope: {plug['slope']:.3f}")
        ok = 1.6 <= orth["slope"] <= 2.4 and 0.8 <= plug["slope"] <= 1.2
    else:
        rep = sensitivity_audit(n=args.n, trials=args.trials, lambda_reg=args.lambda_reg, kind=args.kind,
                                seed=args.seed)
        print(f"max observed / bound: {rep['max_ratio']:.4f} (bound {rep['bound']:.4g})")
        ok = rep["passed"]
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


# ------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpcate", description="Differentially private CATE estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset and query set")
    g.add_argument("--kind", default="dataset1", choices=["dataset1", "dataset2", "constant"])
    g.add_argument("--n", type=int)
    g.add_argument("--p", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="SyntheticConfig JSON file (overrides the flags)")
    g.add_argument("--out", default="data.csv")
    g.add_argument("--queries-out")
    g.add_argument("--n-queries", type=int, default=300)

    f = sub.add_parser("fit", help="fit nuisances (stage 1) and the stage-2 regressor")
    f.add_argument("--data", required=True)
    f.add_argument("--domain", help="domain JSON (default: <data>.domain.json)")
    f.add_argument("--model-dir", required=True)
    f.add_argument("--kind", default="DR", choices=["R", "DR"])
    f.add_argument("--epsilon", type=_float, required=True, help="total epsilon; 'inf' for no privacy")
    f.add_argument("--delta", type=_float, default=0.05)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--split-ratio", type=float, default=0.5)
    f.add_argument("--method", default="param_output_perturbation",
                   choices=["param_output_perturbation", "dp_gradient_descent"])
    f.add_argument("--kappa", type=float, default=0.05)
    f.add_argument("--nuisance-reg", type=float, default=1.0)
    f.add_argument("--stage2", default="krr", choices=["krr", "linear"])
    f.add_argument("--bandwidth", type=float, default=0.5)
    f.add_argument("--lambda-reg", type=float)
    f.add_argument("--L", type=float, help="override the Lipschitz constant of the functional mechanism")
    f.add_argument("--ledger")

    r = sub.add_parser("release", help="release private estimates for a query file")
    r.add_argument("--model-dir", required=True)
    r.add_argument("--queries", required=True)
    r.add_argument("--mechanism", default="finite", choices=["finite", "functional"])
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--L", type=float)
    r.add_argument("--audit", action="store_true", help="also write raw estimates (NOT private)")
    r.add_argument("--ledger")

    s = sub.add_parser("serve", help="answer {\"x\": [...]} lines on stdin with the iterative GP mechanism")
    s.add_argument("--model-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--ledger")

    w = sub.add_parser("sweep", help="PEHE across privacy budgets on synthetic data")
    w.add_argument("--kind", default="DR", choices=["R", "DR"])
    w.add_argument("--mechanism", default="finite", choices=["finite", "functional", "none"])
    w.add_argument("--epsilons", default="0.1,1,10,inf")
    w.add_argument("--delta", type=float, default=0.05)
    w.add_argument("--seeds", type=int, default=10, help="number of seeds")
    w.add_argument("--seed", type=int, default=0, help="first seed")
    w.add_argument("--n", type=int, default=3000)
    w.add_argument("--p", type=int, default=2)
    w.add_argument("--effect", default="dataset1", choices=["dataset1", "dataset2", "constant"])
    w.add_argument("--bandwidth", type=float, default=0.5)
    w.add_argument("--lambda-reg", type=float)
    w.add_argument("--nuisance-reg", type=float, default=1.0)
    w.add_argument("--kappa", type=float, default=0.05)
    w.add_argument("--out-csv", default="sweep.csv")
    w.add_argument("--out-json", default="sweep.json")

    a = sub.add_parser("audit", help="numerical checks: orthogonality slope or sensitivity bound")
    a.add_argument("check", choices=["orthogonality", "sensitivity"])
    a.add_argument("--kind", default="DR", choices=["R", "DR"])
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--n", type=int, help="sample size (default 200000 / 50)")
    a.add_argument("--seeds", type=int, default=10)
    a.add_argument("--trials", type=int, default=200)
    a.add_argument("--lambda-reg", type=float, default=0.05)
    return p


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "release": cmd_release, "serve": cmd_serve,
            "sweep": cmd_sweep, "audit": cmd_audit}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "audit" and args.n is None:
        args.n = 200_000 if args.check == "orthogonality" else 50
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dpcate {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetRefused as exc:
        print(f"dpcate {args.command}: refused: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (DataError, OSError, ValueError) as exc:
        print(f"dpcate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
