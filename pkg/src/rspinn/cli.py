"""Command-line entry point: ``rspinn run | verify-estimators | bias-audit | gradcheck``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import audit, report
from .config import ConfigFileError, bundled_configs, load_run_config
from .pdes import PROBLEMS, UnsupportedModeError, normalize_mode
from .sampling import ConfigError
from .trainer import run_suite

# perturbed network evaluations above which a run is flagged as long
_LONG_RUN_EVALS = 5e10


def _estimated_evals(cfg, problem):
    groups = max(problem.groups_for(m) for m in cfg.schedule_modes())
    per_point = 4 if problem.time_dependent else 3
    return cfg.epochs * cfg.batch_size * cfg.K_train * groups * per_point


def cmd_run(args):
    try:
        run = load_run_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seeds"] = (args.seed,)
        if args.mode is not None:
            overrides["mode"] = args.mode
        if args.dim is not None:
            overrides["dim"] = args.dim
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        cfg = dataclasses.replace(run.train, **overrides) if overrides else run.train
        problem = cfg.build_problem()
        cfg.validate(problem)
    except (ConfigError, UnsupportedModeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or run.out_dir) / Path(str(run.path)).stem
    evals = _estimated_evals(cfg, problem)
    if evals > _LONG_RUN_EVALS:
        print(f"warning: about {evals:.2g} network evaluations per seed; expect hours on a CPU", file=sys.stderr)
    print(f"{cfg.problem} d={cfg.dim} mode={cfg.mode} seeds={list(cfg.seeds)} -> {out}")
    suite = run_suite(cfg)
    for rec in suite.records:
        path = report.write_run_csv(out / f"seed_{rec.seed}.csv", rec)
        status = "" if rec.status == "ok" else f"  [{rec.status}: {rec.message}]"
        print(f"  seed {rec.seed}: final test_rel_l2 = {rec.final_error:.4e}  ({path}){status}")
    report.write_summary_csv(out / "summary.csv", suite.records, suite.mean, suite.std)
    if run.plots and not args.no_plot:
        report.plot_convergence(out / "convergence.png", suite.records, f"{cfg.problem} {cfg.dim}D {cfg.mode}")
    print(f"final test_rel_l2: {suite.mean:.4e} ± {suite.std:.2e} over {len(suite.records)} seed(s)")
    return 0 if all(r.status == "ok" for r in suite.records) else 1


def cmd_verify_estimators(args):
    checks = audit.estimator_checks(args.draws, args.sigma, args.seed)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return 0 if ok else 1


def cmd_bias_audit(args):
    try:
        mode = normalize_mode(args.mode)
        if args.pde == "boundary":
            res = audit.boundary_bias(mode, args.k, args.resamples, args.sigma, seed=args.seed)
        else:
            res = audit.residual_bias(args.pde, mode, args.k, args.resamples, args.sigma, args.dim, args.seed)
    except (ConfigError, UnsupportedModeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(res.line())
    ok = True
    if res.predicted is not None:
        ok = res.matches(res.predicted)
        print(f"{'PASS' if ok else 'FAIL'}  mean vs predicted {res.predicted:.8g} within 3 se")
    else:
        print("INFO  no closed-form prediction for this mode; gap reported only")
    if args.pde != "boundary" and args.variance_draws > 0:
        problem = audit._problem(args.pde, args.dim)
        widest = max(audit.supported_groups(problem))
        k_total = args.k * widest
        table = audit.gradient_variance(args.pde, K=k_total, n_draws=args.variance_draws, dim=args.dim,
                                        sigma=args.sigma, seed=args.seed)
        print(f"gradient variance at an equal budget of {k_total} perturbations per point")
        print(f"{'mode':<10} {'K/group':>8} {'grad variance':>14} {'se':>10}")
        for row in table:
            print(f"{row.mode:<10} {row.k_group:>8} {row.variance:>14.6g} {row.stderr:>10.3g}")
        if len(table) > 1:
            hi_ok = table[-1].variance >= table[0].variance
            print(f"{'PASS' if hi_ok else 'FAIL'}  Var({table[-1].mode}) >= Var({table[0].mode}); "
                  f"full ordering: {audit.variance_ordering(table)}")
            ok = ok and hi_ok
    return 0 if ok else 1


def cmd_gradcheck(args):
    try:
        results = audit.gradcheck(dim=args.dim, seed=args.seed, n_coords=args.coords)
    except audit.FrozenNoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for r in results:
        tag = "PASS" if r.max_rel_error <= args.tol else "FAIL"
        print(f"{tag}  {r.pde:<15} {r.mode:<10} max rel error {r.max_rel_error:.2e} over {r.n_checked} params")
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.2e} (threshold {args.tol:g})")
    return 0 if worst <= args.tol else 1


def build_parser():
    p = argparse.ArgumentParser(prog="rspinn", description="Backpropagation-free PINNs via randomized smoothing.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train from a config file and write CSVs")
    r.add_argument("--config", required=True,
                   help=f"path to an .ini file or a bundled name ({', '.join(bundled_configs())})")
    r.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    r.add_argument("--mode", help="override the loss mode")
    r.add_argument("--dim", type=int, help="override the spatial dimension")
    r.add_argument("--epochs", type=int, help="override the epoch count (smoke runs)")
    r.add_argument("--out", help="output directory (default: reporting.out_dir)")
    r.add_argument("--no-plot", action="store_true", help="skip the convergence figure")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify-estimators", help="oracle checks for the smoothing estimators")
    v.add_argument("--draws", type=int, default=100_000)
    v.add_argument("--sigma", type=float, default=0.1)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_estimators)

    b = sub.add_parser("bias-audit", help="resampling mean of a loss against its exact value")
    b.add_argument("--pde", required=True, choices=("boundary", *PROBLEMS))
    b.add_argument("--mode", required=True)
    b.add_argument("--k", type=int, default=4)
    b.add_argument("--resamples", type=int, default=100_000)
    b.add_argument("--sigma", type=float, default=0.1)
    b.add_argument("--dim", type=int, default=4)
    b.add_argument("--variance-draws", type=int, default=2000,
                   help="draws per point for the gradient-variance table (0 skips it)")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bias_audit)

    g = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference parameter gradients")
    g.add_argument("--dim", type=int, default=4)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--coords", type=int, default=None, help="probe this many random parameters (default: all)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
