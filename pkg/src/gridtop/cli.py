"""Command-line interface.

Subcommands cover the full pipeline: ``pf`` (one power-flow solve),
``generate`` (Monte-Carlo voltage samples to CSV), ``cov`` (covariance
estimation), ``citest`` (a single quartet test), ``learn`` (topology
reconstruction), ``eval`` (experiment sweeps), and ``plot`` (figures from a
results CSV).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .experiment import ExperimentPlan, PlanError, parse_plotdata, run_experiment
from .learner import LearnerConfig, LearnerError, all_pairs, learn, learner_permissible
from .network import CaseError, check_assumption2, load_case
from .powerflow import InjectionProfile, PowerFlowError, acpf_solve, lcpf3_solve, lcpf_solve
from .sampling import LoadModel, LoadModelError, generate_samples, read_samples_csv
from .stats import (
    CovarianceSource,
    StatsError,
    TestConfig,
    ci_test,
    load_covariance_json,
    quartet,
    save_covariance_json,
)

_CLI_ERRORS = (CaseError, LoadModelError, StatsError, LearnerError, PlanError,
               PowerFlowError, FileNotFoundError, ValueError)


def _cmd_pf(args) -> int:
    grid = load_case(args.case)
    inj = InjectionProfile.from_json_obj(grid, json.loads(Path(args.inj).read_text()))
    if args.model == "lc":
        sol = lcpf_solve(grid, inj)
    elif args.model == "lc3":
        sol = lcpf3_solve(grid, inj)
    else:
        sol = acpf_solve(grid, inj, tol=args.tol, max_iter=args.max_iter)
    print(json.dumps(sol.to_dict()))
    return 0


def _cmd_generate(args) -> int:
    grid = load_case(args.case)
    model = LoadModel.from_json(args.load, grid)
    samples = generate_samples(grid, model, args.n, args.model, args.seed)
    samples.write_csv(args.out)
    print(f"wrote {samples.n_samples} samples ({samples.matrix.layout.n_vars} columns) "
          f"to {args.out}", file=sys.stderr)
    return 0


def _cmd_cov(args) -> int:
    matrix = read_samples_csv(args.samples)
    source = CovarianceSource.from_samples(matrix)
    save_covariance_json(source, args.out)
    print(f"wrote {source.matrix.shape[0]}x{source.matrix.shape[1]} covariance to {args.out}",
          file=sys.stderr)
    return 0


def _cmd_citest(args) -> int:
    source = load_covariance_json(args.cov)
    try:
        k, l, i, j = (int(x) for x in args.quartet.split(","))
    except ValueError:
        print("--quartet expects four comma-separated bus ids: k,l,i,j", file=sys.stderr)
        return 2
    cfg = TestConfig(test=args.test, tau=args.tau)
    stat = quartet(source, k, l, i, j, cfg)
    res = ci_test(stat, cfg)
    print(json.dumps({
        "quartet": [k, l, i, j],
        "test": cfg.test,
        "tau": cfg.tau,
        "inv_pair_entry": stat.inv_pair_entry,
        "inv_single_i_entry": stat.inv_single_i_entry,
        "inv_single_j_entry": stat.inv_single_j_entry,
        "sigma_kl": stat.sigma_kl,
        "statistic": res.statistic,
        "indeterminate": res.indeterminate,
        "verdict": "independent" if res.independent else "dependent",
    }))
    return 0


def _cmd_learn(args) -> int:
    source = load_covariance_json(args.cov)
    grid = load_case(args.case)
    a2 = check_assumption2(grid)
    if not a2.satisfied:
        print(
            f"warning: load-bus tree depth is {a2.depth} (needs > 3); "
            "recovery guarantees do not hold",
            file=sys.stderr,
        )
    if args.efull == "all":
        permissible = all_pairs(source.layout.buses)
    else:
        permissible = learner_permissible(grid)
    cfg = LearnerConfig(
        test=TestConfig(test=args.test, tau=args.tau),
        strict_stage2=args.strict_stage2,
    )
    topo = learn(source, permissible, cfg)
    Path(args.out).write_text(json.dumps(topo.to_dict(), indent=1) + "\n")
    print(f"learned {len(topo.edges)} edges, is_tree={topo.is_tree}, "
          f"{topo.n_tests} quartet tests -> {args.out}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    plan = ExperimentPlan.from_json(args.plan)
    result = run_experiment(plan, out_dir=args.out, figures=not args.no_figures)
    failed = result.failed_cells
    for cell in failed:
        print(f"cell failed: n={cell.n_samples} solver={cell.solver} "
              f"test={cell.test} tau={cell.tau}: {cell.fail_reason}", file=sys.stderr)
    print(f"{len(result.cells)} cells -> {args.out} ({len(failed)} failed)", file=sys.stderr)
    return 1 if failed else 0


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in parse_plotdata(Path(args.results).read_text())
            if r["mean_err"] is not None and r["n_samples"] > 0]
    if not rows:
        print("no plottable rows in results file", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for solver in sorted({r["solver"] for r in rows}):
        fig, ax = plt.subplots(figsize=(6, 4))
        keys = sorted({(r["test"], r["tau"]) for r in rows if r["solver"] == solver})
        for test, tau in keys:
            pts = sorted(
                (r["n_samples"], r["mean_err"], r["stderr"] or 0.0)
                for r in rows
                if r["solver"] == solver and r["test"] == test and r["tau"] == tau
            )
            ax.errorbar([p[0] for p in pts], [p[1] for p in pts],
                        yerr=[p[2] for p in pts], marker="o", capsize=3,
                        label=f"{test}, tau={tau:g}")
        ax.set_xscale("log")
        ax.set_xlabel("samples")
        ax.set_ylabel("relative edge error")
        ax.set_title(f"topology error vs sample size ({solver})")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"error_vs_n_{solver}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    print(f"wrote {len(written)} figure(s) to {out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridtop", description=__doc__)
    ap.add_argument("--version", action="version", version=f"gridtop {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    pf = sub.add_parser("pf", help="solve one power flow and print the voltages as JSON")
    pf.add_argument("--case", required=True)
    pf.add_argument("--inj", required=True, help="JSON array of per-bus [p,q] (or 3x[p,q])")
    pf.add_argument("--model", required=True, choices=["lc", "lc3", "ac"])
    pf.add_argument("--tol", type=float, default=1e-10)
    pf.add_argument("--max-iter", type=int, default=100)
    pf.set_defaults(func=_cmd_pf)

    gen = sub.add_parser("generate", help="draw Monte-Carlo voltage samples to CSV")
    gen.add_argument("--case", required=True)
    gen.add_argument("--load", required=True, help="load model JSON")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--model", required=True, choices=["lc", "lc3", "ac"])
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_generate)

    cov = sub.add_parser("cov", help="estimate a covariance matrix from samples")
    cov.add_argument("--samples", required=True)
    cov.add_argument("--out", required=True)
    cov.set_defaults(func=_cmd_cov)

    ct = sub.add_parser("citest", help="run one quartet conditional-independence test")
    ct.add_argument("--cov", required=True)
    ct.add_argument("--quartet", required=True, help="k,l,i,j bus ids")
    ct.add_argument("--test", default="mod", choices=["abs", "rel", "mod"])
    ct.add_argument("--tau", type=float, required=True)
    ct.set_defaults(func=_cmd_citest)

    ln = sub.add_parser("learn", help="reconstruct the operational topology")
    ln.add_argument("--cov", required=True)
    ln.add_argument("--case", required=True)
    ln.add_argument("--efull", default="case", choices=["all", "case"])
    ln.add_argument("--test", default="mod", choices=["abs", "rel", "mod"])
    ln.add_argument("--tau", type=float, default=0.1)
    ln.add_argument("--strict-stage2", action="store_true")
    ln.add_argument("--out", required=True)
    ln.set_defaults(func=_cmd_learn)

    ev = sub.add_parser("eval", help="run an experiment plan end to end")
    ev.add_argument("--plan", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--no-figures", action="store_true")
    ev.set_defaults(func=_cmd_eval)

    pl = sub.add_parser("plot", help="render figures from a results.csv")
    pl.add_argument("--results", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _CLI_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
