"""End-to-end experiment harness: generate -> covariance -> learn -> score.

A plan sweeps sample sizes, solvers, and test/threshold settings over one
case, with several independently seeded trials per cell.  Within a trial the
same injection draws feed every solver, so differences between cells at the
same (trial, n) are attributable to the solver and test alone; the injection
hashes stored per cell let callers verify this.

``run_experiment`` writes three artifacts: ``results.csv`` (one row per
cell, the plot data), ``results.json`` (full per-trial detail), and
``timings.json``.  The first two are bit-deterministic for a fixed plan;
wall-clock times live only in the third.  Unless disabled, error-vs-samples
figures are rendered alongside the delimited output.
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .learner import LearnerConfig, edge_error, learn, learnable_edges, learner_permissible
from .network import check_assumption2, load_case
from .powerflow import NonConvergenceError
from .sampling import SOLVER_TAGS, LoadModel, draw_injections, _solve_batch
from .stats import CovarianceSource, SampleMatrix, TestConfig, VariableLayout, analytic_covariance_lcpf


class PlanError(ValueError):
    """Invalid experiment plan."""


@dataclass(frozen=True)
class TestSpec:
    __test__ = False  # not a pytest class, despite the name

    test: str
    tau: float


@dataclass(frozen=True)
class ExperimentPlan:
    """Sweep definition; paths are resolved relative to the plan file."""

    case: Path
    loads: Path
    solvers: tuple[str, ...]
    sample_sizes: tuple[int, ...]
    tests: tuple[TestSpec, ...]
    trials: int
    seed: int
    efull: str = "case"
    oracle: bool = False
    strict_stage2: bool = False

    def __post_init__(self):
        if not self.tests:
            raise PlanError("plan needs at least one test spec")
        if self.efull not in ("case", "all"):
            raise PlanError(f"efull must be 'case' or 'all', got {self.efull!r}")
        if not self.oracle:
            if not self.solvers or not self.sample_sizes:
                raise PlanError("non-oracle plan needs solvers and sample sizes")
            if self.trials < 1:
                raise PlanError("plan needs at least one trial")
            bad = [s for s in self.solvers if s not in SOLVER_TAGS]
            if bad:
                raise PlanError(f"unknown solver tags {bad}")
            if any(n < 2 for n in self.sample_sizes):
                raise PlanError("sample sizes must be at least 2")

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentPlan":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise PlanError(f"{path}: not valid JSON: {exc}") from exc

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else path.parent / p

        try:
            return cls(
                case=resolve(data["case"]),
                loads=resolve(data["loads"]),
                solvers=tuple(data.get("solvers", ())),
                sample_sizes=tuple(int(n) for n in data.get("sample_sizes", ())),
                tests=tuple(TestSpec(t["test"], float(t["tau"])) for t in data["tests"]),
                trials=int(data.get("trials", 1)),
                seed=int(data["seed"]),
                efull=data.get("efull", "case"),
                oracle=bool(data.get("oracle", False)),
                strict_stage2=bool(data.get("strict_stage2", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, PlanError):
                raise
            raise PlanError(f"{path}: malformed plan: {exc}") from exc

    def to_jsonable(self) -> dict:
        return {
            "case": str(self.case),
            "loads": str(self.loads),
            "solvers": list(self.solvers),
            "sample_sizes": list(self.sample_sizes),
            "tests": [{"test": t.test, "tau": t.tau} for t in self.tests],
            "trials": self.trials,
            "seed": self.seed,
            "efull": self.efull,
            "oracle": self.oracle,
            "strict_stage2": self.strict_stage2,
        }


@dataclass
class CellResult:
    """Aggregates for one (n, solver, test, tau) cell across trials."""

    n_samples: int
    solver: str
    test: str
    tau: float
    errors: tuple[float, ...] = ()
    n_tests: tuple[int, ...] = ()
    tree_flags: tuple[bool, ...] = ()
    injection_hashes: tuple[str, ...] = ()
    wall_time: float = 0.0
    failed: bool = False
    fail_reason: str | None = None

    @property
    def mean_error(self) -> float | None:
        return float(np.mean(self.errors)) if self.errors else None

    @property
    def stderr(self) -> float | None:
        if not self.errors:
            return None
        if len(self.errors) < 2:
            return 0.0
        return float(np.std(self.errors, ddof=1) / np.sqrt(len(self.errors)))

    @property
    def mean_tests(self) -> float | None:
        return float(np.mean(self.n_tests)) if self.n_tests else None

    def to_jsonable(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "solver": self.solver,
            "test": self.test,
            "tau": self.tau,
            "mean_error": self.mean_error,
            "stderr": self.stderr,
            "mean_tests": self.mean_tests,
            "errors": list(self.errors),
            "n_tests": list(self.n_tests),
            "tree_flags": list(self.tree_flags),
            "injection_hashes": list(self.injection_hashes),
            "failed": self.failed,
            "fail_reason": self.fail_reason,
        }


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    cells: list[CellResult] = field(default_factory=list)
    overhead_time: float = 0.0

    @property
    def failed_cells(self) -> list[CellResult]:
        return [c for c in self.cells if c.failed]


def _hash_injections(draws: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(draws).tobytes()).hexdigest()


def run_experiment(plan: ExperimentPlan, out_dir: str | Path | None = None,
                   figures: bool = True) -> ExperimentResult:
    """Execute the sweep; optionally write CSV/JSON artifacts and figures.

    AC non-convergence marks the affected cells failed and the run
    continues.  With ``oracle`` set, the exact analytic covariance replaces
    sampling (single-phase cases only) and cells carry n_samples = 0.
    """
    grid = load_case(plan.case)
    model = LoadModel.from_json(plan.loads, grid)
    a2 = check_assumption2(grid)
    if not a2.satisfied:
        warnings.warn(
            f"load-bus tree depth is {a2.depth} (needs > 3); recovery guarantees void"
        )
    truth = learnable_edges(grid)
    if not truth:
        raise PlanError("case has no learnable edges (every line touches the reference)")
    permissible = None if plan.efull == "all" else learner_permissible(grid)
    result = ExperimentResult(plan=plan)
    t_start = time.perf_counter()

    if plan.oracle:
        source = analytic_covariance_lcpf(grid, model)
        for spec in plan.tests:
            cfg = LearnerConfig(
                test=TestConfig(spec.test, spec.tau), strict_stage2=plan.strict_stage2
            )
            t0 = time.perf_counter()
            topo = learn(source, permissible, cfg)
            cell = CellResult(
                n_samples=0,
                solver="oracle",
                test=spec.test,
                tau=spec.tau,
                errors=(edge_error(topo.edges, truth),),
                n_tests=(topo.n_tests,),
                tree_flags=(topo.is_tree,),
                injection_hashes=(),
                wall_time=time.perf_counter() - t0,
            )
            result.cells.append(cell)
    else:
        _run_sampled(plan, grid, model, truth, permissible, result)

    result.overhead_time = time.perf_counter() - t_start - sum(
        c.wall_time for c in result.cells
    )
    if out_dir is not None:
        write_results(result, out_dir, figures=figures)
    return result


def _run_sampled(plan, grid, model, truth, permissible, result):
    n_max = max(plan.sample_sizes)
    layout = VariableLayout.for_grid(grid)
    cells: dict[tuple, CellResult] = {}
    for solver in plan.solvers:
        for n in plan.sample_sizes:
            for spec in plan.tests:
                key = (solver, n, spec.test, spec.tau)
                cells[key] = CellResult(n_samples=n, solver=solver, test=spec.test, tau=spec.tau)

    for trial in range(plan.trials):
        draws = draw_injections(model, n_max, (plan.seed, trial))
        hashes = {n: _hash_injections(draws[:n]) for n in plan.sample_sizes}
        for solver in plan.solvers:
            try:
                v, th = _solve_batch(grid, solver, draws)
            except (NonConvergenceError, ValueError) as exc:
                for n in plan.sample_sizes:
                    for spec in plan.tests:
                        cell = cells[(solver, n, spec.test, spec.tau)]
                        cell.failed = True
                        cell.fail_reason = str(exc)
                continue
            stacked = np.stack([v, th], axis=-1)
            data = np.moveaxis(stacked, 2, 0).reshape(n_max, -1)
            for n in plan.sample_sizes:
                source = CovarianceSource.from_samples(SampleMatrix(data[:n], layout))
                for spec in plan.tests:
                    cell = cells[(solver, n, spec.test, spec.tau)]
                    cfg = LearnerConfig(
                        test=TestConfig(spec.test, spec.tau),
                        strict_stage2=plan.strict_stage2,
                    )
                    t0 = time.perf_counter()
                    topo = learn(source, permissible, cfg)
                    cell.wall_time += time.perf_counter() - t0
                    cell.errors += (edge_error(topo.edges, truth),)
                    cell.n_tests += (topo.n_tests,)
                    cell.tree_flags += (topo.is_tree,)
                    cell.injection_hashes += (hashes[n],)

    for solver in plan.solvers:
        for n in plan.sample_sizes:
            for spec in plan.tests:
                result.cells.append(cells[(solver, n, spec.test, spec.tau)])


# -- artifacts -----------------------------------------------------------------


def emit_plotdata(result: ExperimentResult) -> str:
    """CSV rows (n_samples, solver, test, tau, mean_err, stderr), one per cell.

    Doubles carry 17 significant digits so parsing the file reproduces the
    values bit-exactly.
    """
    lines = ["n_samples,solver,test,tau,mean_err,stderr"]
    for c in result.cells:
        me = "" if c.mean_error is None else f"{c.mean_error:.17g}"
        se = "" if c.stderr is None else f"{c.stderr:.17g}"
        lines.append(f"{c.n_samples},{c.solver},{c.test},{c.tau:.17g},{me},{se}")
    return "\n".join(lines) + "\n"


def parse_plotdata(text: str) -> list[dict]:
    rows = []
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(header, vals))
        row["n_samples"] = int(row["n_samples"])
        row["tau"] = float(row["tau"])
        row["mean_err"] = None if row["mean_err"] == "" else float(row["mean_err"])
        row["stderr"] = None if row["stderr"] == "" else float(row["stderr"])
        rows.append(row)
    return rows


def write_results(result: ExperimentResult, out_dir: str | Path, figures: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(emit_plotdata(result))
    payload = {
        "plan": result.plan.to_jsonable(),
        "cells": [c.to_jsonable() for c in result.cells],
    }
    (out / "results.json").write_text(json.dumps(payload, indent=1) + "\n")
    timings = {
        "overhead_seconds": result.overhead_time,
        "cells": [
            {
                "n_samples": c.n_samples,
                "solver": c.solver,
                "test": c.test,
                "tau": c.tau,
                "wall_time": c.wall_time,
            }
            for c in result.cells
        ],
    }
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n")
    if figures:
        render_figures(result, out / "figures")


def render_figures(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    """Error-vs-sample-size figures, one per solver, next to the CSV output."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    written: list[Path] = []
    solvers = sorted({c.solver for c in result.cells if c.n_samples > 0})
    if not solvers:
        return written
    out.mkdir(parents=True, exist_ok=True)
    for solver in solvers:
        fig, ax = plt.subplots(figsize=(6, 4))
        groups: dict[tuple[str, float], list[CellResult]] = {}
        for c in result.cells:
            if c.solver == solver and not c.failed and c.n_samples > 0:
                groups.setdefault((c.test, c.tau), []).append(c)
        for (test, tau), cs in sorted(groups.items()):
            cs = sorted(cs, key=lambda c: c.n_samples)
            ns = [c.n_samples for c in cs]
            errs = [c.mean_error for c in cs]
            bars = [c.stderr for c in cs]
            ax.errorbar(ns, errs, yerr=bars, marker="o", capsize=3,
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
    return written
