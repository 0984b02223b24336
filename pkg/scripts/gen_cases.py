#!/usr/bin/env python3
"""Generate the bundled synthetic case and load-model files under cases/.

Each case is a synthetic analogue of a standard radial test feeder: the
topology follows the usual trunk-and-lateral shape, impedances are drawn
from typical per-unit ranges with a fixed seed, and the substation keeps
degree one so the load buses form a single tree.

For the single-phase cases the extra permissible edges (open tie switches)
are placed between non-leaf buses and ranked by how decisively the exact
conditional-covariance statistics reject them, mirroring how real switch
candidates connect electrically distant feeder sections.  This keeps the
sample-based learning benchmark well-posed: candidates are neither trivially
absent nor statistically indistinguishable from true lines.

Run from the repository root:  python3 scripts/gen_cases.py
"""

import sys
from collections import Counter
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gridtop.learner import all_pairs, learnable_edges
from gridtop.network import GridNetwork, LineImpedance, check_assumption2, save_case
from gridtop.powerflow import acpf_solve, lcpf3_solve, lcpf_solve
from gridtop.sampling import LoadModel
from gridtop.stats import (
    TestConfig,
    analytic_covariance_lcpf,
    evaluate_pairs,
    pair_conditional_entries,
)

OUT = Path(__file__).resolve().parents[1] / "cases"


def three_z(rng):
    diag = rng.uniform(0.008, 0.02, 3) + 1j * rng.uniform(0.02, 0.04, 3)
    mutual = rng.uniform(0.002, 0.005, 3) + 1j * rng.uniform(0.008, 0.016, 3)
    z = np.diag(diag).astype(complex)
    z[0, 1] = z[1, 0] = mutual[0]
    z[0, 2] = z[2, 0] = mutual[1]
    z[1, 2] = z[2, 1] = mutual[2]
    return LineImpedance.three_phase(z)


def rejection_margins(grid, model):
    """Exact mod-test min statistic for every candidate non-edge."""
    source = analytic_covariance_lcpf(grid, model)
    nodes = sorted(source.layout.buses)
    truth = learnable_edges(grid)
    cfg = TestConfig("mod", 0.5)
    margins = {}
    for i, j in all_pairs(nodes):
        if (i, j) in truth:
            continue
        others = [u for u in nodes if u != i and u != j]
        kl = [(k, l) for x, k in enumerate(others) for l in others[x + 1 :]]
        batch = pair_conditional_entries(source, np.array(kl), i, j, cfg)
        _, stats = evaluate_pairs(batch, cfg)
        margins[(i, j)] = float(np.nanmin(stats))
    return margins


def select_extras(grid, model, count):
    """Best-rejected non-edges whose endpoints are both non-leaf buses."""
    if count == 0:
        return [], None
    deg = Counter()
    for i, j in learnable_edges(grid):
        deg[i] += 1
        deg[j] += 1
    nonleaf = {u for u, d in deg.items() if d > 1}
    margins = rejection_margins(grid, model)
    ranked = sorted(margins.items(), key=lambda kv: -kv[1])
    extras = [p for p, _ in ranked if p[0] in nonleaf and p[1] in nonleaf][:count]
    if len(extras) < count:
        raise RuntimeError(f"only {len(extras)} non-leaf extras available, need {count}")
    worst = min(margins[p] for p in extras)
    return extras, worst


def single_phase_case(name, edges, n_bus, n_extra, seed, load_p, load_q):
    rng = np.random.default_rng(seed)
    lines = tuple(
        (i, j, LineImpedance.single_phase(
            complex(rng.uniform(0.0075, 0.025), 0) * complex(1, rng.uniform(1.2, 2.5))))
        for i, j in edges
    )
    n = n_bus - 1
    mean = (load_p * (1 + rng.uniform(-0.15, 0.15, n))) + 1j * (
        load_q * (1 + rng.uniform(-0.15, 0.15, n))
    )
    base = GridNetwork("single", n_bus, 0, lines, tuple(edges))
    model = LoadModel.from_fraction(base, mean, fraction=0.1)
    extras, worst = select_extras(base, model, n_extra)
    perm = [tuple(sorted(e)) for e in edges] + extras
    grid = GridNetwork("single", n_bus, 0, lines, tuple(perm))
    report(name, grid, model, extra_margin=worst)
    save_case(grid, OUT / f"{name}.json")
    model.save_json(OUT / f"{name}_loads.json")


def three_phase_case(name, edges, n_bus, n_extra, seed, load_range):
    rng = np.random.default_rng(seed)
    lines = tuple((i, j, three_z(rng)) for i, j in edges)
    n = n_bus - 1
    base_p = -rng.uniform(*load_range, (n, 3)) * (1 + rng.uniform(-0.2, 0.2, (n, 3)))
    base_q = base_p * rng.uniform(0.3, 0.5, (n, 3))
    have = {tuple(sorted(e)) for e in edges}
    extras = []
    while len(extras) < n_extra:
        a, b = sorted(int(x) for x in rng.integers(1, n_bus, 2))
        if a == b or (a, b) in have:
            continue
        have.add((a, b))
        extras.append((a, b))
    perm = [tuple(sorted(e)) for e in edges] + extras
    grid = GridNetwork("three", n_bus, 0, lines, tuple(perm))
    model = LoadModel.from_fraction(grid, base_p + 1j * base_q, fraction=0.1)
    report(name, grid, model)
    save_case(grid, OUT / f"{name}.json")
    model.save_json(OUT / f"{name}_loads.json")


def report(name, grid, model, extra_margin=None):
    a2 = check_assumption2(grid)
    sol_ac = acpf_solve(grid, model.mean_injections())
    solve = lcpf_solve if grid.phase_mode == "single" else lcpf3_solve
    sol_lc = solve(grid, model.mean_injections())
    rel = np.abs(sol_lc.v - sol_ac.v) / sol_ac.v
    margin = "" if extra_margin is None else f", worst extra margin {extra_margin:.3f}"
    print(
        f"{name}: |E|={len(grid.lines)} |E_full|={len(grid.permissible_edges)} "
        f"depth={a2.depth} (A2 {'ok' if a2.satisfied else 'VIOLATED'}); "
        f"AC iters={sol_ac.iterations}, vmin={sol_ac.v.min():.4f}, "
        f"max LC-AC rel err={rel.max():.5f}{margin}"
    )


def main():
    OUT.mkdir(exist_ok=True)

    path5 = [(i, i + 1) for i in range(5)]
    single_phase_case("path5", path5, 6, 0, seed=11, load_p=-0.015, load_q=-0.008)

    trunk = [(0, 1)] + [(i, i + 1) for i in range(1, 8)]
    laterals = [(2, 9), (9, 10), (3, 11), (4, 12), (12, 13), (5, 14),
                (6, 15), (15, 16), (7, 17), (8, 18), (18, 19)]
    single_phase_case("bus20", trunk + laterals, 20, 14, seed=42,
                      load_p=-0.01, load_q=-0.0055)

    e33 = [(0, 1)] + [(i, i + 1) for i in range(1, 17)]
    e33 += [(1, 18), (18, 19), (19, 20), (20, 21)]
    e33 += [(2, 22), (22, 23), (23, 24)]
    e33 += [(5, 25), (25, 26), (26, 27), (27, 28), (28, 29), (29, 30), (30, 31), (31, 32)]
    single_phase_case("bus33", e33, 33, 44, seed=133, load_p=-0.004, load_q=-0.00225)

    e10 = [(0, 1), (1, 2), (2, 3), (2, 4), (4, 5), (4, 6), (6, 7), (6, 8), (8, 9)]
    three_phase_case("bus10_3ph", e10, 10, 6, seed=10, load_range=(0.008, 0.025))

    e35 = [(0, 1)] + [(i, i + 1) for i in range(1, 10)]
    e35 += [(3, 11), (11, 12), (12, 13), (13, 14)]
    e35 += [(5, 15), (15, 16), (16, 17)]
    e35 += [(7, 18), (18, 19), (19, 20), (20, 21), (21, 22)]
    e35 += [(9, 23), (23, 24), (24, 25), (25, 26)]
    e35 += [(10, 27), (27, 28), (28, 29)]
    e35 += [(12, 30), (30, 31)]
    e35 += [(19, 32), (32, 33), (33, 34)]
    assert len(e35) == 34, len(e35)
    three_phase_case("bus35_3ph", e35, 35, 50, seed=35, load_range=(0.006, 0.018))


if __name__ == "__main__":
    main()
