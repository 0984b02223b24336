"""Three-stage topology learner on exact covariance oracles."""

import numpy as np
import pytest

from gridtop.learner import (
    LearnerConfig,
    LearnerError,
    PartialTopology,
    _record_attachment,
    all_pairs,
    attach_leaves_deg1,
    attach_leaves_deg2plus,
    detect_nonleaf_edges,
    edge_error,
    learn,
    learnable_edges,
    learner_permissible,
)
from gridtop.network import GridNetwork, LineImpedance
from gridtop.stats import TestConfig, analytic_covariance_lcpf

from conftest import random_load_model, random_radial_grid, single_z

ORACLE_CFG = LearnerConfig(test=TestConfig("mod", 1e-6))


def z1(re=0.01, im=0.02):
    return LineImpedance.single_phase(complex(re, im))


def grid_from_edges(edges, n_bus, seed=0):
    rng = np.random.default_rng(seed)
    lines = tuple((i, j, single_z(rng)) for i, j in edges)
    return GridNetwork("single", n_bus, 0, lines, tuple(edges))


def oracle(grid, seed=0):
    return analytic_covariance_lcpf(grid, random_load_model(grid, seed))


@pytest.fixture(scope="module")
def path5():
    grid = grid_from_edges([(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], 6)
    return grid, oracle(grid)


@pytest.fixture(scope="module")
def spider():
    """Center bus 1 carries two two-bus legs (2-3, 4-5) and a direct leaf 6:
    bus 1 is the only non-leaf with several non-leaf neighbors, so leaf 6
    can only be attached in the last stage."""
    grid = grid_from_edges([(0, 3), (1, 2), (2, 3), (1, 4), (4, 5), (1, 6)], 7)
    return grid, oracle(grid, seed=1)


# -- stage 1 --------------------------------------------------------------------


def test_stage1_path5_finds_inner_edges(path5):
    grid, src = path5
    state = detect_nonleaf_edges(src, all_pairs(range(1, 6)), ORACLE_CFG)
    assert sorted(state.edges) == [(2, 3), (3, 4)]
    assert state.v_nl == {2, 3, 4}
    assert state.v1_nl == {2, 4}
    assert state.v2_nl == {3}


def test_stage1_true_edges_only_efull(path5):
    grid, src = path5
    permissible = [(i, j) for i, j in learnable_edges(grid)]
    state = detect_nonleaf_edges(src, permissible, ORACLE_CFG)
    assert sorted(state.edges) == [(2, 3), (3, 4)]
    # 4 candidates, at most C(3,2) witness pairs each
    assert state.n_tests <= 4 * 3


def test_stage1_no_leaf_enters_vnl():
    for seed in range(10):
        grid = random_radial_grid(int(6 + seed % 6), seed)
        src = oracle(grid, seed)
        truth = learnable_edges(grid)
        deg = {}
        for i, j in truth:
            deg[i] = deg.get(i, 0) + 1
            deg[j] = deg.get(j, 0) + 1
        leaves = {u for u in src.layout.buses if deg.get(u, 0) <= 1}
        state = detect_nonleaf_edges(src, all_pairs(src.layout.buses), ORACLE_CFG)
        assert not (state.v_nl & leaves), seed


# -- stages 2 & 3 ----------------------------------------------------------------


def test_leaf_attachment_on_path5(path5):
    grid, src = path5
    permissible = all_pairs(range(1, 6))
    s1 = detect_nonleaf_edges(src, permissible, ORACLE_CFG)
    s2 = attach_leaves_deg1(src, s1, permissible, ORACLE_CFG)
    new = {e: t for e, t in s2.edges.items() if e not in s1.edges}
    assert new == {(1, 2): "leaf_deg1", (4, 5): "leaf_deg1"}
    assert s2.attached == {1, 5}


def test_spider_center_leaf_needs_stage3(spider):
    grid, src = spider
    permissible = all_pairs(range(1, 7))
    s1 = detect_nonleaf_edges(src, permissible, ORACLE_CFG)
    assert sorted(s1.edges) == [(1, 2), (1, 4)]
    assert s1.v2_nl == {1}
    s2 = attach_leaves_deg1(src, s1, permissible, ORACLE_CFG)
    assert {e for e in s2.edges if e not in s1.edges} == {(2, 3), (4, 5)}
    assert 6 not in s2.attached  # parent sits in the higher-degree set
    s3 = attach_leaves_deg2plus(src, s2, permissible, ORACLE_CFG)
    assert s3.edges[(1, 6)] == "leaf_deg2plus"
    topo = learn(src, None, ORACLE_CFG)
    assert set(topo.edges) == learnable_edges(grid)
    assert topo.is_tree


def test_stage3_rejects_two_hop_candidate():
    """A second higher-degree bus two hops from the leaf must fail at least
    one witness pair and stay rejected."""
    edges = [(0, 3), (1, 2), (2, 3), (1, 4), (4, 5), (1, 6), (2, 7), (7, 8), (2, 9)]
    grid = grid_from_edges(edges, 10, seed=3)
    src = oracle(grid, seed=3)
    permissible = list(learnable_edges(grid)) + [(2, 6)]  # wrong parent for 6
    s1 = detect_nonleaf_edges(src, permissible, ORACLE_CFG)
    assert {1, 2} <= s1.v2_nl
    s2 = attach_leaves_deg1(src, s1, permissible, ORACLE_CFG)
    s3 = attach_leaves_deg2plus(src, s2, permissible, ORACLE_CFG)
    assert (1, 6) in s3.edges and (2, 6) not in s3.edges


def test_strict_stage2_matches_default_on_oracle(path5):
    grid, src = path5
    strict = LearnerConfig(test=TestConfig("mod", 1e-6), strict_stage2=True)
    assert learn(src, None, strict).edges == learn(src, None, ORACLE_CFG).edges


# -- end to end ------------------------------------------------------------------


def test_exact_recovery_random_trees():
    for seed in range(30):
        m = int(5 + seed % 8)
        grid = random_radial_grid(m, seed)
        src = oracle(grid, seed)
        topo = learn(src, None, ORACLE_CFG)
        assert set(topo.edges) == learnable_edges(grid), seed
        assert topo.is_tree
        assert not topo.unattached


def test_bundled_cases_recovered_exactly(cases_dir):
    from gridtop.network import load_case
    from gridtop.sampling import LoadModel

    for name in ("path5", "bus20", "bus33"):
        grid = load_case(cases_dir / f"{name}.json")
        model = LoadModel.from_json(cases_dir / f"{name}_loads.json", grid)
        src = analytic_covariance_lcpf(grid, model)
        topo = learn(src, learner_permissible(grid), ORACLE_CFG)
        assert edge_error(topo.edges, learnable_edges(grid)) == 0.0, name


def test_monotone_restriction_never_adds_spurious():
    """Shrinking the permissible set can only remove candidates."""
    for seed in (2, 7, 13):
        grid = random_radial_grid(8, seed)
        src = oracle(grid, seed)
        truth = learnable_edges(grid)
        full = set(learn(src, None, ORACLE_CFG).edges)
        restricted = set(learn(src, sorted(truth), ORACLE_CFG).edges)
        assert restricted - truth <= full - truth
        assert restricted == truth


def test_test_count_bound():
    """Total quartet tests stay within |E_full| N^2 + N |E_full| N."""
    for seed, m in ((0, 8), (1, 10)):
        grid = random_radial_grid(m, seed)
        src = oracle(grid, seed)
        n = len(src.layout.buses)
        efull = all_pairs(src.layout.buses)
        topo = learn(src, efull, ORACLE_CFG)
        bound = len(efull) * n**2 + n * len(efull) * n
        assert topo.n_tests <= bound


def test_determinism_including_diagnostics():
    grid = random_radial_grid(9, 21)
    src = oracle(grid, 21)
    a = learn(src, None, ORACLE_CFG)
    b = learn(src, None, ORACLE_CFG)
    assert a == b


def test_edge_error_examples():
    truth = {(i, i + 1) for i in range(19)}
    assert edge_error(truth, truth) == 0.0
    missing = set(list(truth)[1:])
    assert edge_error(missing, truth) == pytest.approx(1 / 19)
    assert edge_error(missing | {(0, 5)}, truth) == pytest.approx(2 / 19)
    with pytest.raises(LearnerError):
        edge_error(truth, set())


def test_permissible_edges_must_reference_observed_buses(path5):
    _, src = path5
    with pytest.raises(LearnerError, match="without observations"):
        learn(src, [(1, 9)], ORACLE_CFG)


def test_three_phase_error_decreases_with_samples(cases_dir):
    """All-pairs reconstruction of the 10-bus three-phase case improves from
    1e3 to 1e5 linearized samples (trend, averaged over trials)."""
    from gridtop.network import load_case
    from gridtop.sampling import LoadModel, draw_injections, _solve_batch
    from gridtop.stats import CovarianceSource, SampleMatrix, VariableLayout

    grid = load_case(cases_dir / "bus10_3ph.json")
    model = LoadModel.from_json(cases_dir / "bus10_3ph_loads.json", grid)
    truth = learnable_edges(grid)
    layout = VariableLayout.for_grid(grid)
    cfg = LearnerConfig(test=TestConfig("mod", 0.03))
    errs = {1000: [], 100_000: []}
    for trial in range(3):
        draws = draw_injections(model, 100_000, (31, trial))
        v, th = _solve_batch(grid, "lc3", draws)
        data = np.moveaxis(np.stack([v, th], axis=-1), 2, 0).reshape(100_000, -1)
        for n in errs:
            src = CovarianceSource.from_samples(SampleMatrix(data[:n], layout))
            errs[n].append(edge_error(learn(src, None, cfg).edges, truth))
    assert np.mean(errs[100_000]) < np.mean(errs[1000])


def test_oracle_learn_runtime_under_one_second():
    import time

    grid = random_radial_grid(12, 99)
    src = oracle(grid, 99)
    t0 = time.perf_counter()
    learn(src, None, ORACLE_CFG)
    elapsed = time.perf_counter() - t0
    print(f"exact-oracle learn on a 12-load-bus tree: {elapsed * 1000:.0f} ms")
    assert elapsed < 1.0


def test_ambiguous_attachment_picks_strongest_and_flags():
    state = PartialTopology(nodes=(1, 2, 3, 9))
    _record_attachment(state, 9, [(0.02, 3), (0.005, 2)], "leaf_deg1")
    assert (2, 9) in state.edges
    assert state.ambiguous == [(9, 2, (3,))]
