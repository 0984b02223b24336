"""Covariance estimation, the analytic voltage covariance, and quartet tests."""

import itertools

import numpy as np
import pytest

from gridtop.network import GridNetwork, LineImpedance
from gridtop.sampling import LoadModel, generate_samples
from gridtop.stats import (
    CovarianceAccumulator,
    CovarianceSource,
    StatsError,
    TestConfig,
    VariableLayout,
    analytic_covariance_lcpf,
    analytic_covariance_lcpf_complex,
    ci_test,
    empirical_covariance,
    inverse_pattern_check,
    load_covariance_json,
    quartet,
    save_covariance_json,
)

from conftest import random_load_model, random_radial_grid


def z1(re=0.01, im=0.02):
    return LineImpedance.single_phase(complex(re, im))


def path_grid(n_nonsub, zs=None):
    edges = tuple((i, i + 1) for i in range(n_nonsub))
    zs = zs or [z1()] * n_nonsub
    return GridNetwork("single", n_nonsub + 1, 0,
                       tuple((i, j, z) for (i, j), z in zip(edges, zs)), edges)


# -- empirical covariance -------------------------------------------------------


def test_identical_rows_zero_covariance():
    cov, mean = empirical_covariance(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert np.array_equal(cov, np.zeros((2, 2)))
    assert np.array_equal(mean, [1.0, 2.0])


def test_two_point_hand_value():
    cov, _ = empirical_covariance(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert np.array_equal(cov, np.full((2, 2), 0.5))


def test_covariance_needs_two_rows():
    with pytest.raises(StatsError):
        empirical_covariance(np.array([[1.0, 2.0]]))


def test_large_sample_matches_known_sigma():
    rng = np.random.default_rng(0)
    sigma = np.array([[2.0, 0.6], [0.6, 1.0]])
    x = rng.multivariate_normal([0, 0], sigma, size=100_000)
    cov, _ = empirical_covariance(x)
    assert np.abs((cov - sigma) / sigma).max() < 0.05


def test_accumulator_merge_equals_concat():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(300, 4)), rng.normal(size=(200, 4))
    acc_a = CovarianceAccumulator(4)
    acc_a.update(a)
    acc_b = CovarianceAccumulator(4)
    acc_b.update(b)
    merged = acc_a.merged(acc_b)
    direct, _ = empirical_covariance(np.vstack([a, b]))
    scale = np.abs(direct).max()
    assert np.abs(merged.covariance() - direct).max() <= 1e-12 * scale


def test_accumulator_merge_associative():
    rng = np.random.default_rng(2)
    chunks = [rng.normal(size=(n, 3)) for n in (50, 80, 120)]
    accs = []
    for c in chunks:
        acc = CovarianceAccumulator(3)
        acc.update(c)
        accs.append(acc)
    left = accs[0].merged(accs[1]).merged(accs[2])
    right = accs[0].merged(accs[1].merged(accs[2]))
    scale = np.abs(left.covariance()).max()
    assert np.abs(left.covariance() - right.covariance()).max() <= 1e-12 * scale


# -- analytic covariance --------------------------------------------------------


def test_two_bus_hand_formulas():
    """v = r p, theta = x p when only p fluctuates."""
    r, x, s2 = 0.01, 0.02, 1e-4
    grid = GridNetwork("single", 2, 0, ((0, 1, z1(r, x)),), ((0, 1),))
    model = LoadModel(
        "single", (1,), np.array([[-0.02, -0.008]]),
        np.array([[[s2, 0.0], [0.0, 0.0]]]),
    )
    omega = analytic_covariance_lcpf(grid, model).matrix
    expected = np.array([[r * r, r * x], [r * x, x * x]]) * s2
    assert np.abs(omega - expected).max() <= 1e-18


def test_zero_load_covariance_gives_zero():
    grid = path_grid(3)
    model = LoadModel.from_fraction(grid, np.full(3, -0.02 - 0.01j), fraction=0.0)
    assert np.all(analytic_covariance_lcpf(grid, model).matrix == 0.0)


def test_complex_form_cross_check():
    """The complex covariance assembled from the stacked real blocks matches
    the closed-form weighted-Laplacian expression."""
    grid = random_radial_grid(6, 5)
    model = random_load_model(grid, 5)
    src = analytic_covariance_lcpf(grid, model)
    oc = analytic_covariance_lcpf_complex(grid, model)
    lay = src.layout
    buses = grid.non_reference_buses
    vv = np.array([[src.matrix[lay.index(a, "a", "v"), lay.index(b, "a", "v")] for b in buses] for a in buses])
    tt = np.array([[src.matrix[lay.index(a, "a", "th"), lay.index(b, "a", "th")] for b in buses] for a in buses])
    vt = np.array([[src.matrix[lay.index(a, "a", "v"), lay.index(b, "a", "th")] for b in buses] for a in buses])
    rebuilt = vv + tt + 1j * (vt - vt.T)
    assert np.abs(rebuilt - oc).max() <= 1e-15 * np.abs(oc).max()


def test_analytic_matches_monte_carlo_one_million():
    """1e6 linear samples, accumulated in chunks, land within 2% of the
    analytic covariance."""
    grid = random_radial_grid(6, 6)
    model = random_load_model(grid, 6)
    layout = VariableLayout.for_grid(grid)
    acc = CovarianceAccumulator(layout.n_vars)
    for chunk in range(10):
        ss = generate_samples(grid, model, 100_000, "lc", seed=(6, chunk))
        acc.update(ss.matrix.data)
    omega = analytic_covariance_lcpf(grid, model).matrix
    scale = np.abs(omega).max()
    assert np.abs(acc.covariance() - omega).max() / scale < 0.02


def test_within_bus_pq_correlation_propagates():
    """The real stacked form sees the p-q cross term (the complex shortcut
    cannot), and matches sampling."""
    grid = path_grid(2)
    sp, sq, rho = 2e-3, 1e-3, 0.7
    cov = np.array([[sp**2, rho * sp * sq], [rho * sp * sq, sq**2]])
    model = LoadModel("single", grid.non_reference_buses,
                      np.tile([-0.02, -0.008], (2, 1)), np.tile(cov, (2, 1, 1)))
    omega = analytic_covariance_lcpf(grid, model).matrix
    ss = generate_samples(grid, model, 200_000, "lc", seed=77)
    emp = np.cov(ss.matrix.data.T)
    assert np.abs(emp - omega).max() / np.abs(omega).max() < 0.05


# -- inverse pattern ------------------------------------------------------------


def test_pattern_path5_far_blocks_vanish():
    grid = path_grid(5)
    model = random_load_model(grid, 7)
    rep = inverse_pattern_check(grid, model)
    assert rep.pair_class[(1, 4)] == "far"
    assert rep.pair_class[(1, 5)] == "far"
    assert rep.pair_class[(2, 5)] == "far"
    assert rep.pair_class[(1, 3)] == "two_hop"
    assert rep.far_max <= 1e-9 * rep.near_min


def test_pattern_star_has_no_far_pairs():
    edges = [(0, 1), (1, 2), (1, 3), (1, 4)]
    grid = GridNetwork("single", 5, 0, tuple((i, j, z1()) for i, j in edges), tuple(edges))
    model = random_load_model(grid, 8)
    rep = inverse_pattern_check(grid, model)
    assert all(cls != "far" for cls in rep.pair_class.values())


def test_pattern_random_tree():
    grid = random_radial_grid(8, 9)
    model = random_load_model(grid, 9)
    rep = inverse_pattern_check(grid, model)
    if any(cls == "far" for cls in rep.pair_class.values()):
        assert rep.far_max / rep.near_min < 1e-6


def test_pattern_rejects_singular_model():
    grid = path_grid(3)
    model = LoadModel.from_fraction(grid, np.full(3, -0.02 - 0.01j), fraction=0.0)
    with pytest.raises(StatsError, match="singular"):
        inverse_pattern_check(grid, model)


# -- quartets -------------------------------------------------------------------


def path5_oracle(seed=11):
    grid = path_grid(5)
    model = random_load_model(grid, seed)
    return grid, analytic_covariance_lcpf(grid, model)


def test_identity_sigma_unconditionally_independent():
    layout = VariableLayout.for_grid(path_grid(5))
    source = CovarianceSource(np.eye(layout.n_vars), layout, "analytic")
    stat = quartet(source, 1, 4, 2, 3)
    assert stat.inv_pair_entry == 0.0
    assert ci_test(stat, TestConfig("abs", 1e-6)).independent
    # the relative test divides by the zero raw covariance: indeterminate
    res = ci_test(stat, TestConfig("rel", 1e-6))
    assert not res.independent
    assert res.indeterminate


def test_separated_quartet_on_exact_oracle():
    _, src = path5_oracle()
    stat = quartet(src, 1, 4, 2, 3)
    scale = np.abs(np.linalg.inv(stat.sigma)).max()
    assert abs(stat.inv_pair_entry) <= 1e-9 * scale
    assert ci_test(stat, TestConfig("mod", 1e-6)).independent


def test_nonseparated_quartet_nonzero():
    """(1,5 | 2,4): bus 3 keeps 1 and 5 connected through two-hop links, so
    the conditional dependence survives (checked against graph separation)."""
    _, src = path5_oracle()
    stat = quartet(src, 1, 5, 2, 4)
    scale = np.abs(np.linalg.inv(stat.sigma)).max()
    assert abs(stat.inv_pair_entry) > 1e-6 * scale
    assert not ci_test(stat, TestConfig("mod", 1e-6)).independent


def test_exchange_symmetry():
    _, src = path5_oracle()
    cfg = TestConfig("mod", 1e-6)
    # dependent quartet: the entry is well away from zero, so swapping the
    # tested pair must reproduce its magnitude to rounding
    a = quartet(src, 1, 5, 2, 4, cfg)
    b = quartet(src, 5, 1, 2, 4, cfg)
    assert abs(a.inv_pair_entry) == pytest.approx(abs(b.inv_pair_entry), rel=1e-9)
    # separated quartet: the population entry is zero, so both orders must
    # sit at the numerical-noise floor and agree on the verdict
    c = quartet(src, 1, 4, 2, 3, cfg)
    d = quartet(src, 4, 1, 2, 3, cfg)
    floor = 1e-9 * np.abs(np.linalg.inv(c.sigma)).max()
    assert abs(c.inv_pair_entry) <= floor and abs(d.inv_pair_entry) <= floor
    # swapping the conditioning pair leaves the outcome unchanged
    for k, l, i, j in [(1, 4, 2, 3), (1, 5, 2, 4)]:
        r1 = ci_test(quartet(src, k, l, i, j, cfg), cfg)
        r2 = ci_test(quartet(src, k, l, j, i, cfg), cfg)
        assert r1.independent == r2.independent


def test_distinct_buses_required():
    _, src = path5_oracle()
    with pytest.raises(StatsError):
        quartet(src, 1, 1, 2, 3)


def test_scale_invariance_of_mod_outcomes():
    """Rescaling all samples by c rescales both the pair-conditioned and
    single-conditioned inverse entries by c^-2, so mod outcomes are
    unchanged."""
    grid, src = path5_oracle()
    quartets = [(1, 4, 2, 3), (1, 5, 2, 4), (2, 5, 3, 4)]
    cfg = TestConfig("mod", 1e-4)
    base = [ci_test(quartet(src, *q, cfg), cfg).independent for q in quartets]
    for c in (1e-3, 1e3):
        scaled = CovarianceSource(src.matrix * c * c, src.layout, "analytic")
        got = [ci_test(quartet(scaled, *q, cfg), cfg).independent for q in quartets]
        assert got == base, c


def test_rel_statistic_scales_as_fourth_power():
    """The relative test divides a c^-2 quantity by a c^2 one, so its
    statistic scales as c^-4; outcomes are preserved when the threshold is
    co-scaled."""
    grid, src = path5_oracle()
    q = (1, 5, 2, 4)
    cfg = TestConfig("rel", 1e-4)
    base = ci_test(quartet(src, *q, cfg), cfg)
    for c in (1e-3, 1e3):
        scaled_src = CovarianceSource(src.matrix * c * c, src.layout, "analytic")
        got = ci_test(quartet(scaled_src, *q, cfg), cfg)
        assert got.statistic * c**4 == pytest.approx(base.statistic, rel=1e-9)
        co_cfg = TestConfig("rel", cfg.tau / c**4)
        co = ci_test(quartet(scaled_src, *q, co_cfg), co_cfg)
        assert co.independent == base.independent


def gm_separated(grid, k, l, cond):
    """Brute-force separation in the load-bus graphical model: operational
    edges plus two-hop pairs through a non-reference bus."""
    nodes = set(grid.non_reference_buses)
    adj = {u: set() for u in nodes}
    nbrs = {u: {w for w in grid.adjacency()[u] if w != grid.reference} for u in nodes}
    for u, w in itertools.combinations(sorted(nodes), 2):
        if w in nbrs[u] or (nbrs[u] & nbrs[w]):
            adj[u].add(w)
            adj[w].add(u)
    blocked = set(cond)
    stack, seen = [k], {k} | blocked
    while stack:
        u = stack.pop()
        if u == l:
            return False
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return True


def test_oracle_quartets_match_graph_separation():
    """On the exact covariance, test verdicts equal graph separation in the
    two-hop-augmented load-bus graph, for every quartet of small trees."""
    cfg = TestConfig("mod", 1e-6)
    for seed in (3, 12, 21):
        grid = random_radial_grid(8, seed)
        src = analytic_covariance_lcpf(grid, random_load_model(grid, seed))
        nodes = sorted(src.layout.buses)
        for i, j in itertools.combinations(nodes, 2):
            rest = [u for u in nodes if u not in (i, j)]
            for k, l in itertools.combinations(rest, 2):
                want = gm_separated(grid, k, l, (i, j))
                got = ci_test(quartet(src, k, l, i, j, cfg), cfg).independent
                assert got == want, (seed, (k, l, i, j))


def test_covariance_json_round_trip(tmp_path):
    _, src = path5_oracle()
    path = tmp_path / "cov.json"
    save_covariance_json(src, path)
    back = load_covariance_json(path)
    assert back.layout == src.layout
    assert np.array_equal(back.matrix, src.matrix)
    assert back.kind == "analytic"
