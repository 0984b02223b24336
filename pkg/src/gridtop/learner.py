"""Three-stage radial topology learner driven by quartet independence tests.

Stage 1 scans candidate edges (i, j) and declares an edge when some witness
pair (k, l) becomes conditionally independent given the voltages at i and j;
this finds exactly the edges between non-leaf buses.  Stage 2 attaches leaves
to non-leaf buses that have a single non-leaf neighbor (one witness pair
suffices); stage 3 attaches the remaining leaves to higher-degree non-leaf
buses, requiring every available witness pair to agree.

The reference bus never appears in a quartet: its voltage is pinned, so the
learner reconstructs the tree on the load buses and the line into the
substation is reported as unknown.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import GridNetwork
from .stats import CovarianceSource, TestConfig, evaluate_pairs, pair_conditional_entries

# stage-1 witness search runs in blocks: early exit keeps the average cost
# near the first-witness position while staying vectorized
_WITNESS_CHUNK = 64


class LearnerError(ValueError):
    """Invalid learner input."""


@dataclass(frozen=True)
class LearnerConfig:
    """Test settings plus learner knobs.

    ``max_witnesses`` caps how many (k, l) pairs stage 1 may examine per
    candidate edge (None scans them all, in lexicographic order).
    ``strict_stage2`` tests every witness of a degree-1 parent instead of
    the first.
    """

    test: TestConfig = field(default_factory=TestConfig)
    strict_stage2: bool = False
    max_witnesses: int | None = None


@dataclass
class PartialTopology:
    """Work-in-progress topology threaded through the three stages."""

    nodes: tuple[int, ...]
    edges: dict[tuple[int, int], str] = field(default_factory=dict)
    v_nl: set[int] = field(default_factory=set)
    v1_nl: set[int] = field(default_factory=set)
    v2_nl: set[int] = field(default_factory=set)
    attached: set[int] = field(default_factory=set)
    ambiguous: list[tuple[int, int, tuple[int, ...]]] = field(default_factory=list)
    n_tests: int = 0
    n_indeterminate: int = 0

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {n: [] for n in self.nodes}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return {n: sorted(v) for n, v in adj.items()}

    def copy(self) -> "PartialTopology":
        return PartialTopology(
            nodes=self.nodes,
            edges=dict(self.edges),
            v_nl=set(self.v_nl),
            v1_nl=set(self.v1_nl),
            v2_nl=set(self.v2_nl),
            attached=set(self.attached),
            ambiguous=list(self.ambiguous),
            n_tests=self.n_tests,
            n_indeterminate=self.n_indeterminate,
        )


@dataclass(frozen=True)
class LearnedTopology:
    """Final result: edge set with stage provenance and diagnostics."""

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    stage: dict[tuple[int, int], str]
    v_nl: tuple[int, ...]
    v1_nl: tuple[int, ...]
    v2_nl: tuple[int, ...]
    unattached: tuple[int, ...]
    ambiguous: tuple[tuple[int, int, tuple[int, ...]], ...]
    n_tests: int
    n_indeterminate: int
    is_tree: bool
    root_attachment: str = "unknown"

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [{"i": i, "j": j, "stage": self.stage[(i, j)]} for i, j in self.edges],
            "v_nl": list(self.v_nl),
            "v1_nl": list(self.v1_nl),
            "v2_nl": list(self.v2_nl),
            "unattached": list(self.unattached),
            "ambiguous": [
                {"node": n, "parent": p, "others": list(o)} for n, p, o in self.ambiguous
            ],
            "diagnostics": {
                "n_tests": self.n_tests,
                "n_indeterminate": self.n_indeterminate,
            },
            "is_tree": self.is_tree,
            "root_attachment": self.root_attachment,
        }


def all_pairs(nodes) -> tuple[tuple[int, int], ...]:
    nodes = sorted(nodes)
    return tuple((a, b) for x, a in enumerate(nodes) for b in nodes[x + 1 :])


def learnable_edges(grid: GridNetwork) -> set[tuple[int, int]]:
    """Operational edges not touching the reference bus (what learn() can see)."""
    return {(i, j) for i, j, _ in grid.lines if grid.reference not in (i, j)}


def learner_permissible(grid: GridNetwork) -> tuple[tuple[int, int], ...]:
    """Case permissible edges restricted to non-reference pairs."""
    return tuple(
        (i, j) for i, j in grid.permissible_edges if grid.reference not in (i, j)
    )


def _normalize_permissible(nodes, permissible) -> tuple[tuple[int, int], ...]:
    node_set = set(nodes)
    norm = set()
    for a, b in permissible:
        if a == b:
            raise LearnerError(f"self-loop ({a},{b}) in permissible edges")
        if a not in node_set or b not in node_set:
            raise LearnerError(
                f"permissible edge ({a},{b}) references a bus without observations"
            )
        norm.add((min(a, b), max(a, b)))
    return tuple(sorted(norm))


def _run_pairs(state, source, kl_pairs, i, j, cfg: TestConfig):
    """Evaluate the configured test for each (k, l) given (i, j); count tests."""
    batch = pair_conditional_entries(
        source, np.asarray(kl_pairs), i, j, cfg, with_singles=cfg.test == "mod"
    )
    independent, stats = evaluate_pairs(batch, cfg)
    state.n_tests += len(kl_pairs)
    state.n_indeterminate += int(batch.indeterminate.sum())
    return independent, stats


def detect_nonleaf_edges(
    source: CovarianceSource, permissible, cfg: LearnerConfig | None = None
) -> PartialTopology:
    """Stage 1: an edge (i, j) is kept when some witness pair tests independent.

    Witness pairs are scanned in lexicographic order with early exit on the
    first pass, so the count of evaluated tests stays near the first-witness
    position for true edges.
    """
    cfg = cfg or LearnerConfig()
    nodes = tuple(sorted(source.layout.buses))
    candidates = _normalize_permissible(nodes, permissible)
    state = PartialTopology(nodes=nodes)
    for i, j in candidates:
        others = [u for u in nodes if u != i and u != j]
        kl = [(k, l) for x, k in enumerate(others) for l in others[x + 1 :]]
        if cfg.max_witnesses is not None:
            kl = kl[: cfg.max_witnesses]
        hit = False
        for start in range(0, len(kl), _WITNESS_CHUNK):
            chunk = kl[start : start + _WITNESS_CHUNK]
            independent, _ = _run_pairs(state, source, chunk, i, j, cfg.test)
            if independent.any():
                hit = True
                break
        if hit:
            state.edges[(i, j)] = "nonleaf"
            state.v_nl.update((i, j))
    adj = state.adjacency()
    state.v1_nl = {u for u in state.v_nl if len(adj[u]) == 1}
    state.v2_nl = state.v_nl - state.v1_nl
    return state


def _record_attachment(state, k, passing, stage_tag):
    """Attach k to the strongest-independence parent; flag multiple passes."""
    passing.sort(key=lambda c: (c[0], c[1]))
    stat, parent = passing[0]
    state.edges[(min(k, parent), max(k, parent))] = stage_tag
    state.attached.add(k)
    if len(passing) > 1:
        state.ambiguous.append((k, parent, tuple(p for _, p in passing[1:])))


def attach_leaves_deg1(
    source: CovarianceSource, partial: PartialTopology, permissible, cfg: LearnerConfig | None = None
) -> PartialTopology:
    """Stage 2: attach leaves to degree-1 members of the non-leaf tree.

    For candidate parent i its single non-leaf neighbor j is forced; the
    witness l is the smallest other neighbor of j.  In strict mode every
    such l must agree instead of just the first.
    """
    cfg = cfg or LearnerConfig()
    state = partial.copy()
    efull = set(_normalize_permissible(state.nodes, permissible))
    adj = partial.adjacency()
    for k in [u for u in state.nodes if u not in state.v_nl and u not in state.attached]:
        passing = []
        for i in sorted(state.v1_nl):
            if (min(k, i), max(k, i)) not in efull:
                continue
            j = adj[i][0]
            witnesses = [l for l in adj[j] if l != i and l != k]
            if not witnesses:
                continue
            if not cfg.strict_stage2:
                witnesses = witnesses[:1]
            verdicts = []
            for l in witnesses:
                independent, stats = _run_pairs(state, source, [(k, l)], i, j, cfg.test)
                verdicts.append((bool(independent[0]), float(stats[0])))
                if not independent[0]:
                    break
            if all(v for v, _ in verdicts):
                passing.append((max(s for _, s in verdicts), i))
        if passing:
            _record_attachment(state, k, passing, "leaf_deg1")
    return state


def attach_leaves_deg2plus(
    source: CovarianceSource, partial: PartialTopology, permissible, cfg: LearnerConfig | None = None
) -> PartialTopology:
    """Stage 3: attach remaining leaves to higher-degree non-leaf buses.

    A candidate parent i must pass the test for every witness pair (j, l)
    with (i,j) and (j,l) already-learned edges; leaves attached in stage 2
    count as witnesses (without them, a parent whose neighbors all sit in
    the degree-1 set would have no witness at all).  The witness sets are
    frozen at stage entry so results do not depend on processing order.
    """
    cfg = cfg or LearnerConfig()
    state = partial.copy()
    efull = set(_normalize_permissible(state.nodes, permissible))
    adj = partial.adjacency()  # includes stage-2 attachments, frozen
    pending = [u for u in state.nodes if u not in state.v_nl and u not in state.attached]
    for k in pending:
        passing = []
        for i in sorted(state.v2_nl):
            if (min(k, i), max(k, i)) not in efull:
                continue
            witnesses = [
                (j, l)
                for j in adj[i]
                if j != k
                for l in adj[j]
                if l != i and l != k
            ]
            if not witnesses:
                continue
            worst = 0.0
            ok = True
            for j, l in witnesses:
                independent, stats = _run_pairs(state, source, [(k, l)], i, j, cfg.test)
                worst = max(worst, float(stats[0]))
                if not independent[0]:
                    ok = False
                    break
            if ok:
                passing.append((worst, i))
        if passing:
            _record_attachment(state, k, passing, "leaf_deg2plus")
    return state


def _finalize(state: PartialTopology) -> LearnedTopology:
    unattached = tuple(
        u for u in state.nodes if u not in state.v_nl and u not in state.attached
    )
    edges = tuple(sorted(state.edges))
    is_tree = _spans_tree(state.nodes, edges)
    return LearnedTopology(
        nodes=state.nodes,
        edges=edges,
        stage=dict(state.edges),
        v_nl=tuple(sorted(state.v_nl)),
        v1_nl=tuple(sorted(state.v1_nl)),
        v2_nl=tuple(sorted(state.v2_nl)),
        unattached=unattached,
        ambiguous=tuple(state.ambiguous),
        n_tests=state.n_tests,
        n_indeterminate=state.n_indeterminate,
        is_tree=is_tree,
    )


def _spans_tree(nodes, edges) -> bool:
    if len(edges) != len(nodes) - 1:
        return False
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            return False
        parent[ri] = rj
    return True


def learn(
    source: CovarianceSource, permissible=None, cfg: LearnerConfig | None = None
) -> LearnedTopology:
    """Run the full three-stage reconstruction.

    ``permissible`` restricts candidate edges; None means every pair of
    observed buses is a candidate.  The result is not repaired when it fails
    to span a tree; ``is_tree`` and ``unattached`` report the outcome.
    """
    cfg = cfg or LearnerConfig()
    nodes = tuple(sorted(source.layout.buses))
    if permissible is None:
        permissible = all_pairs(nodes)
    stage1 = detect_nonleaf_edges(source, permissible, cfg)
    stage2 = attach_leaves_deg1(source, stage1, permissible, cfg)
    stage3 = attach_leaves_deg2plus(source, stage2, permissible, cfg)
    return _finalize(stage3)


def edge_error(learned_edges, true_edges) -> float:
    """(missed + spurious) / |true|, the relative edge error."""
    learned = {(min(i, j), max(i, j)) for i, j in learned_edges}
    truth = {(min(i, j), max(i, j)) for i, j in true_edges}
    if not truth:
        raise LearnerError("true edge set is empty")
    return (len(truth - learned) + len(learned - truth)) / len(truth)
