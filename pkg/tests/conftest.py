"""Shared fixtures: bundled case paths and random radial grid builders."""

import heapq
from collections import deque
from pathlib import Path

import numpy as np
import pytest

from gridtop.network import SINGLE, GridNetwork, LineImpedance
from gridtop.sampling import LoadModel

REPO = Path(__file__).resolve().parents[1]
CASES = REPO / "cases"


@pytest.fixture(scope="session")
def cases_dir() -> Path:
    return CASES


def single_z(rng) -> LineImpedance:
    r = rng.uniform(0.008, 0.03)
    return LineImpedance.single_phase(complex(r, r * rng.uniform(1.2, 2.5)))


def three_z(rng) -> LineImpedance:
    diag = rng.uniform(0.008, 0.02, 3) + 1j * rng.uniform(0.02, 0.04, 3)
    mutual = rng.uniform(0.002, 0.005, 3) + 1j * rng.uniform(0.008, 0.016, 3)
    z = np.diag(diag).astype(complex)
    z[0, 1] = z[1, 0] = mutual[0]
    z[0, 2] = z[2, 0] = mutual[1]
    z[1, 2] = z[2, 1] = mutual[2]
    return LineImpedance.three_phase(z)


def pruefer_tree(m: int, rng) -> list[tuple[int, int]]:
    """Uniform random tree on nodes 1..m."""
    if m == 1:
        return []
    if m == 2:
        return [(1, 2)]
    seq = rng.integers(1, m + 1, size=m - 2)
    degree = np.ones(m + 1, dtype=int)
    degree[0] = 0
    for x in seq:
        degree[x] += 1
    leaves = [i for i in range(1, m + 1) if degree[i] == 1]
    heapq.heapify(leaves)
    edges = []
    for x in seq:
        leaf = heapq.heappop(leaves)
        edges.append((min(leaf, int(x)), max(leaf, int(x))))
        degree[x] -= 1
        if degree[x] == 1:
            heapq.heappush(leaves, int(x))
    u, v = heapq.heappop(leaves), heapq.heappop(leaves)
    edges.append((min(u, v), max(u, v)))
    return edges


def tree_depth(edges: list[tuple[int, int]], nodes) -> int:
    """Longest path (in edges) of a forest, by double BFS per component."""
    adj = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)

    def farthest(start):
        dist = {start: 0}
        queue = deque([start])
        best = (start, 0)
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    if dist[w] > best[1]:
                        best = (w, dist[w])
                    queue.append(w)
        return best

    depth = 0
    seen: set = set()
    for n in adj:
        if n in seen:
            continue
        far, _ = farthest(n)
        _, d = farthest(far)
        depth = max(depth, d)
        stack = [n]
        while stack:
            u = stack.pop()
            if u in seen:
                continue
            seen.add(u)
            stack.extend(adj[u])
    return depth


def random_radial_grid(m: int, seed: int, phase_mode: str = SINGLE,
                       enforce_depth: bool = True) -> GridNetwork:
    """Random radial grid with m load buses and a degree-1 substation (bus 0).

    With ``enforce_depth`` the load-bus tree is resampled until its longest
    path exceeds three edges (needs at least 5 load buses).
    """
    if enforce_depth and m < 5:
        raise ValueError(f"depth > 3 is impossible with {m} load buses")
    rng = np.random.default_rng(seed)
    while True:
        edges = pruefer_tree(m, rng)
        if not enforce_depth or tree_depth(edges, range(1, m + 1)) > 3:
            break
    root = int(rng.integers(1, m + 1))
    all_edges = [(0, root)] + edges
    zfun = single_z if phase_mode == SINGLE else three_z
    lines = tuple((i, j, zfun(rng)) for i, j in all_edges)
    return GridNetwork(phase_mode, m + 1, 0, lines, tuple(all_edges))


def random_load_model(grid: GridNetwork, seed: int, fraction: float = 0.1) -> LoadModel:
    rng = np.random.default_rng(seed + 90210)
    n, p = grid.n_bus - 1, grid.n_phase
    mean_p = -(0.01 + rng.uniform(0.0, 0.015, (n, p)))
    mean_q = mean_p * rng.uniform(0.3, 0.6, (n, p))
    return LoadModel.from_fraction(grid, mean_p + 1j * mean_q, fraction)
