"""Radial distribution grid model: case files, validation, incidence matrices.

A grid is a set of buses (bus 0 is the substation/reference by convention,
though any bus id may be declared as reference in the case file), a set of
operational lines that must form a spanning tree rooted at the reference,
and a superset of permissible edges (lines that exist structurally but may
be switched open).

Case files are a bespoke JSON schema::

    {
      "phase_mode": "single" | "three",
      "n_bus": <int>,
      "reference": <int>,
      "lines": [ {"from": i, "to": j, "z": [re, im]           # single phase
                                        | [[[re,im] x3] x3]}  # three phase
               ],
      "permissible_edges": [[i, j], ...]
    }

All impedances are per-unit on a common base; no base conversion is done.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SINGLE = "single"
THREE = "three"
PHASES = ("a", "b", "c")

#: Reference phase angles (radians) for phases a, b, c.
REF_ANGLES = np.array([0.0, 2.0 * np.pi / 3.0, -2.0 * np.pi / 3.0])

# Three-phase impedance matrices with condition numbers above this are
# rejected at load time (they make the per-line admittance meaningless).
_MAX_IMPEDANCE_COND = 1e12


class CaseError(ValueError):
    """Base error for malformed or invalid grid cases."""


class CaseParseError(CaseError):
    """The case file could not be parsed against the JSON schema."""


class CaseValidationError(CaseError):
    """The case parsed but violates a structural invariant."""


def _normalize_edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class LineImpedance:
    """Per-unit series impedance of one line (scalar or 3x3 phase matrix)."""

    mode: str
    z: complex | np.ndarray

    @classmethod
    def single_phase(cls, z: complex) -> "LineImpedance":
        z = complex(z)
        if not np.isfinite(z):
            raise CaseValidationError(f"non-finite impedance {z!r}")
        if z.real <= 0.0:
            raise CaseValidationError(f"line resistance must be positive, got {z.real}")
        return cls(SINGLE, z)

    @classmethod
    def three_phase(cls, zmat: np.ndarray) -> "LineImpedance":
        zmat = np.asarray(zmat, dtype=complex)
        if zmat.shape != (3, 3):
            raise CaseValidationError(f"three-phase impedance must be 3x3, got {zmat.shape}")
        if not np.all(np.isfinite(zmat)):
            raise CaseValidationError("non-finite three-phase impedance")
        if not np.array_equal(zmat, zmat.T):
            raise CaseValidationError("three-phase impedance matrix is not symmetric")
        if np.any(np.diag(zmat).real <= 0.0):
            raise CaseValidationError("in-phase resistances must be strictly positive")
        if np.linalg.cond(zmat) > _MAX_IMPEDANCE_COND:
            raise CaseValidationError("three-phase impedance matrix is numerically singular")
        zmat.setflags(write=False)
        return cls(THREE, zmat)

    def as_matrix(self) -> np.ndarray:
        """Impedance as a (p, p) complex matrix (p = 1 or 3)."""
        if self.mode == SINGLE:
            return np.array([[self.z]], dtype=complex)
        return np.asarray(self.z)


@dataclass(frozen=True)
class RootedTree:
    """Traversal structure of a validated radial grid, rooted at the reference.

    ``order`` lists non-reference buses in BFS order from the root.  For each
    edge, ``edge_child`` is its endpoint farther from the root and
    ``edge_sign`` is the sign of the child's entry in the incidence row
    (+1 when the child is the stored lower bus id).
    """

    root: int
    order: tuple[int, ...]
    parent: dict[int, int]
    parent_edge: dict[int, int]
    edge_child: tuple[int, ...]
    edge_sign: tuple[int, ...]


@dataclass(eq=False)
class GridNetwork:
    """A radial grid. Treat instances as immutable once constructed.

    ``lines`` keeps the case-file order; endpoints are normalized so the
    lower bus id comes first (this fixes incidence row signs across runs).
    """

    phase_mode: str
    n_bus: int
    reference: int
    lines: tuple[tuple[int, int, LineImpedance], ...]
    permissible_edges: tuple[tuple[int, int], ...]
    _rooted: RootedTree | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.phase_mode not in (SINGLE, THREE):
            raise CaseValidationError(f"unknown phase_mode {self.phase_mode!r}")
        if self.n_bus < 2:
            raise CaseValidationError("a grid needs at least two buses")
        if not (0 <= self.reference < self.n_bus):
            raise CaseValidationError(f"reference bus {self.reference} out of range")
        norm_lines = []
        for i, j, imp in self.lines:
            if i == j:
                raise CaseValidationError(f"self-loop at bus {i}")
            if not (0 <= i < self.n_bus and 0 <= j < self.n_bus):
                raise CaseValidationError(f"line ({i},{j}) references unknown bus")
            if imp.mode != self.phase_mode:
                raise CaseValidationError(f"line ({i},{j}) impedance mode mismatch")
            a, b = _normalize_edge(i, j)
            norm_lines.append((a, b, imp))
        self.lines = tuple(norm_lines)
        if len({(i, j) for i, j, _ in self.lines}) != len(self.lines):
            raise CaseValidationError("duplicate operational edges")
        perm = sorted({_normalize_edge(i, j) for i, j in self.permissible_edges})
        for a, b in perm:
            if a == b or not (0 <= a < self.n_bus and 0 <= b < self.n_bus):
                raise CaseValidationError(f"bad permissible edge ({a},{b})")
        self.permissible_edges = tuple(perm)
        missing = self.edge_set() - set(self.permissible_edges)
        if missing:
            raise CaseValidationError(
                f"permissible edge set is missing operational edges {sorted(missing)}"
            )

    # -- topology helpers ---------------------------------------------------

    @property
    def buses(self) -> range:
        return range(self.n_bus)

    @property
    def non_reference_buses(self) -> tuple[int, ...]:
        return tuple(b for b in self.buses if b != self.reference)

    @property
    def n_phase(self) -> int:
        return 1 if self.phase_mode == SINGLE else 3

    def edge_set(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.lines}

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {b: [] for b in self.buses}
        for i, j, _ in self.lines:
            adj[i].append(j)
            adj[j].append(i)
        return {b: sorted(ns) for b, ns in adj.items()}

    def rooted(self) -> RootedTree:
        """BFS structure from the reference bus; requires a radial grid."""
        if self._rooted is None:
            report = validate_radial(self)
            if not report.ok:
                raise CaseValidationError(f"grid is not radial: {report.summary()}")
            self._rooted = _build_rooted(self)
        return self._rooted

    def impedance_vector(self) -> np.ndarray:
        """Per-edge impedances: shape (n_e,) complex or (n_e, 3, 3)."""
        if self.phase_mode == SINGLE:
            return np.array([imp.z for _, _, imp in self.lines], dtype=complex)
        return np.stack([np.asarray(imp.z) for _, _, imp in self.lines])


@dataclass(frozen=True)
class RadialReport:
    """Outcome of the spanning-tree check."""

    ok: bool
    cycle_edges: tuple[tuple[int, int], ...] = ()
    disconnected: tuple[int, ...] = ()

    def summary(self) -> str:
        if self.ok:
            return "radial"
        parts = []
        if self.cycle_edges:
            parts.append(f"cycle-closing edges {list(self.cycle_edges)}")
        if self.disconnected:
            parts.append(f"disconnected buses {list(self.disconnected)}")
        return "not radial: " + "; ".join(parts)


def validate_radial(grid: GridNetwork) -> RadialReport:
    """Check that the operational lines form a spanning tree with the reference.

    Returns a report rather than raising: cycle-closing edges are the lines
    whose endpoints were already connected when scanned in file order, and
    ``disconnected`` lists buses unreachable from the reference.
    """
    parent = list(range(grid.n_bus))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    cycles = []
    for i, j, _ in grid.lines:
        ri, rj = find(i), find(j)
        if ri == rj:
            cycles.append((i, j))
        else:
            parent[ri] = rj
    ref_root = find(grid.reference)
    disconnected = tuple(b for b in grid.buses if find(b) != ref_root)
    ok = not cycles and not disconnected and len(grid.lines) == grid.n_bus - 1
    # A tree on n buses has exactly n-1 edges; with no cycles and full
    # connectivity the count is automatic, so `ok` needs no extra report.
    return RadialReport(ok=ok, cycle_edges=tuple(cycles), disconnected=disconnected)


def _build_rooted(grid: GridNetwork) -> RootedTree:
    edge_index = {(i, j): e for e, (i, j, _) in enumerate(grid.lines)}
    adj = grid.adjacency()
    root = grid.reference
    order: list[int] = []
    parent: dict[int, int] = {}
    parent_edge: dict[int, int] = {}
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w in seen:
                continue
            seen.add(w)
            parent[w] = u
            parent_edge[w] = edge_index[_normalize_edge(u, w)]
            order.append(w)
            queue.append(w)
    edge_child = [0] * len(grid.lines)
    edge_sign = [0] * len(grid.lines)
    for bus, e in parent_edge.items():
        i, j, _ = grid.lines[e]
        edge_child[e] = bus
        edge_sign[e] = 1 if bus == i else -1
    return RootedTree(
        root=root,
        order=tuple(order),
        parent=parent,
        parent_edge=parent_edge,
        edge_child=tuple(edge_child),
        edge_sign=tuple(edge_sign),
    )


@dataclass(frozen=True)
class Assumption2Report:
    """Longest path among non-reference buses and whether it exceeds 3 edges."""

    satisfied: bool
    depth: int


def check_assumption2(grid: GridNetwork) -> Assumption2Report:
    """Depth of the tree excluding the substation (longest path, in edges).

    The learner's recovery guarantees need this depth to exceed three.  The
    reference bus is removed before measuring, so only paths between load
    buses count.
    """
    grid.rooted()
    adj = {
        b: [n for n in ns if n != grid.reference]
        for b, ns in grid.adjacency().items()
        if b != grid.reference
    }

    def farthest(start: int) -> tuple[int, int]:
        dist = {start: 0}
        queue = deque([start])
        far, fd = start, 0
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    if dist[w] > fd:
                        far, fd = w, dist[w]
                    queue.append(w)
        return far, fd

    depth = 0
    visited: set[int] = set()
    for b in adj:
        if b in visited:
            continue
        # double BFS gives the exact diameter of each tree component
        far, _ = farthest(b)
        _, d = farthest(far)
        depth = max(depth, d)
        stack = [b]
        while stack:
            u = stack.pop()
            if u in visited:
                continue
            visited.add(u)
            stack.extend(adj[u])
    return Assumption2Report(satisfied=depth > 3, depth=depth)


@dataclass(frozen=True)
class IncidenceMatrix:
    """Reduced edge-to-bus incidence matrix of the operational lines.

    Row e is +1 at the stored lower endpoint and -1 at the higher one, with
    the reference-bus column removed.  ``columns`` maps matrix columns to
    bus ids; ``edges`` keeps the line order used for the rows.
    """

    matrix: np.ndarray
    edges: tuple[tuple[int, int], ...]
    columns: tuple[int, ...]


def incidence(grid: GridNetwork) -> IncidenceMatrix:
    cols = grid.non_reference_buses
    col_of = {b: c for c, b in enumerate(cols)}
    m = np.zeros((len(grid.lines), len(cols)))
    for e, (i, j, _) in enumerate(grid.lines):
        if i != grid.reference:
            m[e, col_of[i]] = 1.0
        if j != grid.reference:
            m[e, col_of[j]] = -1.0
    m.setflags(write=False)
    return IncidenceMatrix(matrix=m, edges=tuple((i, j) for i, j, _ in grid.lines), columns=cols)


# -- case file I/O ----------------------------------------------------------


def _impedance_to_json(imp: LineImpedance):
    if imp.mode == SINGLE:
        return [imp.z.real, imp.z.imag]
    zm = np.asarray(imp.z)
    return [[[zm[r, c].real, zm[r, c].imag] for c in range(3)] for r in range(3)]


def _impedance_from_json(z, phase_mode: str) -> LineImpedance:
    try:
        if phase_mode == SINGLE:
            re, im = z
            return LineImpedance.single_phase(complex(re, im))
        mat = np.array([[complex(z[r][c][0], z[r][c][1]) for c in range(3)] for r in range(3)])
        return LineImpedance.three_phase(mat)
    except (TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, CaseError):
            raise
        raise CaseParseError(f"bad impedance entry {z!r}") from exc


def grid_to_dict(grid: GridNetwork) -> dict:
    return {
        "phase_mode": grid.phase_mode,
        "n_bus": grid.n_bus,
        "reference": grid.reference,
        "lines": [
            {"from": i, "to": j, "z": _impedance_to_json(imp)} for i, j, imp in grid.lines
        ],
        "permissible_edges": [list(e) for e in grid.permissible_edges],
    }


def grid_from_dict(data: dict, validate: bool = True) -> GridNetwork:
    try:
        phase_mode = data["phase_mode"]
        n_bus = int(data["n_bus"])
        reference = int(data["reference"])
        raw_lines = data["lines"]
        raw_perm = data["permissible_edges"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseParseError(f"case file missing or malformed field: {exc}") from exc
    lines = []
    for entry in raw_lines:
        try:
            i, j = int(entry["from"]), int(entry["to"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseParseError(f"bad line entry {entry!r}") from exc
        lines.append((i, j, _impedance_from_json(entry["z"], phase_mode)))
    try:
        perm = tuple((int(a), int(b)) for a, b in raw_perm)
    except (TypeError, ValueError) as exc:
        raise CaseParseError(f"bad permissible_edges: {exc}") from exc
    grid = GridNetwork(
        phase_mode=phase_mode,
        n_bus=n_bus,
        reference=reference,
        lines=tuple(lines),
        permissible_edges=perm,
    )
    if validate:
        report = validate_radial(grid)
        if not report.ok:
            raise CaseValidationError(report.summary())
        grid.rooted()
    return grid


def load_case(path: str | Path) -> GridNetwork:
    """Load and validate a JSON case file (radial check included)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CaseParseError(f"{path}: case file must contain a JSON object")
    return grid_from_dict(data)


def canonical_case_json(grid: GridNetwork) -> str:
    """Canonical serialization: sorted keys, repr-round-trip floats."""
    return json.dumps(grid_to_dict(grid), sort_keys=True, separators=(",", ":"))


def save_case(grid: GridNetwork, path: str | Path) -> None:
    Path(path).write_text(canonical_case_json(grid) + "\n")


def case_fingerprint(grid: GridNetwork) -> str:
    """Stable hash of the grid's canonical serialization."""
    return hashlib.sha256(canonical_case_json(grid).encode()).hexdigest()
