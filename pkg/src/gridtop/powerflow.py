"""Power flow solvers for radial grids.

Three models are implemented:

* ``lcpf_solve`` — lossless linear-coupled single-phase flow.  In deviation
  coordinates u = (v - 1) - i*theta the model is u = M^-1 [Z*] M^-T P with M
  the reduced incidence matrix, so one backward and one forward pass over the
  tree solve it exactly.
* ``lcpf3_solve`` — the three-phase generalization.  Per-phase injections are
  rotated by the reference angles, the per-line 3x3 conjugate impedance
  couples the phases between the two tree passes, and results are un-rotated
  back to absolute angles.
* ``acpf_solve`` — nonlinear backward/forward sweep with constant-PQ buses,
  iterated until the complex power mismatch drops below tolerance.

Solvers never form an explicit inverse; dense reconstructions live in the
test suite as oracles.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .network import REF_ANGLES, SINGLE, THREE, GridNetwork


class PowerFlowError(RuntimeError):
    """Internal inconsistency in a power-flow computation."""


class NonConvergenceError(PowerFlowError):
    """The AC sweep did not reach the mismatch tolerance."""

    def __init__(self, message: str, mismatch: float, iterations: int, draw_index: int = 0):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations
        self.draw_index = draw_index


@dataclass(frozen=True)
class InjectionProfile:
    """Complex power injections at the non-reference buses.

    ``values`` has shape (n_bus-1, n_phase); rows follow ascending bus id
    (reference excluded).  Loads are negative injections.
    """

    phase_mode: str
    buses: tuple[int, ...]
    values: np.ndarray

    @classmethod
    def from_array(cls, grid: GridNetwork, values) -> "InjectionProfile":
        arr = np.asarray(values, dtype=complex)
        n = grid.n_bus - 1
        arr = arr.reshape(n, grid.n_phase)
        if not np.all(np.isfinite(arr)):
            raise ValueError("injections must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        return cls(grid.phase_mode, grid.non_reference_buses, arr)

    @classmethod
    def zeros(cls, grid: GridNetwork) -> "InjectionProfile":
        return cls.from_array(grid, np.zeros((grid.n_bus - 1, grid.n_phase)))

    @classmethod
    def from_json_obj(cls, grid: GridNetwork, obj) -> "InjectionProfile":
        """Parse the CLI format: per-bus [p, q] or per-bus [[p,q] x3]."""
        arr = np.asarray(obj, dtype=float)
        if grid.phase_mode == SINGLE:
            if arr.shape != (grid.n_bus - 1, 2):
                raise ValueError(f"expected {grid.n_bus - 1} [p,q] rows, got {arr.shape}")
            values = arr[:, 0] + 1j * arr[:, 1]
        else:
            if arr.shape != (grid.n_bus - 1, 3, 2):
                raise ValueError(f"expected {grid.n_bus - 1} rows of 3 [p,q] pairs, got {arr.shape}")
            values = arr[..., 0] + 1j * arr[..., 1]
        return cls.from_array(grid, values)


@dataclass(frozen=True)
class VoltageSolution:
    """Per-bus, per-phase voltage magnitudes (p.u.) and absolute angles (rad).

    Shapes are (n_bus-1, n_phase); the reference bus is implicit at
    magnitude 1 with angles equal to the per-phase reference offsets.
    """

    phase_mode: str
    buses: tuple[int, ...]
    v: np.ndarray
    theta: np.ndarray
    iterations: int | None = None
    mismatch: float | None = None

    @property
    def ref_angles(self) -> np.ndarray:
        return REF_ANGLES[: 1 if self.phase_mode == SINGLE else 3]

    def deviation_complex(self) -> np.ndarray:
        """u = (v - 1) - i*(theta - theta_ref), per bus and phase."""
        return (self.v - 1.0) - 1j * (self.theta - self.ref_angles)

    def to_dict(self) -> dict:
        out = {
            "phase_mode": self.phase_mode,
            "buses": list(self.buses),
            "v": self.v.tolist(),
            "theta": self.theta.tolist(),
        }
        if self.iterations is not None:
            out["iterations"] = self.iterations
        if self.mismatch is not None:
            out["mismatch"] = self.mismatch
        return out


# -- tree-structured linear solves -------------------------------------------

_TREE_OPS_CACHE: "weakref.WeakKeyDictionary[GridNetwork, _TreeOps]" = weakref.WeakKeyDictionary()


class _TreeOps:
    """Index arrays for O(n) incidence solves; built once per grid."""

    def __init__(self, grid: GridNetwork):
        rooted = grid.rooted()
        col_of = {b: c for c, b in enumerate(grid.non_reference_buses)}
        order = rooted.order
        self.n = len(order)
        self.n_edge = len(grid.lines)
        self.order_bus = np.array(order)
        self.parent_bus = np.array([rooted.parent[b] for b in order])
        self.bus_col = np.array([col_of[b] for b in order])
        self.parent_col = np.array(
            [col_of.get(rooted.parent[b], -1) for b in order]
        )  # -1 marks the reference
        self.edge = np.array([rooted.parent_edge[b] for b in order])
        self.sign = np.array([rooted.edge_sign[rooted.parent_edge[b]] for b in order], dtype=float)
        self.z = grid.impedance_vector()
        if grid.phase_mode == THREE:
            self.z_h = np.conj(np.swapaxes(self.z, 1, 2))
            self.z_inv = np.linalg.inv(self.z)
        else:
            self.z_h = np.conj(self.z)
            self.z_inv = 1.0 / self.z
        # for mismatch evaluation: endpoints of every edge
        self.edge_i = np.array([i for i, _, _ in grid.lines])
        self.edge_j = np.array([j for _, j, _ in grid.lines])
        self.ref = grid.reference
        self.non_ref = np.array(grid.non_reference_buses)

    def solve_incidence_t(self, rhs: np.ndarray) -> np.ndarray:
        """Solve M^T y = rhs by accumulating subtree sums leaf-to-root."""
        acc = np.array(rhs, dtype=complex)
        y = np.zeros((self.n_edge,) + rhs.shape[1:], dtype=complex)
        for k in range(self.n - 1, -1, -1):
            c, p, e = self.bus_col[k], self.parent_col[k], self.edge[k]
            y[e] = self.sign[k] * acc[c]
            if p >= 0:
                acc[p] += acc[c]
        return y

    def solve_incidence(self, w: np.ndarray) -> np.ndarray:
        """Solve M x = w by walking root-to-leaf (x at the reference is 0)."""
        x = np.zeros((self.n,) + w.shape[1:], dtype=complex)
        for k in range(self.n):
            c, p, e = self.bus_col[k], self.parent_col[k], self.edge[k]
            x[c] = self.sign[k] * w[e] + (x[p] if p >= 0 else 0.0)
        return x


def _tree_ops(grid: GridNetwork) -> _TreeOps:
    ops = _TREE_OPS_CACHE.get(grid)
    if ops is None:
        ops = _TreeOps(grid)
        _TREE_OPS_CACHE[grid] = ops
    return ops


def _inj_values(grid: GridNetwork, inj) -> np.ndarray:
    if isinstance(inj, InjectionProfile):
        if inj.phase_mode != grid.phase_mode:
            raise ValueError("injection phase mode does not match the grid")
        return inj.values
    return InjectionProfile.from_array(grid, inj).values


def lcpf_solve(grid: GridNetwork, inj) -> VoltageSolution:
    """Single-phase linear-coupled solution (two tree passes, no inverse)."""
    if grid.phase_mode != SINGLE:
        raise ValueError("lcpf_solve needs a single-phase grid")
    P = _inj_values(grid, inj)[:, 0]
    v, th = _lcpf_batch(grid, P[:, None])
    return VoltageSolution(SINGLE, grid.non_reference_buses, v[..., 0], th[..., 0])


def _lcpf_batch(grid: GridNetwork, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P has shape (n, k); returns (v, theta) of shape (n, 1, k)."""
    ops = _tree_ops(grid)
    y = ops.solve_incidence_t(P)
    u = ops.solve_incidence(ops.z_h[:, None] * y)
    return (1.0 + u.real)[:, None, :], (-u.imag)[:, None, :]


def lcpf3_solve(grid: GridNetwork, inj) -> VoltageSolution:
    """Three-phase linear-coupled solution with phase-rotated injections."""
    if grid.phase_mode != THREE:
        raise ValueError("lcpf3_solve needs a three-phase grid")
    P = _inj_values(grid, inj)
    v, th = _lcpf3_batch(grid, P[:, :, None])
    return VoltageSolution(THREE, grid.non_reference_buses, v[..., 0], th[..., 0])


def _lcpf3_batch(grid: GridNetwork, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P has shape (n, 3, k); returns (v, theta) of shape (n, 3, k)."""
    ops = _tree_ops(grid)
    rot = np.exp(-1j * REF_ANGLES)
    Pd = P * rot[None, :, None]
    y = ops.solve_incidence_t(Pd)
    w = np.einsum("eab,ebk->eak", ops.z_h, y)
    ud = ops.solve_incidence(w)
    u = ud * np.conj(rot)[None, :, None]
    return 1.0 + u.real, REF_ANGLES[None, :, None] - u.imag


# -- three-phase block admittance (structure check) ---------------------------


@dataclass(frozen=True)
class BlockAdmittance:
    """Block admittance Y-dagger and its per-line-assembled inverse.

    Both are (3*n_e, 3*n_e) with nine diagonal blocks indexed by phase pair;
    block (alpha, beta) holds the per-line entries for that phase pair.
    ``deviation`` is the max-norm of Y_dagger @ Z_dagger_H - I.
    """

    y_dagger: np.ndarray
    z_dagger_h: np.ndarray
    deviation: float


def block_impedance(grid: GridNetwork, tol: float = 1e-10) -> BlockAdmittance:
    """Assemble Y-dagger and conj-transposed Z-dagger; verify they invert.

    Each line's admittance matrix is the inverse of its conjugate-transposed
    impedance, so the block product must be the identity.  A deviation above
    ``tol`` means the per-line inversions are inconsistent.
    """
    if grid.phase_mode != THREE:
        raise ValueError("block_impedance needs a three-phase grid")
    zs = grid.impedance_vector()
    n_e = len(grid.lines)
    z_h = np.conj(np.swapaxes(zs, 1, 2))
    y_line = np.linalg.inv(z_h)
    y_dag = np.zeros((3 * n_e, 3 * n_e), dtype=complex)
    z_dag_h = np.zeros((3 * n_e, 3 * n_e), dtype=complex)
    idx = np.arange(n_e)
    for a in range(3):
        for b in range(3):
            y_dag[a * n_e + idx, b * n_e + idx] = y_line[:, a, b]
            z_dag_h[a * n_e + idx, b * n_e + idx] = z_h[:, a, b]
    deviation = float(np.abs(y_dag @ z_dag_h - np.eye(3 * n_e)).max())
    if deviation > tol:
        raise PowerFlowError(
            f"block admittance inverse check failed: deviation {deviation:.3e} > {tol:g}"
        )
    return BlockAdmittance(y_dagger=y_dag, z_dagger_h=z_dag_h, deviation=deviation)


# -- nonlinear backward/forward sweep -----------------------------------------


def acpf_solve(grid: GridNetwork, inj, tol: float = 1e-10, max_iter: int = 100) -> VoltageSolution:
    """Nonlinear AC solution by backward/forward sweep.

    Convergence is declared on the infinity norm of the complex power
    mismatch at every non-reference bus (and phase), which certifies the AC
    power-flow equations directly rather than voltage stagnation.
    """
    P = _inj_values(grid, inj)
    v, th, iters, mism = _acpf_batch(grid, P[:, :, None], tol=tol, max_iter=max_iter)
    return VoltageSolution(
        grid.phase_mode,
        grid.non_reference_buses,
        v[..., 0],
        th[..., 0],
        iterations=iters,
        mismatch=float(mism.max()),
    )


def _acpf_batch(
    grid: GridNetwork, P: np.ndarray, tol: float = 1e-10, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray, int, np.ndarray]:
    """Sweep for P of shape (n, p, k); iterates until every draw converges.

    Returns (v, theta, iterations, per-draw mismatch).  Raises
    NonConvergenceError naming the first offending draw index.
    """
    ops = _tree_ops(grid)
    p = grid.n_phase
    k = P.shape[2]
    ref_v = np.exp(1j * REF_ANGLES[:p])
    V = np.broadcast_to(ref_v[None, :, None], (grid.n_bus, p, k)).copy()
    P_full = np.zeros((grid.n_bus, p, k), dtype=complex)
    P_full[ops.non_ref] = P

    mism = np.full(k, np.inf)
    for it in range(1, max_iter + 1):
        i_inj = np.conj(P_full / V)
        i_inj[ops.ref] = 0.0
        acc = -i_inj
        branch = np.zeros((ops.n_edge, p, k), dtype=complex)
        for n in range(ops.n - 1, -1, -1):
            b, e = ops.order_bus[n], ops.edge[n]
            branch[e] = acc[b]
            acc[ops.parent_bus[n]] += acc[b]
        for n in range(ops.n):
            b, e = ops.order_bus[n], ops.edge[n]
            if p == 1:
                drop = ops.z[e] * branch[e]
            else:
                drop = np.einsum("ab,bk->ak", ops.z[e], branch[e])
            V[b] = V[ops.parent_bus[n]] - drop
        mism = _power_mismatch(ops, grid, V, P_full)
        if mism.max() <= tol:
            return _unpack_voltages(grid, V, it, mism)
    bad = int(np.argmax(mism))
    raise NonConvergenceError(
        f"AC sweep did not converge after {max_iter} iterations "
        f"(worst mismatch {mism.max():.3e} at draw {bad})",
        mismatch=float(mism.max()),
        iterations=max_iter,
        draw_index=bad,
    )


def _power_mismatch(ops: _TreeOps, grid: GridNetwork, V, P_full) -> np.ndarray:
    dV = V[ops.edge_i] - V[ops.edge_j]
    if grid.n_phase == 1:
        i_line = dV * ops.z_inv[:, None, None]
    else:
        i_line = np.einsum("eab,ebk->eak", ops.z_inv, dV)
    S = np.zeros_like(P_full)
    np.add.at(S, ops.edge_i, V[ops.edge_i] * np.conj(i_line))
    np.add.at(S, ops.edge_j, V[ops.edge_j] * np.conj(-i_line))
    diff = np.abs(S - P_full)
    diff[ops.ref] = 0.0
    return diff.reshape(grid.n_bus * grid.n_phase, -1).max(axis=0)


def _unpack_voltages(grid, V, iterations, mism):
    idx = _tree_ops(grid).non_ref
    v = np.abs(V[idx])
    th = np.angle(V[idx])
    # keep three-phase angles near their reference offsets (branch cut)
    ref = REF_ANGLES[: grid.n_phase][None, :, None]
    th = ref + np.angle(np.exp(1j * (th - ref)))
    return v, th, iterations, mism


def implied_reference_injection(grid: GridNetwork, sol: VoltageSolution) -> np.ndarray:
    """Reference-bus injection implied by a linear-model solution, per phase.

    The LC models are lossless, so this equals minus the sum of all other
    injections (up to floating-point rounding).  Computed from the voltage
    deviations through the root lines only.
    """
    rooted = grid.rooted()
    u = sol.deviation_complex()
    rot = np.exp(-1j * sol.ref_angles)
    ud = u * rot[None, :]
    col_of = {b: c for c, b in enumerate(grid.non_reference_buses)}
    total = np.zeros(grid.n_phase, dtype=complex)
    for child, par in rooted.parent.items():
        if par != grid.reference:
            continue
        imp = grid.lines[rooted.parent_edge[child]][2]
        du = -ud[col_of[child]]  # reference deviation is zero
        if grid.n_phase == 1:
            flow = du / np.conj(imp.z)
        else:
            flow = np.linalg.inv(np.conj(np.asarray(imp.z).T)) @ du
        total += flow
    return total * np.conj(rot)
