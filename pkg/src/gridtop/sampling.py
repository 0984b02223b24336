"""Reproducible Monte-Carlo voltage samples from Gaussian nodal load models.

Loads at different buses are independent by construction (the model only
stores per-bus blocks); active and reactive power at one bus may be
correlated through the per-bus covariance.  Draw k uses the random stream
spawned from (seed, k), so any partition of the draws across workers yields
the same sample set as a sequential pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import SINGLE, THREE, GridNetwork, case_fingerprint
from .powerflow import NonConvergenceError, _acpf_batch, _lcpf3_batch, _lcpf_batch
from .stats import SampleMatrix, VariableLayout

SOLVER_TAGS = ("lc", "lc3", "ac")

# AC sweeps hold (n_bus, phase, chunk) complex work arrays; chunking keeps
# memory flat for large draw counts without changing results.
_AC_CHUNK = 16384


class LoadModelError(ValueError):
    """Invalid Gaussian load model."""


@dataclass(frozen=True)
class LoadModel:
    """Per-bus Gaussian model of complex power injections.

    ``mean`` has shape (n_bus-1, 2*n_phase) ordered [p_a, q_a, p_b, q_b,
    p_c, q_c] (single phase: [p, q]); ``cov`` stacks the per-bus covariance
    blocks, shape (n_bus-1, d, d).  Cross-bus covariance is structurally
    zero.
    """

    phase_mode: str
    buses: tuple[int, ...]
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        d = 2 if self.phase_mode == SINGLE else 6
        n = len(self.buses)
        if self.mean.shape != (n, d) or self.cov.shape != (n, d, d):
            raise LoadModelError(
                f"bad shapes: mean {self.mean.shape}, cov {self.cov.shape} for d={d}"
            )
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise LoadModelError("load model has non-finite entries")
        if not np.allclose(self.cov, np.swapaxes(self.cov, 1, 2), rtol=0, atol=0):
            raise LoadModelError("per-bus covariance blocks must be symmetric")
        w = np.linalg.eigvalsh(self.cov)
        scale = np.abs(w).max(axis=1, initial=0.0)
        if np.any(w[:, 0] < -1e-12 * np.maximum(scale, 1e-300)):
            raise LoadModelError("per-bus covariance blocks must be positive semidefinite")

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def sqrt_factors(self) -> np.ndarray:
        """PSD square roots of the per-bus blocks (eigendecomposition based,
        so singular blocks are fine)."""
        w, q = np.linalg.eigh(self.cov)
        return np.einsum("bij,bj,bkj->bik", q, np.sqrt(np.clip(w, 0.0, None)), q)

    def mean_injections(self) -> np.ndarray:
        """Mean complex injections, shape (n_bus-1, n_phase)."""
        return self.mean[:, 0::2] + 1j * self.mean[:, 1::2]

    # -- constructors --------------------------------------------------------

    @classmethod
    def from_fraction(
        cls, grid: GridNetwork, mean_injections, fraction: float = 0.1
    ) -> "LoadModel":
        """Independent p/q deviations with sigma = fraction * |mean component|."""
        mean_c = np.asarray(mean_injections, dtype=complex).reshape(grid.n_bus - 1, grid.n_phase)
        mean = np.empty((grid.n_bus - 1, 2 * grid.n_phase))
        mean[:, 0::2] = mean_c.real
        mean[:, 1::2] = mean_c.imag
        sig = fraction * np.abs(mean)
        cov = np.einsum("bi,ij->bij", sig**2, np.eye(2 * grid.n_phase))
        return cls(grid.phase_mode, grid.non_reference_buses, mean, cov)

    @classmethod
    def from_variance(cls, grid: GridNetwork, mean_injections, variance: float) -> "LoadModel":
        """Same absolute variance for every p and q component."""
        mean_c = np.asarray(mean_injections, dtype=complex).reshape(grid.n_bus - 1, grid.n_phase)
        mean = np.empty((grid.n_bus - 1, 2 * grid.n_phase))
        mean[:, 0::2] = mean_c.real
        mean[:, 1::2] = mean_c.imag
        d = 2 * grid.n_phase
        cov = np.broadcast_to(variance * np.eye(d), (grid.n_bus - 1, d, d)).copy()
        return cls(grid.phase_mode, grid.non_reference_buses, mean, cov)

    # -- (de)serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "phase_mode": self.phase_mode,
            "loads": [
                {"bus": int(b), "mean": self.mean[r].tolist(), "cov": self.cov[r].tolist()}
                for r, b in enumerate(self.buses)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, grid: GridNetwork | None = None) -> "LoadModel":
        try:
            phase_mode = data["phase_mode"]
            loads = sorted(data["loads"], key=lambda e: int(e["bus"]))
            buses = tuple(int(e["bus"]) for e in loads)
            mean = np.array([e["mean"] for e in loads], dtype=float)
            cov = np.array([e["cov"] for e in loads], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadModelError(f"malformed load model: {exc}") from exc
        model = cls(phase_mode, buses, mean, cov)
        if grid is not None:
            if phase_mode != grid.phase_mode:
                raise LoadModelError("load model phase mode does not match the grid")
            if buses != grid.non_reference_buses:
                raise LoadModelError("load model buses do not match the grid")
        return model

    @classmethod
    def from_json(cls, path: str | Path, grid: GridNetwork | None = None) -> "LoadModel":
        return cls.from_dict(json.loads(Path(path).read_text()), grid)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")


def draw_injections(model: LoadModel, n: int, seed) -> np.ndarray:
    """n i.i.d. complex injection draws, shape (n, n_bus-1, n_phase).

    Draw k is a deterministic function of (seed, k): its standard normals
    come from the k-th spawned child stream, so draws can be generated in
    any order or split across workers without changing the result.  ``seed``
    is an int or a tuple of ints (stream-derivation key).
    """
    if n < 0:
        raise ValueError("draw count must be non-negative")
    nb, d = model.mean.shape
    factors = model.sqrt_factors()
    children = np.random.SeedSequence(seed).spawn(n)
    z = np.empty((n, nb, d))
    for k, child in enumerate(children):
        z[k] = np.random.default_rng(child).standard_normal((nb, d))
    x = model.mean[None, :, :] + np.einsum("bij,nbj->nbi", factors, z)
    return x[..., 0::2] + 1j * x[..., 1::2]


@dataclass(frozen=True)
class SampleSet:
    """Voltage observables of n solved injection draws, plus provenance."""

    grid_fingerprint: str
    solver: str
    seed: int
    n_samples: int
    matrix: SampleMatrix

    def write_csv(self, path: str | Path) -> None:
        write_samples_csv(self.matrix, path)


def _solve_batch(grid: GridNetwork, solver: str, injections: np.ndarray):
    """(v, theta) arrays of shape (n_bus-1, n_phase, k) for draws (k, nb, p)."""
    P = np.ascontiguousarray(np.moveaxis(injections, 0, -1))  # (nb, p, k)
    if solver == "lc":
        if grid.phase_mode != SINGLE:
            raise ValueError("solver 'lc' needs a single-phase grid")
        return _lcpf_batch(grid, P[:, 0, :])
    if solver == "lc3":
        if grid.phase_mode != THREE:
            raise ValueError("solver 'lc3' needs a three-phase grid")
        return _lcpf3_batch(grid, P)
    if solver == "ac":
        k = P.shape[2]
        vs, ths = [], []
        for start in range(0, k, _AC_CHUNK):
            chunk = P[:, :, start : start + _AC_CHUNK]
            try:
                v, th, _, _ = _acpf_batch(grid, chunk)
            except NonConvergenceError as exc:
                raise NonConvergenceError(
                    f"AC solve did not converge at draw {start + exc.draw_index} "
                    f"(mismatch {exc.mismatch:.3e})",
                    mismatch=exc.mismatch,
                    iterations=exc.iterations,
                    draw_index=start + exc.draw_index,
                ) from exc
            vs.append(v)
            ths.append(th)
        return np.concatenate(vs, axis=2), np.concatenate(ths, axis=2)
    raise ValueError(f"unknown solver tag {solver!r} (expected one of {SOLVER_TAGS})")


def generate_samples(
    grid: GridNetwork, model: LoadModel, n: int, solver: str, seed: int
) -> SampleSet:
    """Draw n injection profiles, solve each, and stack the observables.

    Row k of the sample matrix is the (v, theta) vector of the k-th draw in
    the layout order of :meth:`VariableLayout.for_grid`.  An AC draw that
    fails to converge aborts the whole run (resampling would bias the
    distribution).
    """
    if model.phase_mode != grid.phase_mode or model.buses != grid.non_reference_buses:
        raise LoadModelError("load model does not match the grid")
    injections = draw_injections(model, n, seed)
    v, th = _solve_batch(grid, solver, injections)
    stacked = np.stack([v, th], axis=-1)  # (nb, p, k, 2)
    data = np.moveaxis(stacked, 2, 0).reshape(n, -1)
    layout = VariableLayout.for_grid(grid)
    return SampleSet(
        grid_fingerprint=case_fingerprint(grid),
        solver=solver,
        seed=seed,
        n_samples=n,
        matrix=SampleMatrix(np.ascontiguousarray(data), layout),
    )


# -- CSV interchange -----------------------------------------------------------


def write_samples_csv(matrix: SampleMatrix, path: str | Path) -> None:
    """One sample per row, 17-significant-digit doubles (round-trip exact)."""
    header = ",".join(matrix.layout.column_names())
    np.savetxt(path, matrix.data, fmt="%.17g", delimiter=",", header=header, comments="")


def read_samples_csv(path: str | Path) -> SampleMatrix:
    path = Path(path)
    with path.open() as fh:
        names = fh.readline().strip().split(",")
    layout = VariableLayout.from_names(names)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SampleMatrix(data, layout)
