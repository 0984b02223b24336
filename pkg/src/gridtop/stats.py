"""Voltage statistics: covariance estimation, the exact Gaussian voltage
covariance under the linear flow model, and quartet conditional-independence
tests.

The observable vector stacks, per non-reference bus and phase, the voltage
magnitude ``v`` and angle ``th``.  A :class:`VariableLayout` fixes the
column order once and everything else (CSV headers, covariance matrices,
quartet extraction) refers to it.

A quartet test asks whether the magnitudes at buses k and l are independent
given the complex voltages at buses i and j.  It inverts a small covariance
submatrix (6x6 single-phase, 14x14 three-phase) and thresholds its (1,2)
entry in one of three ways: absolute value ("abs"), relative to the plain
covariance ("rel"), or relative to the single-bus-conditioned entries
("mod").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import PHASES, REF_ANGLES, SINGLE, GridNetwork, incidence

#: Denominators below this make a relative test undecidable.
TINY_DENOMINATOR = 1e-300

#: Condition-number limit beyond which a quartet matrix gets a ridge.
DEFAULT_COND_LIMIT = 1e12


class StatsError(ValueError):
    """Invalid input to a statistics routine."""


# -- variable layout ----------------------------------------------------------


@dataclass(frozen=True)
class VariableLayout:
    """Bijective map (bus, phase, observable) -> column index.

    Order is bus-major (ascending, reference excluded), then phase, with
    ``v`` before ``th``.
    """

    entries: tuple[tuple[int, str, str], ...]

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise StatsError("layout entries must be unique")

    @classmethod
    def for_grid(cls, grid: GridNetwork) -> "VariableLayout":
        phases = PHASES[: grid.n_phase]
        entries = [
            (bus, ph, obs)
            for bus in grid.non_reference_buses
            for ph in phases
            for obs in ("v", "th")
        ]
        return cls(tuple(entries))

    @property
    def n_vars(self) -> int:
        return len(self.entries)

    @property
    def buses(self) -> tuple[int, ...]:
        seen: list[int] = []
        for bus, _, _ in self.entries:
            if bus not in seen:
                seen.append(bus)
        return tuple(seen)

    @property
    def phases(self) -> tuple[str, ...]:
        out: list[str] = []
        for _, ph, _ in self.entries:
            if ph not in out:
                out.append(ph)
        return tuple(out)

    def index(self, bus: int, phase: str, obs: str) -> int:
        try:
            return self.entries.index((bus, phase, obs))
        except ValueError:
            raise StatsError(f"no column for bus={bus} phase={phase} obs={obs}") from None

    def column_names(self) -> list[str]:
        return [f"{obs}_{bus}_{ph}" for bus, ph, obs in self.entries]

    @classmethod
    def from_names(cls, names: list[str]) -> "VariableLayout":
        entries = []
        for name in names:
            try:
                obs, bus, ph = name.strip().split("_")
                entries.append((int(bus), ph, obs))
            except ValueError as exc:
                raise StatsError(f"bad column name {name!r}") from exc
        return cls(tuple(entries))

    def to_jsonable(self) -> list[list]:
        return [[bus, ph, obs] for bus, ph, obs in self.entries]

    @classmethod
    def from_jsonable(cls, data) -> "VariableLayout":
        return cls(tuple((int(b), str(p), str(o)) for b, p, o in data))


@dataclass(frozen=True)
class SampleMatrix:
    """Rows of stacked voltage observables with their column layout."""

    data: np.ndarray
    layout: VariableLayout

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.layout.n_vars:
            raise StatsError(
                f"sample matrix shape {self.data.shape} does not match layout "
                f"({self.layout.n_vars} variables)"
            )
        if not np.all(np.isfinite(self.data)):
            raise StatsError("sample matrix contains non-finite values")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]


# -- covariance estimation ----------------------------------------------------


def empirical_covariance(samples) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased (n-1) covariance and mean of a sample matrix.

    Accepts a :class:`SampleMatrix` or a plain (n, d) array; needs n >= 2.
    """
    data = samples.data if isinstance(samples, SampleMatrix) else np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise StatsError("covariance needs at least two sample rows")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (data.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return cov, mean


class CovarianceAccumulator:
    """Streaming mean/covariance with exact pairwise merging.

    ``merge`` combines two accumulators so that the result matches a single
    pass over the concatenated data (up to floating-point associativity).
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.n = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def update(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.dim:
            raise StatsError(f"expected {self.dim} columns, got {rows.shape[1]}")
        nb = rows.shape[0]
        if nb == 0:
            return
        mean_b = rows.mean(axis=0)
        centered = rows - mean_b
        m2_b = centered.T @ centered
        self._merge_moments(nb, mean_b, m2_b)

    def merge(self, other: "CovarianceAccumulator") -> None:
        if other.dim != self.dim:
            raise StatsError("cannot merge accumulators of different dimension")
        self._merge_moments(other.n, other.mean.copy(), other._m2.copy())

    def merged(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        out = CovarianceAccumulator(self.dim)
        out.merge(self)
        out.merge(other)
        return out

    def _merge_moments(self, nb: int, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        if nb == 0:
            return
        if self.n == 0:
            self.n, self.mean, self._m2 = nb, mean_b, m2_b
            return
        na = self.n
        delta = mean_b - self.mean
        total = na + nb
        self.mean = self.mean + delta * (nb / total)
        self._m2 = self._m2 + m2_b + np.outer(delta, delta) * (na * nb / total)
        self.n = total

    def covariance(self) -> np.ndarray:
        if self.n < 2:
            raise StatsError("covariance needs at least two accumulated rows")
        cov = self._m2 / (self.n - 1)
        return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class CovarianceSource:
    """A covariance matrix over a variable layout, empirical or analytic."""

    matrix: np.ndarray
    layout: VariableLayout
    kind: str = "empirical"
    n_samples: int | None = None
    mean: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples: SampleMatrix) -> "CovarianceSource":
        cov, mean = empirical_covariance(samples)
        return cls(cov, samples.layout, "empirical", samples.n_samples, mean)


def save_covariance_json(source: CovarianceSource, path) -> None:
    """Write a covariance source (layout map + row-major matrix) to JSON."""
    import json
    from pathlib import Path

    payload = {
        "kind": source.kind,
        "n_samples": source.n_samples,
        "layout": source.layout.to_jsonable(),
        "mean": None if source.mean is None else source.mean.tolist(),
        "matrix": source.matrix.tolist(),
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_covariance_json(path) -> CovarianceSource:
    import json
    from pathlib import Path

    data = json.loads(Path(path).read_text())
    layout = VariableLayout.from_jsonable(data["layout"])
    matrix = np.asarray(data["matrix"], dtype=float)
    if matrix.shape != (layout.n_vars, layout.n_vars):
        raise StatsError("covariance matrix shape does not match layout")
    mean = None if data.get("mean") is None else np.asarray(data["mean"], dtype=float)
    return CovarianceSource(
        matrix=matrix,
        layout=layout,
        kind=data.get("kind", "empirical"),
        n_samples=data.get("n_samples"),
        mean=mean,
    )


# -- analytic covariance under the linear single-phase model -------------------


def _load_second_moments(grid: GridNetwork, load_model) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-bus variances of p and q and their within-bus covariance."""
    buses = grid.non_reference_buses
    if tuple(load_model.buses) != buses:
        raise StatsError("load model buses do not match the grid")
    cov = np.asarray(load_model.cov)
    if cov.shape != (len(buses), 2, 2):
        raise StatsError("analytic covariance needs a single-phase load model")
    return cov[:, 0, 0], cov[:, 1, 1], cov[:, 0, 1]


def _resistance_reactance_maps(grid: GridNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Dense R = M^-1 diag(r) M^-T and X = M^-1 diag(x) M^-T (small grids)."""
    m = incidence(grid).matrix
    a = np.linalg.solve(m, np.eye(m.shape[0]))
    z = grid.impedance_vector()
    r = a @ np.diag(z.real) @ a.T
    x = a @ np.diag(z.imag) @ a.T
    return r, x


def analytic_covariance_lcpf(grid: GridNetwork, load_model) -> CovarianceSource:
    """Exact covariance of the stacked (v, th) observables under the
    single-phase linear flow model with independent per-bus Gaussian loads.

    Pushes the full per-bus (p, q) covariance (within-bus correlation
    allowed) through the real linear map v = R p + X q, th = X p - R q.
    """
    if grid.phase_mode != SINGLE:
        raise StatsError("analytic covariance is defined for single-phase grids")
    omega_p, omega_q, omega_pq = _load_second_moments(grid, load_model)
    rmap, xmap = _resistance_reactance_maps(grid)
    layout = VariableLayout.for_grid(grid)
    n = len(grid.non_reference_buses)
    t = np.zeros((layout.n_vars, 2 * n))
    for row, (bus, _, obs) in enumerate(layout.entries):
        c = grid.non_reference_buses.index(bus)
        if obs == "v":
            t[row, :n] = rmap[c]
            t[row, n:] = xmap[c]
        else:
            t[row, :n] = xmap[c]
            t[row, n:] = -rmap[c]
    load_cov = np.zeros((2 * n, 2 * n))
    load_cov[:n, :n] = np.diag(omega_p)
    load_cov[n:, n:] = np.diag(omega_q)
    load_cov[:n, n:] = np.diag(omega_pq)
    load_cov[n:, :n] = np.diag(omega_pq)
    omega = t @ load_cov @ t.T
    omega = 0.5 * (omega + omega.T)
    return CovarianceSource(omega, layout, "analytic")


def analytic_covariance_lcpf_complex(grid: GridNetwork, load_model) -> np.ndarray:
    """The complex-voltage covariance E[dV dV^H] in closed form.

    This is the textbook shortcut H^-1_{1/Z*} (Omega_p + Omega_q) H^-1_{1/Z};
    kept as a cross-check of the real stacked form (they must agree whenever
    the within-bus p-q covariance is zero... in fact always, since E[dV dV^H]
    cannot see it).
    """
    if grid.phase_mode != SINGLE:
        raise StatsError("complex covariance is defined for single-phase grids")
    omega_p, omega_q, _ = _load_second_moments(grid, load_model)
    m = incidence(grid).matrix
    a = np.linalg.solve(m, np.eye(m.shape[0]))
    h_inv = a @ np.diag(np.conj(grid.impedance_vector())) @ a.T
    return h_inv @ np.diag(omega_p + omega_q) @ h_inv.conj().T


@dataclass(frozen=True)
class PatternReport:
    """Zero-pattern classification of the inverse analytic covariance.

    Node pairs are classified as operational edges, two-hop pairs (a common
    non-reference neighbor), or far.  Block magnitude is the max absolute
    entry of the 2x2 (v, th) x (v, th) inverse block.
    """

    pair_class: dict[tuple[int, int], str]
    block_norm: dict[tuple[int, int], float]
    far_max: float
    near_min: float


def inverse_pattern_check(grid: GridNetwork, load_model) -> PatternReport:
    """Invert the analytic covariance and report its block sparsity pattern.

    Under the linear model the inverse couples only buses at one or two hops
    (through a non-reference bus); everything farther must vanish.
    """
    source = analytic_covariance_lcpf(grid, load_model)
    omega = source.matrix
    if np.linalg.cond(omega) > 1e14:
        raise StatsError("analytic covariance is singular (zero-variance bus?)")
    prec = np.linalg.inv(omega)
    buses = grid.non_reference_buses
    adj = grid.adjacency()
    nbrs = {b: {w for w in adj[b] if w != grid.reference} for b in buses}
    rows = {
        b: [source.layout.index(b, "a", "v"), source.layout.index(b, "a", "th")] for b in buses
    }
    pair_class: dict[tuple[int, int], str] = {}
    block_norm: dict[tuple[int, int], float] = {}
    far_max, near_min = 0.0, np.inf
    for ai, u in enumerate(buses):
        for w in buses[ai + 1 :]:
            block = prec[np.ix_(rows[u], rows[w])]
            norm = float(np.abs(block).max())
            if w in nbrs[u]:
                cls = "edge"
            elif nbrs[u] & nbrs[w]:
                cls = "two_hop"
            else:
                cls = "far"
            pair_class[(u, w)] = cls
            block_norm[(u, w)] = norm
            if cls == "far":
                far_max = max(far_max, norm)
            else:
                near_min = min(near_min, norm)
    return PatternReport(pair_class, block_norm, far_max, float(near_min))


# -- quartet conditional-independence machinery --------------------------------


@dataclass(frozen=True)
class TestConfig:
    """Which conditional-independence test to run and its threshold."""

    __test__ = False  # not a pytest class, despite the name

    test: str = "mod"
    tau: float = 0.1
    ridge: float | None = None
    cond_limit: float = DEFAULT_COND_LIMIT
    phase: str = "a"

    def __post_init__(self):
        if self.test not in ("abs", "rel", "mod"):
            raise StatsError(f"unknown test {self.test!r}")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise StatsError("threshold must be positive and finite")


@dataclass(frozen=True)
class QuartetStat:
    """Conditional-covariance statistics for one quartet (k, l | i, j)."""

    buses: tuple[int, int, int, int]
    sigma: np.ndarray
    inv_pair_entry: float
    inv_single_i_entry: float
    inv_single_j_entry: float
    sigma_kl: float
    indeterminate: bool


@dataclass(frozen=True)
class CITestResult:
    independent: bool
    statistic: float
    indeterminate: bool
    test: str


def _magnitude_row(layout: VariableLayout, bus: int, phase: str, d: int) -> np.ndarray:
    row = np.zeros(d)
    row[layout.index(bus, phase, "v")] = 1.0
    return row


def _conditioning_rows(layout: VariableLayout, bus: int) -> np.ndarray:
    """Rows mapping layout columns to the conditioning variables of a bus.

    Single phase: the raw (v, th) pair.  Three phase: real and imaginary
    parts of the rotated complex voltage, six rows, built from (v, th) of
    each phase with the reference-angle rotation folded in.
    """
    d = layout.n_vars
    phases = layout.phases
    if len(phases) == 1:
        rows = np.zeros((2, d))
        rows[0, layout.index(bus, phases[0], "v")] = 1.0
        rows[1, layout.index(bus, phases[0], "th")] = 1.0
        return rows
    rows = np.zeros((6, d))
    for t, ph in enumerate(PHASES):
        c, s = np.cos(REF_ANGLES[t]), np.sin(REF_ANGLES[t])
        vcol = layout.index(bus, ph, "v")
        tcol = layout.index(bus, ph, "th")
        rows[t, vcol] = c
        rows[t, tcol] = -s
        rows[3 + t, vcol] = -s
        rows[3 + t, tcol] = -c
    return rows


def _inv_entry01_batch(
    mats: np.ndarray, cfg: TestConfig
) -> tuple[np.ndarray, np.ndarray]:
    """(0,1) entries of the inverses of a (m, s, s) symmetric batch.

    Matrices whose condition number exceeds the limit get a ridge; if still
    ill-conditioned they are flagged indeterminate.
    """
    mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    w, q = np.linalg.eigh(mats)
    dim = mats.shape[-1]
    trace = np.trace(mats, axis1=-2, axis2=-1)
    ridge = cfg.ridge if cfg.ridge is not None else 1e-12 * trace / dim
    ridge = np.broadcast_to(np.asarray(ridge, dtype=float), w.shape[:-1]).copy()

    def conds(vals):
        lo, hi = vals[..., 0], vals[..., -1]
        out = np.full(lo.shape, np.inf)
        good = lo > 0
        out[good] = hi[good] / lo[good]
        return out

    needs = conds(w) > cfg.cond_limit
    w_used = np.where(needs[..., None], w + ridge[..., None], w)
    indeterminate = conds(w_used) > cfg.cond_limit
    safe_w = np.where(w_used == 0.0, 1.0, w_used)
    entries = np.einsum("...j,...j,...j->...", q[..., 0, :], q[..., 1, :], 1.0 / safe_w)
    entries = np.where(indeterminate, np.nan, entries)
    return entries, indeterminate


@dataclass
class PairEntryBatch:
    """Vectorized quartet statistics for many (k, l) pairs, fixed (i, j)."""

    pair: np.ndarray
    single_i: np.ndarray
    single_j: np.ndarray
    sigma_kl: np.ndarray
    indeterminate: np.ndarray


def pair_conditional_entries(
    source: CovarianceSource,
    kl_pairs: np.ndarray,
    i: int,
    j: int,
    cfg: TestConfig,
    with_singles: bool = True,
) -> PairEntryBatch:
    """Assemble and invert the quartet matrices for all given (k, l) pairs.

    The conditioning block for (i, j) is shared across pairs, so the batch
    costs one small eigendecomposition per matrix family rather than per
    quartet.
    """
    kl_pairs = np.asarray(kl_pairs, dtype=int).reshape(-1, 2)
    sigma = source.matrix
    layout = source.layout
    d = layout.n_vars
    ti = _conditioning_rows(layout, i)
    tj = _conditioning_rows(layout, j)
    tc = np.vstack([ti, tj])
    dc = ti.shape[0]
    buses = layout.buses
    vcols = np.array([layout.index(b, cfg.phase, "v") for b in buses])
    pos = {b: r for r, b in enumerate(buses)}
    kpos = np.array([pos[int(k)] for k in kl_pairs[:, 0]])
    lpos = np.array([pos[int(l)] for l in kl_pairs[:, 1]])

    cvv = sigma[np.ix_(vcols, vcols)]
    g = tc @ sigma
    u = g[:, vcols]
    dblock = g @ tc.T
    dblock = 0.5 * (dblock + dblock.T)

    m = len(kl_pairs)
    s = 2 + 2 * dc
    mats = np.empty((m, s, s))
    mats[:, 0, 0] = cvv[kpos, kpos]
    mats[:, 1, 1] = cvv[lpos, lpos]
    mats[:, 0, 1] = mats[:, 1, 0] = cvv[kpos, lpos]
    mats[:, 0, 2:] = u[:, kpos].T
    mats[:, 1, 2:] = u[:, lpos].T
    mats[:, 2:, 0] = u[:, kpos].T
    mats[:, 2:, 1] = u[:, lpos].T
    mats[:, 2:, 2:] = dblock

    pair_entries, indet = _inv_entry01_batch(mats, cfg)
    if with_singles:
        idx_i = np.r_[0, 1, 2 : 2 + dc]
        idx_j = np.r_[0, 1, 2 + dc : 2 + 2 * dc]
        ei, ind_i = _inv_entry01_batch(mats[:, idx_i[:, None], idx_i[None, :]], cfg)
        ej, ind_j = _inv_entry01_batch(mats[:, idx_j[:, None], idx_j[None, :]], cfg)
        indet = indet | ind_i | ind_j
    else:
        ei = np.full(m, np.nan)
        ej = np.full(m, np.nan)
    return PairEntryBatch(
        pair=pair_entries,
        single_i=ei,
        single_j=ej,
        sigma_kl=mats[:, 0, 1].copy(),
        indeterminate=indet,
    )


def quartet(source: CovarianceSource, k: int, l: int, i: int, j: int, cfg: TestConfig | None = None) -> QuartetStat:
    """Build the quartet statistic for (k, l | i, j).

    Variable order is [v_k, v_l, v_i, th_i, v_j, th_j] in single phase, and
    [v_k, v_l, Re V_i (3), Im V_i (3), Re V_j (3), Im V_j (3)] in three
    phase (rotated complex voltages).
    """
    if len({k, l, i, j}) != 4:
        raise StatsError("quartet buses must be distinct")
    cfg = cfg or TestConfig()
    batch = pair_conditional_entries(source, np.array([[k, l]]), i, j, cfg, with_singles=True)
    layout = source.layout
    rows = np.vstack(
        [
            _magnitude_row(layout, k, cfg.phase, layout.n_vars),
            _magnitude_row(layout, l, cfg.phase, layout.n_vars),
            _conditioning_rows(layout, i),
            _conditioning_rows(layout, j),
        ]
    )
    sigma_q = rows @ source.matrix @ rows.T
    return QuartetStat(
        buses=(k, l, i, j),
        sigma=0.5 * (sigma_q + sigma_q.T),
        inv_pair_entry=float(batch.pair[0]),
        inv_single_i_entry=float(batch.single_i[0]),
        inv_single_j_entry=float(batch.single_j[0]),
        sigma_kl=float(batch.sigma_kl[0]),
        indeterminate=bool(batch.indeterminate[0]),
    )


def evaluate_pairs(batch: PairEntryBatch, cfg: TestConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized verdicts: (independent mask, statistic per pair).

    Indeterminate quartets count as dependent (statistic +inf): wrongly
    keeping an edge candidate is later caught by tree validation, whereas a
    false independence silently deletes an edge.
    """
    m = batch.pair.shape[0]
    stat = np.full(m, np.inf)
    ok = ~batch.indeterminate
    apair = np.abs(batch.pair)
    if cfg.test == "abs":
        stat[ok] = apair[ok]
    elif cfg.test == "rel":
        denom = np.abs(batch.sigma_kl)
        good = ok & (denom >= TINY_DENOMINATOR)
        stat[good] = apair[good] / denom[good]
    else:
        di = np.abs(batch.single_i)
        dj = np.abs(batch.single_j)
        ri = np.full(m, np.inf)
        rj = np.full(m, np.inf)
        gi = ok & (di >= TINY_DENOMINATOR)
        gj = ok & (dj >= TINY_DENOMINATOR)
        ri[gi] = apair[gi] / di[gi]
        rj[gj] = apair[gj] / dj[gj]
        stat = np.minimum(ri, rj)
    independent = stat < cfg.tau
    return independent, stat


def ci_test(stat: QuartetStat, cfg: TestConfig) -> CITestResult:
    """Threshold a quartet statistic into independent / dependent."""
    batch = PairEntryBatch(
        pair=np.array([stat.inv_pair_entry]),
        single_i=np.array([stat.inv_single_i_entry]),
        single_j=np.array([stat.inv_single_j_entry]),
        sigma_kl=np.array([stat.sigma_kl]),
        indeterminate=np.array([stat.indeterminate]),
    )
    independent, value = evaluate_pairs(batch, cfg)
    return CITestResult(
        independent=bool(independent[0]),
        statistic=float(value[0]),
        indeterminate=bool(stat.indeterminate or not np.isfinite(value[0])),
        test=cfg.test,
    )
