"""Jacobian machinery for black-box measurement functions.

Central finite differences cost two evaluations per parameter. When the
Jacobian is sparse, parameters that never touch a common sensor can be
perturbed together: the sparsity pattern becomes a conflict graph, a greedy
coloring groups the parameters, and one condensed column per color is
expanded back through the pattern mask. For stacked states only the newest
interval is perturbed and the simulation horizon is extended, producing all
lagged blocks of one parameter interval in a single sweep.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GradientEvalError",
    "InvalidColoringError",
    "EvalCounter",
    "IncidenceMatrix",
    "ColorAssignment",
    "JacobianSet",
    "StaggeredScheduleEntry",
    "BlockCache",
    "fd_jacobian",
    "detect_incidence",
    "sequential_color",
    "multi_start_color",
    "validate_coloring",
    "condense",
    "inflate",
    "psp_jacobian",
    "staggered_plan",
    "save_incidence",
    "load_incidence",
    "save_coloring",
    "load_coloring",
]


class GradientEvalError(RuntimeError):
    """A perturbed evaluation returned non-finite output."""


class InvalidColoringError(ValueError):
    """Two parameters sharing a color conflict on some measurement row."""


class EvalCounter:
    """Thread-safe tally of black-box evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.evaluations = 0

    def add(self, k: int = 1):
        with self._lock:
            self.evaluations += k


@dataclass(frozen=True)
class IncidenceMatrix:
    """Zero-one mask of which parameters can affect which measurements."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries)
        if entries.ndim != 2:
            raise ValueError("incidence must be 2-D")
        if not np.all((entries == 0) | (entries == 1)):
            raise ValueError("incidence entries must be 0 or 1")
        object.__setattr__(self, "entries", entries.astype(np.uint8))

    @property
    def n_measurements(self) -> int:
        return self.entries.shape[0]

    @property
    def n_parameters(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class ColorAssignment:
    """Partition of parameters into mutually non-conflicting groups."""

    colors: np.ndarray  # color index per parameter
    num_colors: int

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.int64)
        if colors.ndim != 1:
            raise ValueError("colors must be 1-D")
        if colors.size and (colors.min() < 0 or colors.max() >= self.num_colors):
            raise ValueError("color indices out of range")
        object.__setattr__(self, "colors", colors)

    @property
    def n_parameters(self) -> int:
        return self.colors.shape[0]

    @property
    def d_matrix(self) -> np.ndarray:
        """One-hot n-by-p assignment matrix (one 1 per row)."""
        d = np.zeros((self.n_parameters, self.num_colors), dtype=np.uint8)
        d[np.arange(self.n_parameters), self.colors] = 1
        return d

    def members(self, color: int) -> np.ndarray:
        return np.flatnonzero(self.colors == color)


@dataclass
class JacobianSet:
    """Blocks keyed by (measurement interval, parameter interval)."""

    blocks: dict = field(default_factory=dict)

    def add(self, meas_interval: int, param_interval: int, block: np.ndarray):
        block = np.asarray(block, dtype=float)
        if not np.all(np.isfinite(block)):
            raise ValueError("jacobian block contains non-finite entries")
        self.blocks[(meas_interval, param_interval)] = block

    def get(self, meas_interval: int, param_interval: int):
        return self.blocks.get((meas_interval, param_interval))


def _conflict_adjacency(incidence: IncidenceMatrix) -> list[set]:
    """Adjacency sets of the conflict graph, built row by row.

    Every measurement row cliques its nonzero columns; this avoids the
    all-pairs column scan when rows are sparse.
    """
    n = incidence.n_parameters
    adj = [set() for _ in range(n)]
    for row in incidence.entries:
        cols = np.flatnonzero(row)
        if cols.size < 2:
            continue
        colset = set(cols.tolist())
        for c in cols:
            adj[c] |= colset
    for c in range(n):
        adj[c].discard(c)
    return adj


def sequential_color(incidence: IncidenceMatrix, order=None) -> ColorAssignment:
    """Greedy first-fit coloring of the conflict graph in the given order."""
    n = incidence.n_parameters
    if order is None:
        order = np.arange(n)
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(n)):
        raise ValueError("order must be a permutation of the parameters")
    adj = _conflict_adjacency(incidence)
    colors = np.full(n, -1, dtype=np.int64)
    num = 0
    for v in order:
        taken = {colors[u] for u in adj[v] if colors[u] >= 0}
        c = 0
        while c in taken:
            c += 1
        colors[v] = c
        num = max(num, c + 1)
    return ColorAssignment(colors=colors, num_colors=num)


def multi_start_color(incidence: IncidenceMatrix, num_orders: int,
                      seed: int | None = None) -> ColorAssignment:
    """Best greedy coloring over the natural order plus seeded random orders."""
    if num_orders < 1:
        raise ValueError("num_orders must be >= 1")
    rng = np.random.default_rng(seed)
    n = incidence.n_parameters
    best = sequential_color(incidence)
    for _ in range(num_orders):
        cand = sequential_color(incidence, rng.permutation(n))
        if cand.num_colors < best.num_colors:
            best = cand
    return best


def validate_coloring(coloring: ColorAssignment, incidence: IncidenceMatrix) -> bool:
    """Check independently that no measurement row sees a color twice."""
    if coloring.n_parameters != incidence.n_parameters:
        return False
    for row in incidence.entries:
        cols = np.flatnonzero(row)
        cs = coloring.colors[cols]
        if len(set(cs.tolist())) != cs.size:
            return False
    return True


def fd_jacobian(eval_fn, point: np.ndarray, step, workers: int | None = None,
                counter: EvalCounter | None = None) -> np.ndarray:
    """Central-difference Jacobian: 2n evaluations, one column per parameter."""
    point = np.asarray(point, dtype=float)
    n = point.shape[0]
    step = np.broadcast_to(np.asarray(step, dtype=float), (n,))
    if np.any(step <= 0):
        raise ValueError("finite-difference steps must be positive")

    def one_sided(args):
        j, sign = args
        x = point.copy()
        x[j] += sign * step[j]
        out = np.asarray(eval_fn(x), dtype=float)
        if counter is not None:
            counter.add()
        if not np.all(np.isfinite(out)):
            raise GradientEvalError(f"non-finite output perturbing parameter {j}")
        return out

    tasks = [(j, s) for j in range(n) for s in (+1.0, -1.0)]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(one_sided, tasks))
    else:
        outs = [one_sided(t) for t in tasks]
    m = outs[0].shape[0]
    jac = np.empty((m, n))
    for j in range(n):
        jac[:, j] = (outs[2 * j] - outs[2 * j + 1]) / (2.0 * step[j])
    return jac


def detect_incidence(jacobians, threshold: float = 0.0) -> IncidenceMatrix:
    """Union of nonzero patterns over all recorded Jacobian blocks.

    Entry (i, j) is 1 when |H[i, j]| exceeds ``threshold`` in any interval;
    the default of 0 detects exact structural zeros of a deterministic
    simulator.
    """
    mats = []
    for item in jacobians:
        if isinstance(item, JacobianSet):
            mats.extend(item.blocks.values())
        else:
            mats.append(np.asarray(item, dtype=float))
    if not mats:
        raise ValueError("need at least one recorded jacobian")
    shape = mats[0].shape
    mask = np.zeros(shape, dtype=bool)
    for mat in mats:
        if mat.shape != shape:
            raise ValueError("jacobian blocks have inconsistent shapes")
        mask |= np.abs(mat) > threshold
    return IncidenceMatrix(entries=mask.astype(np.uint8))


def condense(h: np.ndarray, d: ColorAssignment) -> np.ndarray:
    """Sum same-color columns: the m-by-p condensed matrix H @ D."""
    h = np.asarray(h, dtype=float)
    if h.shape[1] != d.n_parameters:
        raise ValueError("matrix width does not match coloring")
    return h @ d.d_matrix


def inflate(h_condensed: np.ndarray, d: ColorAssignment,
            incidence: IncidenceMatrix) -> np.ndarray:
    """Expand a condensed matrix back through the sparsity mask.

    Exact inverse of ``condense`` for any matrix whose zero pattern is
    dominated by the incidence matrix.
    """
    h_condensed = np.asarray(h_condensed, dtype=float)
    if not validate_coloring(d, incidence):
        raise InvalidColoringError("coloring conflicts with the incidence matrix")
    if h_condensed.shape != (incidence.n_measurements, d.num_colors):
        raise ValueError("condensed matrix shape does not match coloring/incidence")
    # (H~ D^T)[i, j] selects column color(j); the mask kills borrowed entries.
    return h_condensed[:, d.colors] * incidence.entries


def psp_jacobian(eval_fn, point: np.ndarray, coloring: ColorAssignment,
                 incidence: IncidenceMatrix, step, workers: int | None = None,
                 counter: EvalCounter | None = None) -> np.ndarray:
    """Partitioned simultaneous perturbation: 2p evaluations for p colors.

    All parameters of one color move together by that color's step; the
    condensed columns are inflated through the incidence mask.
    """
    point = np.asarray(point, dtype=float)
    p = coloring.num_colors
    steps = np.broadcast_to(np.asarray(step, dtype=float), (p,))
    if np.any(steps <= 0):
        raise ValueError("perturbation steps must be positive")
    if not validate_coloring(coloring, incidence):
        raise InvalidColoringError("coloring conflicts with the incidence matrix")

    def one_sided(args):
        k, sign = args
        x = point.copy()
        members = coloring.members(k)
        x[members] += sign * steps[k]
        out = np.asarray(eval_fn(x), dtype=float)
        if counter is not None:
            counter.add()
        if not np.all(np.isfinite(out)):
            raise GradientEvalError(f"non-finite output perturbing color {k}")
        return out

    tasks = [(k, s) for k in range(p) for s in (+1.0, -1.0)]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(one_sided, tasks))
    else:
        outs = [one_sided(t) for t in tasks]
    m = outs[0].shape[0]
    condensed = np.empty((m, p))
    for k in range(p):
        condensed[:, k] = (outs[2 * k] - outs[2 * k + 1]) / (2.0 * steps[k])
    return inflate(condensed, coloring, incidence)


@dataclass(frozen=True)
class StaggeredScheduleEntry:
    """One sweep: perturb only x_t, simulate [t, t + degree - 1].

    ``produces`` lists the (measurement interval, parameter interval) block
    keys the sweep yields; cached blocks cover the remaining columns of each
    calibration row.
    """

    interval: int
    horizon: tuple[int, int]
    produces: tuple

    @property
    def horizon_length(self) -> int:
        return self.horizon[1] - self.horizon[0] + 1


def staggered_plan(interval: int, degree: int) -> StaggeredScheduleEntry:
    if interval < 1:
        raise ValueError("interval must be >= 1")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    end = interval + degree - 1
    produces = tuple((h, interval) for h in range(interval, end + 1))
    return StaggeredScheduleEntry(interval=interval, horizon=(interval, end),
                                  produces=produces)


class BlockCache:
    """Cache of computed Jacobian blocks, reused instead of recomputed.

    ``assemble_row(t, r)`` returns [H_t^t, H_t^{t-1}, ...]; parameter
    intervals outside 1..t contribute zero blocks. Entries older than the
    augmentation window are pruned.
    """

    def __init__(self, n_measurements: int, n_parameters: int):
        self.m = n_measurements
        self.n = n_parameters
        self._blocks: dict = {}

    def store(self, meas_interval: int, param_interval: int, block: np.ndarray):
        block = np.asarray(block, dtype=float)
        if block.shape != (self.m, self.n):
            raise ValueError("block shape mismatch")
        self._blocks[(meas_interval, param_interval)] = block

    def has(self, meas_interval: int, param_interval: int) -> bool:
        return (meas_interval, param_interval) in self._blocks

    def assemble_row(self, interval: int, degree: int) -> np.ndarray:
        parts = []
        for lag in range(degree):
            k = interval - lag
            block = self._blocks.get((interval, k))
            if block is None:
                block = np.zeros((self.m, self.n))
            parts.append(block)
        return np.concatenate(parts, axis=1)

    def prune_before(self, param_interval: int):
        stale = [key for key in self._blocks if key[1] < param_interval]
        for key in stale:
            del self._blocks[key]


def save_incidence(path, incidence: IncidenceMatrix):
    """Sparse text format: header 'incidence m n', then per-row column lists."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"incidence {incidence.n_measurements} {incidence.n_parameters}\n")
        for row in incidence.entries:
            cols = np.flatnonzero(row)
            fh.write(" ".join(str(int(c)) for c in cols) + "\n")


def load_incidence(path) -> IncidenceMatrix:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "incidence":
            raise ValueError(f"{path}: not an incidence file")
        m, n = int(header[1]), int(header[2])
        entries = np.zeros((m, n), dtype=np.uint8)
        for i in range(m):
            line = fh.readline()
            if line == "":
                raise ValueError(f"{path}: expected {m} rows, got {i}")
            for tok in line.split():
                j = int(tok)
                if not 0 <= j < n:
                    raise ValueError(f"{path}: column {j} out of range on row {i}")
                entries[i, j] = 1
    return IncidenceMatrix(entries=entries)


def save_coloring(path, coloring: ColorAssignment):
    """Text format: header 'coloring n p', then 'parameter color' pairs."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"coloring {coloring.n_parameters} {coloring.num_colors}\n")
        for j, c in enumerate(coloring.colors):
            fh.write(f"{j} {int(c)}\n")


def load_coloring(path) -> ColorAssignment:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "coloring":
            raise ValueError(f"{path}: not a coloring file")
        n, p = int(header[1]), int(header[2])
        colors = np.full(n, -1, dtype=np.int64)
        for line in fh:
            j, c = (int(t) for t in line.split())
            colors[j] = c
    if np.any(colors < 0):
        raise ValueError(f"{path}: missing color assignments")
    return ColorAssignment(colors=colors, num_colors=p)
