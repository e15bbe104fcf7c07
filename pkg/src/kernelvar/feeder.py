"""Radial feeder model: topology, LinDistFlow sensitivities and the squared-norm cost transform."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write

logger = logging.getLogger(__name__)

EIG_FLOOR_REL = 1e-12
EIG_NEG_TOL_REL = 1e-9


class TopologyError(ValueError):
    """Feeder graph is not a tree rooted at the substation."""


class FeederValidationError(ValueError):
    """Bad impedance, rating or file content."""


class ConditioningError(ArithmeticError):
    """Matrix is too far from positive (semi)definite to take a square root."""


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True, eq=False)
class FeederTopology:
    """Single-phase radial feeder with buses ``0..N``; bus 0 is the substation.

    ``inverter_ratings[n - 1]`` is the apparent-power rating of the inverter at
    bus ``n`` (0 means no inverter). All quantities are per unit on one base.
    """

    n_buses: int
    lines: tuple[Line, ...]
    inverter_ratings: np.ndarray
    v0: float = 1.0
    # derived, filled in __post_init__
    parent: np.ndarray = field(init=False, repr=False)
    parent_line: np.ndarray = field(init=False, repr=False)
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.n_buses)
        ratings = np.asarray(self.inverter_ratings, dtype=float).copy()
        ratings.setflags(write=False)
        object.__setattr__(self, "inverter_ratings", ratings)
        object.__setattr__(self, "lines", tuple(self.lines))
        if n < 1:
            raise TopologyError("feeder needs at least one non-substation bus")
        if ratings.shape != (n,):
            raise FeederValidationError(f"expected {n} inverter ratings, got shape {ratings.shape}")
        if np.any(~np.isfinite(ratings)) or np.any(ratings < 0):
            raise FeederValidationError("inverter ratings must be finite and >= 0")
        if not (np.isfinite(self.v0) and self.v0 > 0):
            raise FeederValidationError("v0 must be positive")
        if len(self.lines) != n:
            raise TopologyError(f"{n} buses need exactly {n} lines, got {len(self.lines)}")
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n + 1)]
        for k, ln in enumerate(self.lines):
            for b in (ln.from_bus, ln.to_bus):
                if not 0 <= b <= n:
                    raise TopologyError(f"line {k} references unknown bus {b}")
            if ln.from_bus == ln.to_bus:
                raise TopologyError(f"line {k} is a self loop at bus {ln.from_bus}")
            if not (ln.r > 0 and ln.x > 0 and np.isfinite(ln.r) and np.isfinite(ln.x)):
                raise FeederValidationError(
                    f"line {k} ({ln.from_bus},{ln.to_bus}) needs r > 0 and x > 0, got r={ln.r}, x={ln.x}"
                )
            adj[ln.from_bus].append((ln.to_bus, k))
            adj[ln.to_bus].append((ln.from_bus, k))

        parent = np.full(n + 1, -1, dtype=int)
        parent_line = np.full(n + 1, -1, dtype=int)
        seen = np.zeros(n + 1, dtype=bool)
        seen[0] = True
        order = [0]
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v, k in adj[u]:
                if seen[v]:
                    if parent_line[u] != k:
                        raise TopologyError(f"cycle detected through line {k}")
                    continue
                seen[v] = True
                parent[v] = u
                parent_line[v] = k
                order.append(v)
                queue.append(v)
        if not seen.all():
            missing = np.flatnonzero(~seen).tolist()
            raise TopologyError(f"buses {missing} are not connected to the substation")
        for arr in (parent, parent_line):
            arr.setflags(write=False)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "parent_line", parent_line)
        object.__setattr__(self, "order", np.asarray(order))

    @property
    def n(self) -> int:
        return self.n_buses

    @property
    def inverter_buses(self) -> list[int]:
        return [int(i) + 1 for i in np.flatnonzero(self.inverter_ratings > 0)]

    def line_index(self, line: str | tuple[int, int]) -> int:
        """Position of a line given as ``(a, b)`` or ``"a-b"``; direction is ignored."""
        if isinstance(line, str):
            try:
                a, b = (int(s) for s in line.replace(",", "-").split("-"))
            except ValueError:
                raise FeederValidationError(f"cannot parse line id {line!r}") from None
        else:
            a, b = (int(v) for v in line)
        for k, ln in enumerate(self.lines):
            if {ln.from_bus, ln.to_bus} == {a, b}:
                return k
        raise FeederValidationError(f"unknown line ({a},{b})")

    def downstream_matrix(self) -> np.ndarray:
        """``A[k, m-1] = 1`` iff line ``k`` lies on the path from the substation to bus ``m``."""
        n = self.n_buses
        A = np.zeros((n, n))
        # walk buses in reverse BFS order so children are done before parents
        for v in self.order[::-1]:
            if v == 0:
                continue
            k = self.parent_line[v]
            A[k, v - 1] = 1.0
            for child in np.flatnonzero(self.parent == v):
                A[k] = np.maximum(A[k], A[self.parent_line[child]])
        return A

    def child_bus(self, line_idx: int) -> int:
        ln = self.lines[line_idx]
        return ln.to_bus if self.parent[ln.to_bus] == ln.from_bus else ln.from_bus


@dataclass(frozen=True, eq=False)
class Sensitivities:
    R: np.ndarray
    X: np.ndarray


@dataclass(frozen=True, eq=False)
class CostTransform:
    lam: float
    C: np.ndarray
    C_inv: np.ndarray


@dataclass(frozen=True, eq=False)
class GridState:
    p_g: np.ndarray
    p_c: np.ndarray
    q_c: np.ndarray
    q_g: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(getattr(self, f)) for f in ("p_g", "p_c", "q_c", "q_g")}
        if len(shapes) != 1:
            raise ValueError(f"GridState vectors differ in shape: {shapes}")
        if np.any(np.asarray(self.p_g) < 0) or np.any(np.asarray(self.p_c) < 0):
            raise ValueError("p_g and p_c must be non-negative")

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.p_g) - np.asarray(self.p_c)

    @property
    def q(self) -> np.ndarray:
        return np.asarray(self.q_g) - np.asarray(self.q_c)


def build_sensitivities(topology: FeederTopology) -> Sensitivities:
    """R[m, n] (X[m, n]) is the resistance (reactance) shared by the root paths of buses m and n."""
    A = topology.downstream_matrix()
    r = np.array([ln.r for ln in topology.lines])
    x = np.array([ln.x for ln in topology.lines])
    R = A.T @ (r[:, None] * A)
    X = A.T @ (x[:, None] * A)
    return Sensitivities(R=R, X=X)


def _check_dims(sens: Sensitivities, *vecs: np.ndarray):
    n = sens.R.shape[0]
    for v in vecs:
        if np.shape(v)[0] != n:
            raise ValueError(f"vector of length {np.shape(v)[0]} does not match {n} buses")


def voltage_profile(state: GridState, sens: Sensitivities, v0: float) -> np.ndarray:
    _check_dims(sens, state.p_g)
    return sens.R @ state.p + sens.X @ state.q + v0


def evaluate_cost(state: GridState, sens: Sensitivities, lam: float) -> float:
    """Weighted voltage-deviation plus loss cost ``lam*|Rp+Xq|^2 + (1-lam)*q'Rq``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    _check_dims(sens, state.p_g)
    return float(cost_batch(sens, lam, state.p_g, state.p_c, state.q_c, state.q_g))


def cost_batch(sens: Sensitivities, lam: float, p_g, p_c, q_c, q_g) -> np.ndarray:
    """Vectorized :func:`evaluate_cost` over scenario rows (arrays of shape ``(T, N)`` or ``(N,)``)."""
    p = np.asarray(p_g) - np.asarray(p_c)
    q = np.asarray(q_g) - np.asarray(q_c)
    dv = p @ sens.R.T + q @ sens.X.T
    return lam * np.sum(dv * dv, axis=-1) + (1.0 - lam) * np.sum((q @ sens.R) * q, axis=-1)


def spd_sqrt(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square root and its inverse via eigendecomposition.

    Eigenvalues are floored at ``1e-12 * max eigenvalue``; a ``ConditioningError``
    is raised if any eigenvalue is below ``-1e-9 * max eigenvalue``.
    """
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    top = w[-1]
    if not top > 0:
        raise ConditioningError("matrix has no positive eigenvalue")
    if w[0] < -EIG_NEG_TOL_REL * top:
        raise ConditioningError(f"matrix is not PSD: min eigenvalue {w[0]:.3e}, max {top:.3e}")
    w = np.maximum(w, EIG_FLOOR_REL * top)
    s = np.sqrt(w)
    S = (V * s) @ V.T
    S_inv = (V / s) @ V.T
    return 0.5 * (S + S.T), 0.5 * (S_inv + S_inv.T)


def build_cost_transform(sens: Sensitivities, lam: float) -> CostTransform:
    """Square-root factor ``C`` with ``C @ C == (1 - lam) R + lam X^2``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    M = (1.0 - lam) * sens.R + lam * (sens.X @ sens.X)
    C, C_inv = spd_sqrt(M)
    return CostTransform(lam=float(lam), C=C, C_inv=C_inv)


def compute_y(p_g, p_c, q_c, transform: CostTransform, sens: Sensitivities) -> np.ndarray:
    """Offset vector(s) completing the square of the cost in ``q_g``.

    Inputs may be ``(N,)`` vectors or ``(T, N)`` scenario rows; the result has the same shape.
    """
    lam = transform.lam
    R, X = sens.R, sens.X
    p = np.asarray(p_g, dtype=float) - np.asarray(p_c, dtype=float)
    q_c = np.asarray(q_c, dtype=float)
    # row-vector form: v @ M.T == (M @ v.T).T
    rhs = -(1.0 - lam) * (q_c @ R.T) + lam * (p @ (X @ R).T) - lam * (q_c @ (X @ X).T)
    return rhs @ transform.C_inv.T


def line_flow_features(
    topology: FeederTopology, p_g, p_c, lines: Sequence[str | tuple[int, int]]
) -> np.ndarray:
    """Lossless active flow on each requested line, positive from parent to child.

    The flow equals minus the net injection ``p_g - p_c`` summed over the subtree
    hanging below the line. Works on ``(N,)`` vectors or ``(T, N)`` rows.
    """
    idx = [topology.line_index(ln) for ln in lines]
    A = topology.downstream_matrix()[idx]
    p = np.asarray(p_g, dtype=float) - np.asarray(p_c, dtype=float)
    return -(p @ A.T)


# ---------------------------------------------------------------------------
# file I/O


def _read_rows(path: Path, required: Sequence[str]) -> Iterable[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise FeederValidationError(f"{path}: missing columns {missing} (header {header})")
        reader.fieldnames = header
        for row in reader:
            yield reader.line_num, row


def _num(path, lineno, row, col) -> float:
    raw = (row.get(col) or "").strip()
    try:
        val = float(raw)
    except ValueError:
        raise FeederValidationError(f"{path}:{lineno}: column {col!r} is not a number: {raw!r}") from None
    if not np.isfinite(val):
        raise FeederValidationError(f"{path}:{lineno}: column {col!r} is not finite")
    return val


def read_feeder(lines_csv, buses_csv, v0: float = 1.0) -> tuple[FeederTopology, np.ndarray | None]:
    """Load ``lines.csv`` / ``buses.csv``.

    Returns the topology and the optional per-bus benchmark load peaks (column
    ``load_peak_pu`` of ``buses.csv``), or ``None`` if that column is absent.
    """
    lines_csv, buses_csv = Path(lines_csv), Path(buses_csv)
    lines = []
    for lineno, row in _read_rows(lines_csv, ["from", "to", "r_pu", "x_pu"]):
        try:
            a, b = int(row["from"]), int(row["to"])
        except (TypeError, ValueError):
            raise FeederValidationError(f"{lines_csv}:{lineno}: bus ids must be integers") from None
        r, x = _num(lines_csv, lineno, row, "r_pu"), _num(lines_csv, lineno, row, "x_pu")
        if r <= 0 or x <= 0:
            raise FeederValidationError(f"{lines_csv}:{lineno}: r_pu and x_pu must be > 0")
        lines.append(Line(a, b, r, x))
    n = len(lines)
    ratings = np.zeros(n)
    peaks = None
    seen = set()
    with open(buses_csv, newline="") as fh:
        has_peaks = "load_peak_pu" in [h.strip() for h in next(csv.reader(fh), [])]
    if has_peaks:
        peaks = np.zeros(n)
    for lineno, row in _read_rows(buses_csv, ["bus", "s_rating_pu"]):
        try:
            bus = int(row["bus"])
        except (TypeError, ValueError):
            raise FeederValidationError(f"{buses_csv}:{lineno}: bus id must be an integer") from None
        if bus == 0:
            continue
        if not 1 <= bus <= n:
            raise FeederValidationError(f"{buses_csv}:{lineno}: bus {bus} outside 1..{n}")
        if bus in seen:
            raise FeederValidationError(f"{buses_csv}:{lineno}: duplicate bus {bus}")
        seen.add(bus)
        s = _num(buses_csv, lineno, row, "s_rating_pu")
        if s < 0:
            raise FeederValidationError(f"{buses_csv}:{lineno}: s_rating_pu must be >= 0")
        ratings[bus - 1] = s
        if peaks is not None and (row.get("load_peak_pu") or "").strip():
            peaks[bus - 1] = _num(buses_csv, lineno, row, "load_peak_pu")
    return FeederTopology(n_buses=n, lines=tuple(lines), inverter_ratings=ratings, v0=v0), peaks


def write_feeder(topology: FeederTopology, lines_csv, buses_csv, load_peaks=None):
    with atomic_write(lines_csv, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "r_pu", "x_pu"])
        for ln in topology.lines:
            w.writerow([ln.from_bus, ln.to_bus, repr(ln.r), repr(ln.x)])
    with atomic_write(buses_csv, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "s_rating_pu"] + (["load_peak_pu"] if load_peaks is not None else []))
        for n in range(1, topology.n_buses + 1):
            row = [n, repr(float(topology.inverter_ratings[n - 1]))]
            if load_peaks is not None:
                row.append(repr(float(load_peaks[n - 1])))
            w.writerow(row)


def ieee13_feeder() -> tuple[FeederTopology, np.ndarray]:
    """Bundled single-phase IEEE-13-style feeder (12 buses + substation) with benchmark load peaks."""
    here = Path(__file__).parent / "data" / "ieee13"
    topo, peaks = read_feeder(here / "lines.csv", here / "buses.csv")
    assert peaks is not None
    return topo, peaks


def random_tree(n: int, rng: np.random.Generator, rating: float = 0.0) -> FeederTopology:
    """Random radial feeder with ``n`` buses; handy for tests and property checks."""
    lines = []
    for v in range(1, n + 1):
        u = int(rng.integers(0, v))
        lines.append(Line(u, v, float(rng.uniform(0.005, 0.05)), float(rng.uniform(0.005, 0.05))))
    return FeederTopology(n_buses=n, lines=tuple(lines), inverter_ratings=np.full(n, rating))
