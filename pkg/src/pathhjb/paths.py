"""Grid-based path spaces, the d0 metric, Lipschitz path classes and epsilon-nets.

Paths live on the nodes of a uniform time grid.  A path ``x_t`` stores its
node values up to the anchor index ``t`` plus an optional jump at the anchor
(the vertical perturbation ``x_t^h``).  Everything downstream evaluates paths
at node times only.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CONTINUOUS = "continuous_piecewise_linear"
CADLAG = "cadlag_piecewise_constant"

DEFAULT_LATTICE_CAP = 200_000


class CapExceeded(RuntimeError):
    """A combinatorial enumeration would exceed its configured size cap."""


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"need at least one step, got N={self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    def time(self, i: int) -> float:
        return self.T if i == self.N else i * self.dt


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridPath:
    """A path ``x_t`` on ``grid`` known at nodes ``0..anchor_index``.

    ``values`` has shape ``(anchor_index + 1, d)``.  ``terminal_jump`` is the
    vertical perturbation added at the anchor node only.  Use :attr:`nodes`
    for the observed node values (jump absorbed).
    """

    grid: TimeGrid
    values: np.ndarray
    terminal_jump: np.ndarray = None
    regularity: str = CONTINUOUS
    _nodes: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] < 1:
            raise ValueError("path values must be a nonempty (n, d) array")
        if vals.shape[0] > self.grid.N + 1:
            raise GridMismatch("path is longer than its grid")
        d = vals.shape[1]
        jump = np.zeros(d) if self.terminal_jump is None else np.asarray(self.terminal_jump, dtype=float).reshape(-1)
        if jump.shape != (d,):
            raise ValueError(f"terminal jump has dimension {jump.shape[0]}, path has {d}")
        reg = self.regularity
        if reg not in (CONTINUOUS, CADLAG):
            raise ValueError(f"unknown regularity {reg!r}")
        if np.any(jump != 0):
            reg = CADLAG
        nodes = vals.copy()
        nodes[-1] += jump
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "terminal_jump", _frozen(jump))
        object.__setattr__(self, "regularity", reg)
        object.__setattr__(self, "_nodes", _frozen(nodes))

    @property
    def anchor_index(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def batch_shape(self) -> tuple:
        return ()

    @property
    def anchor_time(self) -> float:
        return self.grid.time(self.anchor_index)

    @property
    def nodes(self) -> np.ndarray:
        """Observed node values, jump included at the anchor."""
        return self._nodes

    @property
    def terminal(self) -> np.ndarray:
        return self._nodes[-1]

    @property
    def is_continuous(self) -> bool:
        return self.regularity == CONTINUOUS

    def __call__(self, i: int) -> np.ndarray:
        """Value ``x(t_i)``; nodes past the anchor see the frozen value."""
        return self._nodes[min(i, self.anchor_index)]

    def restrict(self, i: int) -> "GridPath":
        if i < 0 or i > self.anchor_index:
            raise IndexError(f"cannot restrict path anchored at {self.anchor_index} to {i}")
        if i == self.anchor_index:
            return self
        return GridPath(self.grid, self._nodes[: i + 1], regularity=self.regularity)

    def extend(self, value) -> "GridPath":
        """Append one node; a pending jump becomes part of the history."""
        value = np.asarray(value, dtype=float).reshape(1, self.dim)
        return GridPath(self.grid, np.vstack([self._nodes, value]), regularity=self.regularity)

    def key(self, decimals: int = 12) -> bytes:
        return np.round(self._nodes, decimals).tobytes() + self.anchor_index.to_bytes(4, "little")

    def __repr__(self):
        return f"GridPath(anchor={self.anchor_index}, d={self.dim}, nodes={self._nodes.tolist()})"


def constant_path(grid: TimeGrid, value, anchor_index: int = 0) -> GridPath:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return GridPath(grid, np.tile(value, (anchor_index + 1, 1)))


def _check_same_grid(x: GridPath, y: GridPath):
    if x.grid != y.grid:
        raise GridMismatch(f"paths live on different grids: {x.grid} vs {y.grid}")
    if x.dim != y.dim:
        raise GridMismatch(f"dimension mismatch: {x.dim} vs {y.dim}")


def sup_norm(x: GridPath) -> float:
    """``||x_t||_0``: max Euclidean norm over nodes, left limit at the anchor included."""
    raw = np.linalg.norm(x.values, axis=1).max()
    return float(max(raw, np.linalg.norm(x.terminal)))


def path_difference(x: GridPath, y: GridPath) -> GridPath:
    _check_same_grid(x, y)
    if x.anchor_index != y.anchor_index:
        raise GridMismatch("difference needs equal anchors")
    return GridPath(x.grid, x.values - y.values, x.terminal_jump - y.terminal_jump)


def sup_distance(x: GridPath, y: GridPath) -> float:
    return sup_norm(path_difference(x, y))


def d0(x: GridPath, y: GridPath) -> float:
    """Metric on paths with (possibly) different anchors.

    The shorter path is held at its anchor value past its anchor time.
    """
    _check_same_grid(x, y)
    if x.anchor_index > y.anchor_index:
        x, y = y, x
    r, t = x.anchor_index, y.anchor_index
    if r == t:
        return sup_distance(x, y)
    # nodes strictly before r compare node to node; x's left limit at r is x.values[r]
    worst = 0.0
    if r > 0:
        worst = float(np.linalg.norm(x.values[:r] - y.values[:r], axis=1).max())
    worst = max(worst, float(np.linalg.norm(x.values[r] - y.values[r])))
    xr = x.terminal
    tail = np.linalg.norm(y.nodes[r:] - xr, axis=1).max()
    tail = max(tail, np.linalg.norm(y.values[t] - xr))
    worst = max(worst, float(tail))
    gap = x.grid.time(t) - x.grid.time(r)
    return math.sqrt(abs(gap)) + worst


def horizontal_extension(x: GridPath, extra_steps: int) -> GridPath:
    if extra_steps < 0:
        raise ValueError("extra_steps must be nonnegative")
    if x.anchor_index + extra_steps > x.grid.N:
        raise GridMismatch(f"extension past the horizon: {x.anchor_index} + {extra_steps} > {x.grid.N}")
    if extra_steps == 0:
        return x
    tail = np.tile(x.terminal, (extra_steps, 1))
    return GridPath(x.grid, np.vstack([x.nodes, tail]), regularity=x.regularity)


def vertical_perturbation(x: GridPath, h) -> GridPath:
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.shape != (x.dim,):
        raise ValueError(f"perturbation has shape {h.shape}, path dimension is {x.dim}")
    if not np.any(h):
        return x
    jump = x.terminal_jump + h
    reg = CADLAG if np.any(jump != 0) else CONTINUOUS
    return GridPath(x.grid, x.values, jump, regularity=reg)


@dataclass(frozen=True)
class PathClassSpec:
    """Finite-grid stand-in for the compact class of ``k``-Lipschitz extensions of ``base``."""

    k: float
    base: GridPath
    end_index: int

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("class bound k must be positive")
        if not self.base.anchor_index <= self.end_index <= self.base.grid.N:
            raise ValueError("need base anchor <= end_index <= N")

    @property
    def start_index(self) -> int:
        return self.base.anchor_index

    @property
    def steps(self) -> int:
        return self.end_index - self.start_index


def class_contains(spec: PathClassSpec, x: GridPath, rtol: float = 1e-12) -> bool:
    base = spec.base
    if x.grid != base.grid or x.dim != base.dim:
        return False
    if x.anchor_index != spec.end_index or not x.is_continuous:
        return False
    s = spec.start_index
    if not np.allclose(x.values[: s + 1], base.nodes, rtol=0, atol=1e-12):
        return False
    inc = np.linalg.norm(np.diff(x.values[s:], axis=0), axis=1)
    limit = spec.k * x.grid.dt
    return bool(np.all(inc <= limit * (1 + rtol) + 1e-15))


def lattice_size(spec: PathClassSpec, levels: int) -> int:
    return levels ** (spec.base.dim * spec.steps)


def enumerate_class_lattice(spec: PathClassSpec, levels: int, cap: int = DEFAULT_LATTICE_CAP) -> list[GridPath]:
    """All paths of the class whose per-step slope lies on the ``levels``-point grid of ``[-k, k]^d``.

    Output order is lexicographic in the slope indices (first step most significant).
    """
    if levels < 1 or levels % 2 == 0:
        raise ValueError("levels must be a positive odd integer so that slope 0 is included")
    count = lattice_size(spec, levels)
    if count > cap:
        raise CapExceeded(f"class lattice has {count} members, cap is {cap}")
    grid, d = spec.base.grid, spec.base.dim
    if spec.steps == 0:
        return [GridPath(grid, spec.base.nodes)]
    slopes_1d = np.linspace(-spec.k, spec.k, levels) if levels > 1 else np.zeros(1)
    # Euclidean ball constraint: scale per-component slopes so that |slope| <= k
    slope_vectors = np.array(list(itertools.product(slopes_1d, repeat=d)))
    if d > 1:
        norms = np.linalg.norm(slope_vectors, axis=1)
        scale = np.where(norms > spec.k, spec.k / np.maximum(norms, 1e-300), 1.0)
        slope_vectors = slope_vectors * scale[:, None]
    prefix = spec.base.nodes
    out = []
    for combo in itertools.product(range(len(slope_vectors)), repeat=spec.steps):
        incs = slope_vectors[list(combo)] * grid.dt
        tail = prefix[-1] + np.cumsum(incs, axis=0)
        out.append(GridPath(grid, np.vstack([prefix, tail])))
    return out


@dataclass(frozen=True)
class NetPartition:
    spec: PathClassSpec
    delta: float
    centers: list
    levels: int

    @property
    def radius(self) -> float:
        return self.delta / 3.0

    def assign(self, x: GridPath, nearest_fallback: bool = False) -> int:
        """Index of the first center within ``delta/3`` (the cell ``D^j`` holding ``x``)."""
        dists = [sup_distance(x, c) for c in self.centers]
        for j, dist in enumerate(dists):
            if dist <= self.radius:
                return j
        if nearest_fallback:
            return int(np.argmin(dists))
        raise ValueError("path lies outside every ball of the net")

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.spec.k,
                "start_index": self.spec.start_index,
                "end_index": self.spec.end_index,
                "delta": self.delta,
                "levels": self.levels,
                "grid": {"T": self.spec.base.grid.T, "N": self.spec.base.grid.N},
                "base": self.spec.base.nodes.tolist(),
                "centers": [c.nodes.tolist() for c in self.centers],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "NetPartition":
        data = json.loads(text)
        grid = TimeGrid(data["grid"]["T"], data["grid"]["N"])
        base = GridPath(grid, np.array(data["base"]))
        spec = PathClassSpec(data["k"], base, data["end_index"])
        centers = [GridPath(grid, np.array(c)) for c in data["centers"]]
        return cls(spec, data["delta"], centers, data["levels"])


def build_epsilon_net(spec: PathClassSpec, delta: float, levels: int, cap: int = DEFAULT_LATTICE_CAP) -> NetPartition:
    """Greedy ball-subtraction partition of the class lattice into cells of diameter < delta."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    members = enumerate_class_lattice(spec, levels, cap=cap)
    radius = delta / 3.0
    centers: list[GridPath] = []
    for x in members:
        if not any(sup_distance(x, c) <= radius for c in centers):
            centers.append(x)
    return NetPartition(spec, delta, centers, levels)


def net_cells(net: NetPartition, members: Iterable[GridPath]) -> list[list[GridPath]]:
    cells: list[list[GridPath]] = [[] for _ in net.centers]
    for x in members:
        cells[net.assign(x)].append(x)
    return cells


def path_to_csv(x: GridPath) -> str:
    buf = io.StringIO()
    buf.write(f"# T={x.grid.T!r} N={x.grid.N} regularity={x.regularity}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time"] + [f"component_{c}" for c in range(x.dim)])
    for i, row in enumerate(x.values):
        w.writerow([repr(x.grid.time(i))] + [repr(float(v)) for v in row])
    w.writerow(["terminal_jump"] + [repr(float(v)) for v in x.terminal_jump])
    return buf.getvalue()


def path_from_csv(text: str) -> GridPath:
    lines = text.splitlines()
    meta = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split())
    grid = TimeGrid(float(meta["T"]), int(meta["N"]))
    rows = list(csv.reader(lines[1:]))
    body = [r for r in rows[1:] if r and r[0] != "terminal_jump"]
    jump_row = [r for r in rows if r and r[0] == "terminal_jump"]
    values = np.array([[float(v) for v in r[1:]] for r in body])
    jump = np.array([float(v) for v in jump_row[0][1:]]) if jump_row else None
    return GridPath(grid, values, jump, regularity=meta.get("regularity", CONTINUOUS))


def as_path(grid: TimeGrid, data: Sequence) -> GridPath:
    """Build a path from nested lists (a scalar or a vector gives a one-node path)."""
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return GridPath(grid, arr)


class PathBatch:
    """A stack of paths sharing grid and anchor, for vectorized coefficient calls.

    ``nodes`` has shape ``(anchor_index + 1, d, *batch_shape)``.  It exposes the
    read-only part of the :class:`GridPath` interface that coefficient
    functionals use: calling with a node index, ``nodes``, ``terminal``.
    """

    def __init__(self, grid: TimeGrid, nodes: np.ndarray):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim < 2:
            raise ValueError("batch nodes need at least (n, d) axes")
        self.grid = grid
        self.nodes = nodes

    @classmethod
    def stack(cls, paths: Sequence[GridPath]) -> "PathBatch":
        first = paths[0]
        return cls(first.grid, np.stack([p.nodes for p in paths], axis=-1))

    @classmethod
    def from_path(cls, x) -> "PathBatch":
        return x if isinstance(x, PathBatch) else cls(x.grid, x.nodes)

    @property
    def anchor_index(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def batch_shape(self) -> tuple:
        return self.nodes.shape[2:]

    @property
    def terminal(self) -> np.ndarray:
        return self.nodes[-1]

    def __call__(self, i: int) -> np.ndarray:
        return self.nodes[min(i, self.anchor_index)]

    def with_anchor_values(self, values: np.ndarray) -> "PathBatch":
        nodes = np.broadcast_to(self.nodes, self.nodes.shape[:2] + np.broadcast_shapes(self.batch_shape, values.shape[1:])).copy()
        nodes[-1] = values
        return PathBatch(self.grid, nodes)


def batch_shape_of(x) -> tuple:
    return getattr(x, "batch_shape", ())


def lift(a, x) -> np.ndarray:
    """Append singleton axes to ``a`` so it broadcasts against values of the batch ``x``."""
    a = np.asarray(a, dtype=float)
    return a.reshape(a.shape + (1,) * len(batch_shape_of(x)))
