"""Explicit upwind finite differences for the regularized Markovian HJB equation.

Unknown ``u(t, y, x)`` with ``y`` the current noise value (present when the
noise is one-dimensional) and ``x`` the current state (one-dimensional):

    -u_t = 1/2 u_yy + delta^2/2 u_xx + min_v { beta(v) u_x + f(v) }

on a box with zero-flux (Neumann) edges.  Between partition times the
coefficients see a frozen tuple of earlier samples; the terminal value of a
cell is the next cell's solution with the current values appended to the
frozen tuple (see :class:`MarkovField`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .approximation import ApproxParams, CylinderCoefficientSet, build_cylinder_approximation, held_source
from .noise import QUANTIZED, NoiseModel
from .paths import GridPath, PathBatch, TimeGrid
from .scenario import CoefficientSet, ControlSet, Scenario


class CFLViolation(ValueError):
    """Requested PDE time step breaks the monotonicity restriction."""


class DomainTooSmall(ValueError):
    """The truncation box does not contain the region the state can reach."""


@dataclass(frozen=True)
class HJBGridSpec:
    nx: int = 161
    ny: int = 61
    x_halfwidth: float | None = None
    y_halfwidth: float | None = None
    cfl: float = 0.9
    dt_pde: float | None = None
    n_candidates: int = 5

    def __post_init__(self):
        if self.nx < 5 or self.ny < 5:
            raise ValueError("need at least 5 grid points per axis")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl safety factor must lie in (0, 1]")


def _pad(u: np.ndarray) -> np.ndarray:
    return np.pad(u, 1, mode="edge")


def _explicit_step(u, h, dx, dy, delta, betas, fs):
    up = _pad(u)
    right, left = up[1:-1, 2:], up[1:-1, :-2]
    dplus, dminus = (right - u) / dx, (u - left) / dx
    rhs = 0.5 * delta**2 * (right - 2 * u + left) / dx**2
    if dy is not None:
        rhs = rhs + 0.5 * (up[2:, 1:-1] - 2 * u + up[:-2, 1:-1]) / dy**2
    ham = None
    for b, f in zip(betas, fs):
        cand = np.maximum(b, 0) * dplus + np.minimum(b, 0) * dminus + f
        ham = cand if ham is None else np.minimum(ham, cand)
    return u + h * (rhs + ham)


def stable_step(dx: float, dy: float | None, delta: float, speed: float) -> float:
    """Largest step keeping the explicit scheme monotone."""
    rate = delta**2 / dx**2 + speed / dx + (1.0 / dy**2 if dy is not None else 0.0)
    return 1.0 / rate if rate > 0 else math.inf


class MarkovField:
    """Node-time values of ``u`` per frozen sample tuple, solved lazily and memoized."""

    def __init__(self, grid: TimeGrid, x_axis, y_axis, delta: float, partition, markovian: bool, solver: Callable):
        self.grid = grid
        self.x_axis = np.asarray(x_axis, dtype=float)
        self.y_axis = None if y_axis is None else np.asarray(y_axis, dtype=float)
        self.delta = delta
        self.partition = np.asarray(partition)
        self.markovian = markovian
        self._solver = solver
        self.slabs: dict = {}

    @property
    def dx(self) -> float:
        return float(self.x_axis[1] - self.x_axis[0])

    def cell_of(self, i: int) -> int:
        if self.markovian:
            return 0
        return int(min(np.searchsorted(self.partition, i, side="right") - 1, len(self.partition) - 2))

    def slab(self, cell: int, frozen: tuple) -> dict:
        key = (cell, frozen)
        if key not in self.slabs:
            self.slabs[key] = self._solver(cell, frozen)
        return self.slabs[key]

    def frozen_for(self, i: int, w_nodes: np.ndarray, x_nodes: np.ndarray) -> tuple:
        """Frozen tuple of the cell holding step ``i``: x at partition times up to the cell start, W after 0."""
        if self.markovian:
            return ()
        j = self.cell_of(i)
        pts = self.partition[: j + 1]
        xs = tuple(float(x_nodes[p][0]) for p in pts)
        ws = tuple(float(w_nodes[p][0]) for p in pts[1:]) if self.y_axis is not None else ()
        return xs + ws

    def values(self, i: int, frozen: tuple = ()) -> np.ndarray:
        return self.slab(self.cell_of(i), frozen)[i]

    def interpolate(self, i: int, y, x, frozen: tuple = ()) -> np.ndarray:
        """Bilinear readout at node time ``t_i``; points outside the box are clamped to it."""
        u = self.values(i, frozen)
        return bilinear(u, self.y_axis, self.x_axis, y, x)

    def at_path(self, i: int, w: GridPath, x: GridPath) -> float:
        frozen = self.frozen_for(i, w.nodes, x.nodes)
        y = w(i)[0] if self.y_axis is not None else 0.0
        return float(self.interpolate(i, y, x(i)[0], frozen))

    def all_arrays(self):
        for slab in self.slabs.values():
            yield from slab.values()

    def dump(self, out_dir) -> list[Path]:
        """One ``.npy`` per (cell, frozen tuple) slab plus ``markov_field.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {
            "T": self.grid.T,
            "N": self.grid.N,
            "delta": self.delta,
            "x_axis": [float(self.x_axis[0]), float(self.x_axis[-1]), len(self.x_axis)],
            "y_axis": None if self.y_axis is None else [float(self.y_axis[0]), float(self.y_axis[-1]), len(self.y_axis)],
            "partition": self.partition.tolist(),
            "slabs": [],
        }
        files = []
        for n, ((cell, frozen), slab) in enumerate(sorted(self.slabs.items(), key=lambda kv: (kv[0][0], kv[0][1]))):
            steps = sorted(slab)
            path = out / f"slab_{n}.npy"
            np.save(path, np.stack([slab[i] for i in steps]))
            header["slabs"].append({"file": path.name, "cell": cell, "frozen": list(frozen), "steps": steps})
            files.append(path)
        meta = out / "markov_field.json"
        meta.write_text(json.dumps(header, indent=2))
        return [meta] + files


def bilinear(u: np.ndarray, y_axis, x_axis, y, x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), x_axis[0], x_axis[-1])
    ix = np.clip(np.searchsorted(x_axis, x) - 1, 0, len(x_axis) - 2)
    ax = (x - x_axis[ix]) / (x_axis[ix + 1] - x_axis[ix])
    if y_axis is None:
        row = u[0]
        return (1 - ax) * row[ix] + ax * row[ix + 1]
    y = np.clip(np.asarray(y, dtype=float), y_axis[0], y_axis[-1])
    iy = np.clip(np.searchsorted(y_axis, y) - 1, 0, len(y_axis) - 2)
    ay = (y - y_axis[iy]) / (y_axis[iy + 1] - y_axis[iy])
    return (1 - ay) * ((1 - ax) * u[iy, ix] + ax * u[iy, ix + 1]) + ay * ((1 - ax) * u[iy + 1, ix] + ax * u[iy + 1, ix + 1])


def _axis_weights(axis, pts):
    if len(axis) == 1:
        z = np.zeros(np.shape(pts), dtype=int)
        return z, z, np.zeros(np.shape(pts))
    pts = np.clip(pts, axis[0], axis[-1])
    lo = np.clip(np.searchsorted(axis, pts) - 1, 0, len(axis) - 2)
    return lo, lo + 1, (pts - axis[lo]) / (axis[lo + 1] - axis[lo])


def _family_readout(stack, yc, xc, Y, X):
    """Entry ``[r, c]`` interpolates ``stack[:, :, r, c]`` over candidate axes at ``(Y[r, c], X[r, c])``."""
    ylo, yhi, ay = _axis_weights(yc, Y)
    xlo, xhi, ax = _axis_weights(xc, X)
    r, c = np.indices(Y.shape)
    return (
        (1 - ay) * ((1 - ax) * stack[ylo, xlo, r, c] + ax * stack[ylo, xhi, r, c])
        + ay * ((1 - ax) * stack[yhi, xlo, r, c] + ax * stack[yhi, xhi, r, c])
    )


def solve_markovian_hjb(cyl: CylinderCoefficientSet, p: ApproxParams, spec: HJBGridSpec = HJBGridSpec()) -> MarkovField:
    """Backward explicit solve, chained over partition cells of the cylinder set."""
    s = cyl.scenario
    grid, noise = s.grid, s.noise
    if s.dim != 1:
        raise ValueError("the PDE solver handles a one-dimensional state only")
    if noise.m > 1:
        raise ValueError("the PDE solver handles at most one noise dimension")
    use_y = noise.m == 1
    L, delta, T = cyl.bound_L, p.delta, grid.T
    x0 = float(s.initial.terminal[0])
    xh = spec.x_halfwidth if spec.x_halfwidth is not None else 4 * max(math.sqrt(T), abs(x0) + L * T)
    if xh < abs(x0) + L * T:
        raise DomainTooSmall(f"x half-width {xh} cannot hold |x0| + L T = {abs(x0) + L * T}")
    x_axis = np.linspace(-xh, xh, spec.nx)
    dx = x_axis[1] - x_axis[0]
    if use_y:
        yh = spec.y_halfwidth if spec.y_halfwidth is not None else 4 * math.sqrt(T)
        if yh < math.sqrt(T):
            raise DomainTooSmall(f"y half-width {yh} is below one standard deviation of W(T)")
        y_axis = np.linspace(-yh, yh, spec.ny)
        dy = y_axis[1] - y_axis[0]
    else:
        y_axis, dy = None, None
    ny = len(y_axis) if use_y else 1
    h_max = spec.cfl * stable_step(dx, dy, delta, L)
    if spec.dt_pde is not None:
        if spec.dt_pde > stable_step(dx, dy, delta, L):
            raise CFLViolation(f"dt_pde={spec.dt_pde} exceeds the stable step {stable_step(dx, dy, delta, L):.3e}")
        h_max = spec.dt_pde
    Y = np.broadcast_to((y_axis if use_y else np.zeros(1))[:, None], (ny, spec.nx))
    X = np.broadcast_to(x_axis[None, :], (ny, spec.nx))
    markov = cyl.markovian
    part = np.array([0, grid.N]) if markov else cyl.partition
    n_cells = len(part) - 1

    def batch(i, frozen):
        """Batch paths whose history is the frozen tuple and whose current values are the grid."""
        j = 0 if markov else int(np.searchsorted(part, i, side="right") - 1)
        j = min(j, n_cells - 1) if i < grid.N else n_cells - 1
        xs = frozen[: j + 1] if not markov else ()
        ws = frozen[j + 1 :] if not markov else ()
        src = held_source(part, i) if not markov else np.arange(i + 1)
        xn = np.empty((i + 1, 1, ny, spec.nx))
        wn = np.empty((i + 1, 1, ny, spec.nx))
        for l in range(i + 1):
            if l == i or markov:
                xn[l, 0], wn[l, 0] = X, Y
            else:
                c = int(np.searchsorted(part, src[l], side="right") - 1)
                xn[l, 0] = xs[c]
                wn[l, 0] = 0.0 if c == 0 or not ws else ws[c - 1]
        return PathBatch(grid, xn), PathBatch(grid, wn)

    def step_back(u, i, frozen):
        xb, wb = batch(i, frozen)
        betas = [np.broadcast_to(np.asarray(cyl.beta(i, xb, wb, v), float)[0], (ny, spec.nx)) for v in s.controls]
        fs = [np.broadcast_to(np.asarray(cyl.f(i, xb, wb, v), float), (ny, spec.nx)) for v in s.controls]
        n_sub = max(1, math.ceil(grid.dt / h_max - 1e-12))
        h = grid.dt / n_sub
        for _ in range(n_sub):
            u = _explicit_step(u, h, dx, dy, delta, betas, fs)
        return u

    def terminal_from_next(j, frozen):
        t_idx = int(part[j + 1])
        k = p.k
        span = k * grid.time(t_idx)
        xc = np.linspace(x0 - span, x0 + span, max(2, spec.n_candidates))
        yc = np.arange(-t_idx, t_idx + 1, 2) * math.sqrt(grid.dt) if use_y else np.zeros(1)
        xs, ws = frozen[: j + 1], frozen[j + 1 :]
        stack = np.empty((len(yc), len(xc), ny, spec.nx))
        for a, yv in enumerate(yc):
            for b, xv in enumerate(xc):
                nxt = xs + (float(xv),) + ws + ((float(yv),) if use_y else ())
                stack[a, b] = field_.slab(j + 1, nxt)[t_idx]
        # interpolate the candidate family along the diagonal (frozen value = current value)
        return _family_readout(stack, yc, xc, Y, X)

    def solver(j, frozen):
        start, stop = int(part[j]), int(part[j + 1])
        if stop == grid.N:
            xb, wb = batch(grid.N, frozen)
            u = np.broadcast_to(np.asarray(cyl.G(xb, wb), float), (ny, spec.nx)).copy()
        else:
            u = terminal_from_next(j, frozen)
        out = {stop: u}
        for i in range(stop - 1, start - 1, -1):
            u = step_back(u, i, frozen)
            out[i] = u
        return out

    field_ = MarkovField(grid, x_axis, y_axis, delta, part, markov, solver)
    field_.slab(0, () if markov else (x0,))
    return field_


def estimate_gradient_bound(field: MarkovField) -> float:
    """Max centered-difference ``|D_x u|`` over every solved slab and node time."""
    worst = 0.0
    dx = field.dx
    for u in field.all_arrays():
        if u.shape[-1] >= 3:
            worst = max(worst, float(np.abs(u[..., 2:] - u[..., :-2]).max() / (2 * dx)))
    return worst


# --------------------------------------------------------------------------- heat-equation reduction


def _bump(s0: float):
    def G(x, w):
        z = x(x.anchor_index)[0]
        return np.exp(-(z**2) / (2 * s0**2))

    return G


def heat_scenario(T: float = 1.0, s0: float = 0.4) -> Scenario:
    """Zero drift and running cost, Gaussian-bump terminal cost: the PDE is a heat equation."""
    grid = TimeGrid(T, 1)
    zero_b = lambda i, x, w, v: 0.0 * x(i)
    zero_f = lambda i, x, w, v: 0.0 * x(i)[0]
    coeffs = CoefficientSet(zero_b, zero_f, _bump(s0), 1.0, 1.0 / s0, True, "heat_bump", {"s0": s0})
    return Scenario(grid, ControlSet([0.0]), NoiseModel(QUANTIZED, 0, grid), coeffs, GridPath(grid, [[0.0]]))


def heat_solution(x, T: float, delta: float, s0: float, t: float = 0.0) -> np.ndarray:
    var = s0**2 + delta**2 * (T - t)
    return s0 / math.sqrt(var) * np.exp(-np.asarray(x) ** 2 / (2 * var))


@dataclass
class RefinementStudy:
    dx: list
    errors: list

    @property
    def orders(self) -> list:
        return [math.log(self.errors[n] / self.errors[n + 1]) / math.log(self.dx[n] / self.dx[n + 1]) for n in range(len(self.errors) - 1)]


def heat_refinement_study(levels=(81, 161, 321), delta: float = 0.5, T: float = 1.0, s0: float = 0.4, halfwidth: float = 4.0) -> RefinementStudy:
    """Sup error at ``t = 0`` against the Gaussian convolution, per grid level."""
    s = heat_scenario(T, s0)
    cyl = build_cylinder_approximation(s, ApproxParams(target_eps=1.0, k=1.0, delta=delta, n_cells=1, mollifier_width=0.0))
    dxs, errs = [], []
    for nx in levels:
        spec = HJBGridSpec(nx=nx, x_halfwidth=halfwidth)
        fld = solve_markovian_hjb(cyl, cyl.params, spec)
        u0 = fld.values(0)[0]
        errs.append(float(np.abs(u0 - heat_solution(fld.x_axis, T, delta, s0)).max()))
        dxs.append(fld.dx)
    return RefinementStudy(dxs, errs)
