"""Cylinder approximation of the coefficients and its error functionals.

The approximants read the path only through its values at the partition
times before the current step plus the current value, and are smoothed in
the current value by a compactly supported bump.  Within partition cell
``[p_j, p_{j+1})`` they are therefore functions of a frozen sample tuple and
of the current ``(W(t), x(t))``, which is what the Markovian PDE needs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .noise import conditional_mean
from .paths import (
    GridPath,
    PathBatch,
    PathClassSpec,
    TimeGrid,
    enumerate_class_lattice,
)
from .scenario import CoefficientSet, Scenario


@dataclass(frozen=True)
class ApproxParams:
    """Knobs of the approximation: ``target_eps``, class bound ``k`` and viscous scale ``delta``.

    The time partition has ``n_cells`` cells, or ``2**projection_levels`` cells
    when ``n_cells`` is None.  ``mollifier_width`` defaults to ``target_eps``.
    """

    target_eps: float
    k: float
    delta: float
    n_cells: int | None = None
    projection_levels: int | None = None
    mollifier_width: float | None = None
    quadrature: int = 16

    def __post_init__(self):
        if not self.target_eps > 0:
            raise ValueError("target_eps must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.k > 0:
            raise ValueError("class bound k must be positive")
        if self.mollifier_width is not None and self.mollifier_width < 0:
            raise ValueError("mollifier width must be nonnegative")

    @property
    def width(self) -> float:
        return self.target_eps if self.mollifier_width is None else self.mollifier_width

    def cells(self, N: int) -> int:
        if self.n_cells is not None:
            return self.n_cells
        if self.projection_levels is not None:
            return 2**self.projection_levels
        return N


def project_path(x: GridPath, levels: int | None) -> GridPath:
    """Hold ``x`` at the dyadic times ``n t / 2**levels`` of ``[0, t]``; the anchor value is kept.

    Off-node sample times read the piecewise-linear interpolant.  ``None``
    returns the path unchanged.
    """
    if levels is None:
        return x
    grid, n = x.grid, x.anchor_index
    if n == 0:
        return x
    t = x.grid.time(n)
    times = grid.times[: n + 1]
    h = t / 2**levels
    # tolerate roundoff when a node time sits exactly on a dyadic time
    cells = np.floor(times / h + 1e-9)
    held_times = np.minimum(cells * h, t)
    held = np.stack([np.interp(held_times, times, x.values[:, c]) for c in range(x.dim)], axis=1)
    held[-1] = x.values[-1]
    return GridPath(grid, held, x.terminal_jump, regularity="cadlag_piecewise_constant")


def partition_indices(N: int, cells: int) -> np.ndarray:
    """Grid indices ``0 = p_0 < ... < p_n = N`` of a (near) uniform partition."""
    if cells < 1:
        raise ValueError("need at least one cell")
    cells = min(cells, N)
    return np.unique(np.round(np.linspace(0, N, cells + 1)).astype(int))


def held_source(partition: np.ndarray, i: int) -> np.ndarray:
    """For nodes ``0..i``: the node whose value is read (last partition time, or ``i`` itself)."""
    src = np.array([partition[partition <= l].max() for l in range(i + 1)])
    src[i] = i
    return src


@lru_cache(maxsize=None)
def bump_rule(q: int) -> tuple:
    """Nodes and normalized weights for the bump ``exp(-1/(1-z^2))`` on ``(-1, 1)``."""
    z, w = np.polynomial.legendre.leggauss(q)
    w = w * np.exp(-1.0 / (1.0 - z**2))
    return z, w / w.sum()


class CylinderCoefficientSet:
    """Smoothed approximants ``(beta^N, f^N, G^N)`` of a scenario's coefficients."""

    def __init__(self, scenario: Scenario, params: ApproxParams):
        self.scenario = scenario
        self.params = params
        self.base: CoefficientSet = scenario.coeffs
        self.grid: TimeGrid = scenario.grid
        self.partition = partition_indices(self.grid.N, params.cells(self.grid.N))
        self.width = params.width
        self.L_c = self.base.lipschitz
        self.bound_L = self.base.bound_L
        self.markovian = self.base.markovian
        z, wts = bump_rule(params.quadrature)
        d = scenario.dim
        if d == 1:
            self._shifts, self._weights = z[:, None], wts
        else:
            grid_pts = np.array(list(itertools.product(z, repeat=d)))
            grid_w = np.array([np.prod(c) for c in itertools.product(wts, repeat=d)])
            self._shifts, self._weights = grid_pts, grid_w

    @property
    def identity(self) -> bool:
        """True when the construction returns the original coefficients."""
        return self.width == 0 and len(self.partition) == self.grid.N + 1

    def cell_of(self, i: int) -> int:
        return int(np.searchsorted(self.partition, i, side="right") - 1)

    def _held(self, x, i: int):
        src = held_source(self.partition, i)
        return PathBatch(self.grid, x.nodes[src])

    def _smoothed_state(self, x, i: int):
        held = self._held(x, i)
        if self.width == 0:
            return held, None
        nodes = held.nodes[..., None]
        shift = self.width * self._shifts.T.reshape((held.dim,) + (1,) * len(held.batch_shape) + (-1,))
        nodes = np.broadcast_to(nodes, nodes.shape[:-1] + (shift.shape[-1],)).copy()
        nodes[-1] = nodes[-1] + shift
        return PathBatch(self.grid, nodes), self._weights

    def _noise(self, w, i: int, extra_axis: bool):
        held = self._held(w, i)
        if extra_axis:
            return PathBatch(self.grid, held.nodes[..., None])
        return held

    def _average(self, vals, weights, batch_shape, lead=()):
        vals = np.asarray(vals, dtype=float)
        if weights is None:
            return np.broadcast_to(vals, lead + batch_shape) if vals.shape != lead + batch_shape else vals
        vals = np.broadcast_to(vals, lead + batch_shape + (len(weights),))
        return vals @ weights

    def beta(self, i, x, w, v):
        if self.identity:
            return self.base.beta(i, x, w, v)
        xs, wts = self._smoothed_state(x, i)
        ws = self._noise(w, i, wts is not None)
        out = self.base.beta(i, xs, ws, v)
        batch = np.broadcast_shapes(x.batch_shape, w.batch_shape)
        return self._average(out, wts, batch, (x.dim,))

    def f(self, i, x, w, v):
        if self.identity:
            return self.base.f(i, x, w, v)
        xs, wts = self._smoothed_state(x, i)
        ws = self._noise(w, i, wts is not None)
        out = self.base.f(i, xs, ws, v)
        batch = np.broadcast_shapes(x.batch_shape, w.batch_shape)
        res = self._average(out, wts, batch)
        return float(res) if res.ndim == 0 else res

    def G(self, x, w):
        if self.identity:
            return self.base.G(x, w)
        n = x.anchor_index
        xs, wts = self._smoothed_state(x, n)
        ws = self._noise(w, n, wts is not None)
        out = self.base.G(xs, ws)
        batch = np.broadcast_shapes(x.batch_shape, w.batch_shape)
        res = self._average(out, wts, batch)
        return float(res) if res.ndim == 0 else res

    def as_coefficient_set(self) -> CoefficientSet:
        return CoefficientSet(self.beta, self.f, self.G, self.bound_L, self.L_c, self.markovian, f"cylinder({self.base.name})")


def build_cylinder_approximation(s: Scenario, p: ApproxParams) -> CylinderCoefficientSet:
    return CylinderCoefficientSet(s, p)


@dataclass
class ApproxErrorReport:
    """Sup errors over the class lattice and controls, per step and noise node."""

    k: float
    target_eps: float
    f_err: list  # per step: array over noise nodes at that step
    beta_err: list
    G_err: np.ndarray  # over noise nodes at the horizon
    start: int
    dt: float

    def _l2_time(self, errs) -> float:
        return math.sqrt(sum(float(np.mean(e**2)) * self.dt for e in errs))

    @property
    def f_l2(self) -> float:
        return self._l2_time(self.f_err)

    @property
    def beta_l2(self) -> float:
        return self._l2_time(self.beta_err)

    @property
    def G_l2(self) -> float:
        return math.sqrt(float(np.mean(self.G_err**2)))

    @property
    def combined(self) -> float:
        return self.G_l2 + self.f_l2 + self.beta_l2

    @property
    def threshold(self) -> float:
        return self.target_eps * (1 + self.k)

    @property
    def passed(self) -> bool:
        return self.combined < self.threshold

    def max_errors(self) -> dict:
        return {
            "f": max((float(e.max()) for e in self.f_err), default=0.0),
            "beta": max((float(e.max()) for e in self.beta_err), default=0.0),
            "G": float(self.G_err.max()),
        }


def _lattice_batch(s: Scenario, k: float, i: int, levels: int, cap: int) -> PathBatch:
    members = enumerate_class_lattice(PathClassSpec(k, s.initial, i), levels, cap=cap)
    return PathBatch.stack(members)


def estimate_approx_error(s: Scenario, cyl: CylinderCoefficientSet, k: float, levels: int = 3, cap: int = 200_000) -> ApproxErrorReport:
    """Exhaustive sup over the class lattice and the control set at every noise node."""
    noise, N, r0 = s.noise, s.grid.N, s.initial.anchor_index
    f_err, b_err = [], []
    for i in range(r0, N):
        xb = _lattice_batch(s, k, i, levels, cap)
        fe = np.zeros(noise.level_size(i))
        be = np.zeros(noise.level_size(i))
        for n, pre in enumerate(noise.prefixes(i)):
            w = noise.path(pre)
            for v in s.controls:
                df = np.abs(np.asarray(cyl.f(i, xb, w, v)) - np.asarray(s.coeffs.f(i, xb, w, v)))
                db = np.asarray(cyl.beta(i, xb, w, v)) - np.asarray(s.coeffs.beta(i, xb, w, v))
                fe[n] = max(fe[n], float(np.max(df)))
                be[n] = max(be[n], float(np.max(np.linalg.norm(np.atleast_2d(db), axis=0))))
        f_err.append(fe)
        b_err.append(be)
    xb = _lattice_batch(s, k, N, levels, cap)
    ge = np.zeros(noise.level_size(N))
    for n, pre in enumerate(noise.prefixes(N)):
        w = noise.path(pre)
        ge[n] = float(np.max(np.abs(np.asarray(cyl.G(xb, w)) - np.asarray(s.coeffs.G(xb, w)))))
    return ApproxErrorReport(k, cyl.params.target_eps, f_err, b_err, ge, r0, s.grid.dt)
