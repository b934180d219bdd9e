"""Upper and lower value envelopes built from the PDE field plus BSDE error terms.

For a path ``x`` at step ``s``, noise node ``W`` and auxiliary-walk node ``B``:

    upper = u(s, W, x - delta B) + Y(s, W) + delta C2 y(s, B)
    lower = u(s, W, x - delta B) - Y(s, W) - delta C2 y(s, B)

``Y`` solves the linear BSDE on the W-tree with driver ``f_err + C1 beta_err``
and terminal ``G_err``; ``y`` solves it on an independent d-dimensional walk
with driver ``|B|_0`` at each step and terminal ``|B|_0`` at the horizon.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approximation import ApproxErrorReport, ApproxParams, build_cylinder_approximation, estimate_approx_error
from .bsde import BSDESolution, solve_linear_bsde
from .control import ValueFunction
from .hjb import HJBGridSpec, MarkovField, estimate_gradient_bound, solve_markovian_hjb
from .noise import QUANTIZED, NoiseModel
from .paths import GridPath, PathClassSpec, enumerate_class_lattice
from .scenario import Scenario


class TreeMismatch(ValueError):
    """Field, scenario and auxiliary walk do not share a quantized grid."""


def running_sup_norms(noise: NoiseModel, n: int) -> np.ndarray:
    """``max_{l <= n} |B(t_l)|`` for every level-``n`` node."""
    vals = noise.level_values(n)
    return np.linalg.norm(vals, axis=2).max(axis=1)


class Sandwich:
    """Envelope pair evaluated lazily at (step, W node, B node, path)."""

    def __init__(self, field: MarkovField, s: Scenario, p: ApproxParams, aux: NoiseModel, Y: BSDESolution, y: BSDESolution, C1: float, C2: float):
        self.field, self.s, self.p, self.aux = field, s, p, aux
        self.Y, self.y = Y, y
        self.C1, self.C2 = C1, C2

    def envelope(self, i: int, w_prefix: tuple, b_prefix: tuple) -> float:
        """``Y + delta C2 y`` at the given pair of nodes (nonnegative)."""
        a = self.Y.Y[i][self.s.noise.index_of(w_prefix)]
        b = self.y.Y[i][self.aux.index_of(b_prefix)]
        return float(a + self.p.delta * self.C2 * b)

    def centre(self, i: int, w_prefix: tuple, b_prefix: tuple, x: GridPath) -> float:
        """``u(t_i, W, x - delta B)`` read from the PDE field."""
        b = self.aux.path(b_prefix).restrict(i)
        shifted = GridPath(x.grid, x.nodes - self.p.delta * b.nodes)
        return self.field.at_path(i, self.s.noise.path(w_prefix), shifted)

    def bounds(self, i: int, w_prefix: tuple, b_prefix: tuple, x: GridPath) -> tuple[float, float]:
        c, e = self.centre(i, w_prefix, b_prefix, x), self.envelope(i, w_prefix, b_prefix)
        return c - e, c + e

    def upper(self, i, w_prefix, b_prefix, x) -> float:
        return self.bounds(i, w_prefix, b_prefix, x)[1]

    def lower(self, i, w_prefix, b_prefix, x) -> float:
        return self.bounds(i, w_prefix, b_prefix, x)[0]


def build_sandwich(field: MarkovField, s: Scenario, p: ApproxParams, aux: NoiseModel | None = None, report: ApproxErrorReport | None = None, levels: int = 3) -> Sandwich:
    """Assemble the envelopes; ``C1`` is the measured gradient bound of the field."""
    if not s.noise.exact:
        raise TreeMismatch("the envelopes need the quantized noise tree")
    aux = aux or NoiseModel(QUANTIZED, s.dim, s.grid)
    if aux.grid != s.grid or field.grid != s.grid or not aux.exact or aux.m != s.dim:
        raise TreeMismatch("auxiliary walk must be a quantized walk of the state dimension on the scenario grid")
    if report is None:
        cyl = build_cylinder_approximation(s, p)
        report = estimate_approx_error(s, cyl, p.k, levels)
    N, r0 = s.grid.N, s.initial.anchor_index
    C1 = estimate_gradient_bound(field)
    C2 = 4 * s.coeffs.lipschitz * (C1 + 1)
    zero = [np.zeros(s.noise.level_size(n)) for n in range(N)]
    driver = list(zero)
    for n in range(r0, N):
        driver[n] = report.f_err[n - r0] + C1 * report.beta_err[n - r0]
    Y = solve_linear_bsde(report.G_err, driver, s.noise)
    y = solve_linear_bsde(running_sup_norms(aux, N), [running_sup_norms(aux, n) for n in range(N)], aux)
    return Sandwich(field, s, p, aux, Y, y, C1, C2)


@dataclass
class SandwichCheck:
    """Lattice comparison of the envelopes against the tree value."""

    max_violation: float
    max_upper_gap: float
    max_lower_gap: float
    points: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol

    @property
    def max_gap(self) -> float:
        return max(self.max_upper_gap, self.max_lower_gap)


def _step_range(s: Scenario, steps):
    r0 = s.initial.anchor_index
    return range(r0, s.grid.N + 1) if steps is None else steps


def check_sandwich(sw: Sandwich, vf: ValueFunction, k: float | None = None, levels: int = 3, steps=None, tol: float = 1e-8) -> SandwichCheck:
    """Every class-lattice path x every W node x every B node at each requested step."""
    s = sw.s
    k = sw.p.k if k is None else k
    worst, up_gap, low_gap, count = -math.inf, 0.0, 0.0, 0
    for i in _step_range(s, steps):
        lattice = enumerate_class_lattice(PathClassSpec(k, s.initial, i), levels)
        for pw in s.noise.prefixes(i):
            for x in lattice:
                v = vf(i, pw, x)
                for pb in sw.aux.prefixes(i):
                    lo, hi = sw.bounds(i, pw, pb, x)
                    worst = max(worst, v - hi, lo - v)
                    up_gap = max(up_gap, hi - v)
                    low_gap = max(low_gap, v - lo)
                    count += 1
    return SandwichCheck(worst, up_gap, low_gap, count, tol)


def supersolution_margin(sw: Sandwich, k: float | None = None, levels: int = 3, steps=None, side: str = "upper") -> float:
    """Smallest one-step margin of the envelope against the tree dynamic programming operator.

    Upper side: ``upper(s, x) - min_v [f dt + E upper(s+1, X^v)]`` (nonnegative for
    a discrete supersolution); lower side mirrored, so a nonnegative return means
    the expected direction holds at every probed point.
    """
    s = sw.s
    k = sw.p.k if k is None else k
    N, dt = s.grid.N, s.grid.dt
    pick = 1 if side == "upper" else 0
    sign = 1.0 if side == "upper" else -1.0
    worst = math.inf
    steps = range(s.initial.anchor_index, N) if steps is None else steps
    for i in steps:
        lattice = enumerate_class_lattice(PathClassSpec(k, s.initial, i), levels)
        for pw in s.noise.prefixes(i):
            w = s.noise.path(pw)
            for x in lattice:
                for pb in sw.aux.prefixes(i):
                    here = sw.bounds(i, pw, pb, x)[pick]
                    q = []
                    for v in s.controls:
                        drift = np.asarray(s.coeffs.beta(i, x, w, v), dtype=float).reshape(-1)
                        y = x.extend(x.nodes[-1] + drift * dt)
                        nxt = [sw.bounds(i + 1, pw + (a,), pb + (b,), y)[pick] for a in range(s.noise.branches) for b in range(sw.aux.branches)]
                        q.append(float(s.coeffs.f(i, x, w, v)) * dt + float(np.mean(nxt)))
                    worst = min(worst, sign * (here - min(q)))
    return worst


@dataclass
class GapStudy:
    rows: list = field(default_factory=list)  # (eps, delta, upper_gap, lower_gap, fitted, violation)
    k: float = 1.0

    @property
    def fitted(self) -> list:
        return [r[4] for r in self.rows]

    @property
    def band(self) -> float:
        """Ratio of the largest to the smallest fitted constant."""
        f = self.fitted
        return max(f) / min(f) if min(f) > 0 else math.inf

    @property
    def gaps(self) -> list:
        return [max(r[2], r[3]) for r in self.rows]

    @property
    def decreasing(self) -> bool:
        g = self.gaps
        return all(b < a for a, b in zip(g, g[1:]))

    @property
    def all_valid(self) -> bool:
        return all(r[5] <= 1e-8 for r in self.rows)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["setting", "eps", "delta", "max_upper_gap", "max_lower_gap", "fitted_constant", "max_violation"])
            for n, r in enumerate(self.rows):
                wr.writerow([n, *(f"{v:.12g}" for v in r)])
        return path


def sandwich_gap_study(s: Scenario, settings, k: float = 1.0, levels: int = 3, spec: HJBGridSpec = HJBGridSpec(), n_cells: int | None = None, steps=None) -> GapStudy:
    """Solve, envelope and check once per ``(eps, delta)`` setting."""
    vf = ValueFunction(s)
    study = GapStudy(k=k)
    for eps, delta in settings:
        p = ApproxParams(target_eps=eps, k=k, delta=delta, n_cells=n_cells)
        cyl = build_cylinder_approximation(s, p)
        fld = solve_markovian_hjb(cyl, p, spec)
        sw = build_sandwich(fld, s, p, levels=levels)
        chk = check_sandwich(sw, vf, k, levels, steps)
        study.rows.append((eps, delta, chk.max_upper_gap, chk.max_lower_gap, chk.max_gap / (eps * (1 + k) + delta), chk.max_violation))
    return study
