"""Forward Euler integration of the controlled state equation and flow estimates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .paths import GridPath, GridMismatch, d0, horizontal_extension, path_to_csv, sup_distance, sup_norm
from .scenario import Scenario

OPEN_LOOP = "open_loop"
FEEDBACK = "feedback_table"


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """Adapted control rule ``(i, w_i, x_i) -> control index``."""

    kind: str
    rule: Callable

    def __post_init__(self):
        if self.kind not in (OPEN_LOOP, FEEDBACK):
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def index(self, i: int, w: GridPath, x: GridPath) -> int:
        return int(self.rule(i, w, x))

    @classmethod
    def constant(cls, index: int) -> "ControlPolicy":
        return cls(OPEN_LOOP, lambda i, w, x: index)

    @classmethod
    def open_loop(cls, indices: Sequence[int] | Callable) -> "ControlPolicy":
        """Controls chosen from time (and noise) only, never from the state."""
        if callable(indices):
            return cls(OPEN_LOOP, lambda i, w, x: indices(i, w))
        seq = [int(j) for j in indices]
        return cls(OPEN_LOOP, lambda i, w, x: seq[i])

    @classmethod
    def feedback(cls, fn: Callable) -> "ControlPolicy":
        return cls(FEEDBACK, fn)


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    path: GridPath
    control_indices: tuple
    controls: np.ndarray
    noise: GridPath
    start: int


def _check(s: Scenario, noise: GridPath, xi: GridPath, start: int):
    if xi.anchor_index != start:
        raise GridMismatch(f"prefix anchored at {xi.anchor_index}, integration starts at {start}")
    if xi.grid != s.grid or noise.grid != s.grid:
        raise GridMismatch("prefix, noise and scenario grids differ")
    if xi.dim != s.dim:
        raise GridMismatch(f"prefix has dimension {xi.dim}, scenario state has {s.dim}")
    if noise.anchor_index < s.grid.N:
        raise GridMismatch("noise path must reach the horizon")


def integrate_state(s: Scenario, pol: ControlPolicy, noise: GridPath, start: int, xi: GridPath, stop: int | None = None) -> StateTrajectory:
    """Euler scheme ``X(t_{i+1}) = X(t_i) + beta(t_i, X_{t_i}, theta_i) dt`` from ``xi``."""
    _check(s, noise, xi, start)
    stop = s.grid.N if stop is None else stop
    dt = s.grid.dt
    nodes = [row for row in xi.nodes]
    x = xi
    idx = []
    for i in range(start, stop):
        w = noise.restrict(i)
        j = pol.index(i, w, x)
        drift = np.asarray(s.coeffs.beta(i, x, w, s.controls[j]), dtype=float).reshape(-1)
        nodes.append(nodes[-1] + drift * dt)
        x = GridPath(s.grid, np.array(nodes))
        idx.append(j)
    ctrl = s.controls.points[idx] if idx else np.zeros((0, s.controls.dim))
    return StateTrajectory(x, tuple(idx), ctrl, noise, start)


def restart_consistency(s: Scenario, pol: ControlPolicy, noise: GridPath, r: int, t: int, xi: GridPath | None = None, restart_noise: GridPath | None = None) -> float:
    """Integrate from ``r``, restart at ``t`` from the intermediate path, compare the tails."""
    if not r <= t <= s.grid.N:
        raise ValueError("need r <= t <= N")
    if xi is None:
        xi = horizontal_extension(s.initial, r - s.initial.anchor_index)
    full = integrate_state(s, pol, noise, r, xi).path
    again = integrate_state(s, pol, restart_noise or noise, t, full.restrict(t)).path
    return float(np.abs(full.nodes[t:] - again.nodes[t:]).max())


@dataclass
class FlowBoundReport:
    """Margins ``rhs - lhs`` of the three flow estimates; negative means violated."""

    sup_margin: float
    holder_margin: float
    stability_margin: float


def sup_bound_margin(traj: StateTrajectory, xi: GridPath, L: float) -> float:
    """``K (1 + |xi|_0) - max_l |X_l|_0`` with ``K = 1 + L T``."""
    K = 1.0 + L * traj.path.grid.T
    return K * (1.0 + sup_norm(xi)) - sup_norm(traj.path)


def holder_margin(traj: StateTrajectory, L: float) -> float:
    """Smallest ``sqrt|s-t| + L|s-t| - d0(X_s, X_t)`` over node pairs after the start."""
    path, grid = traj.path, traj.path.grid
    worst = math.inf
    for a in range(traj.start, grid.N + 1):
        xa = path.restrict(a)
        for b in range(a, grid.N + 1):
            gap = grid.time(b) - grid.time(a)
            worst = min(worst, math.sqrt(gap) + L * gap - d0(xa, path.restrict(b)))
    return worst


def stability_factor(L: float, dt: float, N: int) -> float:
    return (1.0 + L * dt) ** N


def stability_margin(a: StateTrajectory, b: StateTrajectory, L: float) -> float:
    """``(1 + L dt)^N |xi - xi^|_0 - max_l |X_l - X^_l|_0`` for a shared open-loop control."""
    grid = a.path.grid
    start = a.start
    gap0 = sup_distance(a.path.restrict(start), b.path.restrict(start))
    return stability_factor(L, grid.dt, grid.N) * gap0 - sup_distance(a.path, b.path)


def flow_bounds(s: Scenario, pol: ControlPolicy, noise: GridPath, xi: GridPath, xi_hat: GridPath) -> FlowBoundReport:
    """All three flow estimates for one (policy, noise) pair and two prefixes."""
    start = xi.anchor_index
    a = integrate_state(s, pol, noise, start, xi)
    b = integrate_state(s, pol, noise, start, xi_hat)
    L = s.L
    return FlowBoundReport(
        min(sup_bound_margin(a, xi, L), sup_bound_margin(b, xi_hat, L)),
        min(holder_margin(a, L), holder_margin(b, L)),
        stability_margin(a, b, L),
    )


def dump_trajectory(traj: StateTrajectory, stem: str | Path, noise_id: str = "") -> list[Path]:
    """Write ``<stem>.csv`` (path) and ``<stem>.json`` (controls and noise)."""
    stem = Path(stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    csv_path.write_text(path_to_csv(traj.path))
    json_path.write_text(
        json.dumps(
            {
                "start": traj.start,
                "control_indices": list(traj.control_indices),
                "controls": traj.controls.tolist(),
                "noise_id": noise_id,
                "noise": traj.noise.nodes.tolist(),
            },
            indent=2,
        )
    )
    return [csv_path, json_path]
