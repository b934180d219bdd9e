"""Linear backward SDEs on the quantized noise tree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise import NoiseModel, conditional_mean


@dataclass
class BSDESolution:
    """``Y[n]`` has shape ``(B**n,)``; ``Z[n]`` has shape ``(B**n, m)``.

    ``remainder[n]`` holds the part of the branch increments of ``Y[n+1]``
    orthogonal to the noise increments (identically zero when ``m <= 1``).
    """

    Y: list
    Z: list
    remainder: list
    branches: int
    dt: float

    def root(self) -> float:
        return float(self.Y[0][0])


def solve_linear_bsde(terminal, driver, noise: NoiseModel) -> BSDESolution:
    """``Y_N = terminal``, ``Y_n = E[Y_{n+1} | node] + driver_n dt`` with ``Z`` from branch differences.

    ``driver`` is a list of per-level arrays (or scalars) for levels ``0..N-1``.
    """
    N, B, dt = noise.grid.N, noise.branches, noise.grid.dt
    terminal = np.broadcast_to(np.asarray(terminal, dtype=float), (noise.level_size(N),)).copy()
    if len(driver) != N:
        raise ValueError(f"need drivers for {N} levels, got {len(driver)}")
    m = noise.m
    inc = noise.increments()[:, :m] if m else np.zeros((B, 0))
    Y = [None] * (N + 1)
    Z = [None] * N
    R = [None] * N
    Y[N] = terminal
    for n in range(N - 1, -1, -1):
        drv = np.broadcast_to(np.asarray(driver[n], dtype=float), (noise.level_size(n),))
        nxt = Y[n + 1].reshape(-1, B)
        mean = conditional_mean(Y[n + 1], B)
        Y[n] = mean + drv * dt
        dev = nxt - mean[:, None]
        if m:
            # branch increments are orthogonal with squared norm B dt per column
            Z[n] = dev @ inc / (B * dt)
            R[n] = dev - Z[n] @ inc.T
        else:
            Z[n] = np.zeros((len(mean), 0))
            R[n] = dev
    return BSDESolution(Y, Z, R, B, dt)


def tree_identity_residual(sol: BSDESolution, driver) -> float:
    """Max ``|Y_n - E[Y_{n+1}] - driver_n dt|`` over all nodes."""
    worst = 0.0
    for n in range(len(sol.Y) - 1):
        drv = np.broadcast_to(np.asarray(driver[n], dtype=float), sol.Y[n].shape)
        worst = max(worst, float(np.abs(sol.Y[n] - conditional_mean(sol.Y[n + 1], sol.branches) - drv * sol.dt).max()))
    return worst
