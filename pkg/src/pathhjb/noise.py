"""Noise models: the quantized +-sqrt(dt) walk tree and a Gaussian Monte Carlo mode.

Tree nodes at level ``n`` are indexed ``0..B**n - 1`` with ``B = 2**m``
branches per step; the children of node ``j`` are ``j*B + b``.  A node is
equivalently a prefix tuple of branch labels.  Branch ``b`` moves component
``c`` up when bit ``c`` of ``b`` is set.
"""
from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field

import numpy as np

from .paths import GridPath, TimeGrid

QUANTIZED = "quantized_walk"
GAUSSIAN = "gaussian_mc"


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, purpose, index); order independent."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode()), int(index)])


def branch_signs(m: int) -> np.ndarray:
    """``(2**m, m)`` array of +-1 moves; a single zero row when ``m == 0``."""
    if m == 0:
        return np.zeros((1, 1))
    b = np.arange(2**m)
    return np.where((b[:, None] >> np.arange(m)) & 1, 1.0, -1.0)


def conditional_mean(values: np.ndarray, branches: int) -> np.ndarray:
    """Average level ``n+1`` node values over siblings, giving level ``n`` values."""
    values = np.asarray(values)
    return values.reshape((-1, branches) + values.shape[1:]).mean(axis=1)


def expand_to_children(values: np.ndarray, branches: int) -> np.ndarray:
    """Repeat level ``n`` node values onto their children at level ``n+1``."""
    return np.repeat(np.asarray(values), branches, axis=0)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    mode: str
    m: int
    grid: TimeGrid
    mc_samples: int = 0
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in (QUANTIZED, GAUSSIAN):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.m < 0:
            raise ValueError("noise dimension must be nonnegative")
        if self.mode == GAUSSIAN and self.mc_samples < 1:
            raise ValueError("gaussian mode needs mc_samples >= 1")

    @property
    def branches(self) -> int:
        return 1 if self.m == 0 else 2**self.m

    @property
    def dim(self) -> int:
        """Component count of noise paths (1 for the deterministic case)."""
        return max(self.m, 1)

    @property
    def exact(self) -> bool:
        return self.mode == QUANTIZED

    def increments(self) -> np.ndarray:
        return branch_signs(self.m) * np.sqrt(self.grid.dt)

    def level_size(self, n: int) -> int:
        return self.branches**n

    def prefixes(self, n: int, root: tuple = ()) -> list[tuple]:
        return [root + p for p in itertools.product(range(self.branches), repeat=n)]

    def index_of(self, prefix: tuple) -> int:
        j = 0
        for b in prefix:
            j = j * self.branches + b
        return j

    def prefix_of(self, index: int, n: int) -> tuple:
        out = []
        for _ in range(n):
            index, b = divmod(index, self.branches)
            out.append(b)
        return tuple(reversed(out))

    def path(self, prefix: tuple) -> GridPath:
        """Noise path ``W`` at nodes ``0..len(prefix)`` for the given branch sequence."""
        prefix = tuple(prefix)
        hit = self._cache.get(prefix)
        if hit is None:
            incs = self.increments()[list(prefix)] if prefix else np.zeros((0, self.dim))
            values = np.vstack([np.zeros((1, self.dim)), np.cumsum(incs, axis=0)])
            hit = GridPath(self.grid, values)
            self._cache[prefix] = hit
        return hit

    def prefix_from_path(self, w: GridPath) -> tuple:
        """Recover branch labels from a walk path (inverse of :meth:`path`)."""
        if self.m == 0:
            return (0,) * w.anchor_index
        ups = np.diff(w.nodes[:, : self.m], axis=0) > 0
        return tuple(int(np.dot(row, 1 << np.arange(self.m))) for row in ups)

    def path_from_increments(self, incs: np.ndarray) -> GridPath:
        incs = np.asarray(incs, dtype=float).reshape(-1, self.dim)
        return GridPath(self.grid, np.vstack([np.zeros((1, self.dim)), np.cumsum(incs, axis=0)]))

    def level_values(self, n: int) -> np.ndarray:
        """``W`` at nodes ``0..n`` for every level-``n`` node: shape ``(B**n, n+1, dim)``."""
        key = ("level", n)
        hit = self._cache.get(key)
        if hit is None:
            inc = self.increments()
            w = np.zeros((1, 1, self.dim))
            for _ in range(n):
                parent = np.repeat(w, self.branches, axis=0)
                step = np.tile(inc, (w.shape[0], 1))
                w = np.concatenate([parent, (parent[:, -1] + step)[:, None]], axis=1)
            hit = w
            self._cache[key] = hit
        return hit

    def level_increments(self, n: int) -> np.ndarray:
        """Increment ``W(t_{n+1}) - W(t_n)`` for each level-``n+1`` node: ``(B**(n+1), dim)``."""
        return np.tile(self.increments(), (self.level_size(n), 1))

    def sample_increments(self, count: int, purpose: str = "mc", index: int = 0, steps: int | None = None) -> np.ndarray:
        """Gaussian increments of variance dt, shape ``(count, steps, dim)``."""
        steps = self.grid.N if steps is None else steps
        if self.m == 0:
            return np.zeros((count, steps, 1))
        rng = stream(self.seed, purpose, index)
        return rng.standard_normal((count, steps, self.m)) * np.sqrt(self.grid.dt)
