"""Control sets, coefficient functionals and the built-in scenario registry.

Coefficient functionals take ``(i, x, w, v)``: a step index, the state path
and noise path (both read only up to node ``i``), and a control vector.  They
are written with numpy so that ``x`` and ``w`` may also be :class:`PathBatch`
stacks; node values then carry trailing batch axes after the component axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .noise import GAUSSIAN, QUANTIZED, NoiseModel, stream
from .paths import (
    GridPath,
    PathBatch,
    PathClassSpec,
    TimeGrid,
    lift,
    sup_distance,
)


class SchemaError(ValueError):
    """A scenario or experiment config failed validation."""


@dataclass(frozen=True, eq=False)
class ControlSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("control set must be a nonempty list of vectors")
        if len({tuple(p) for p in pts}) != len(pts):
            raise ValueError("control set has duplicate points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def __getitem__(self, j):
        return self.points[j]

    def __iter__(self):
        return iter(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def index_of(self, v) -> int:
        hits = np.flatnonzero(np.all(self.points == np.asarray(v, dtype=float), axis=1))
        if hits.size == 0:
            raise KeyError(f"{v} is not a control point")
        return int(hits[0])


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    beta: Callable
    f: Callable
    G: Callable
    bound_L: float
    lipschitz: float
    markovian: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def L(self) -> float:
        """The single constant used in all stability bounds (bound and Lipschitz)."""
        return max(self.bound_L, self.lipschitz)


@dataclass(frozen=True, eq=False)
class Scenario:
    grid: TimeGrid
    controls: ControlSet
    noise: NoiseModel
    coeffs: CoefficientSet
    initial: GridPath

    def __post_init__(self):
        if self.noise.grid != self.grid or self.initial.grid != self.grid:
            raise SchemaError("grid, noise grid and initial path grid must agree")
        if self.initial.anchor_index >= self.grid.N:
            raise SchemaError("initial prefix must end before the horizon")
        w = self.noise.path((0,) * self.initial.anchor_index)
        b = np.asarray(self.coeffs.beta(self.initial.anchor_index, self.initial, w, self.controls[0]), dtype=float)
        if b.reshape(-1).shape != (self.initial.dim,):
            raise SchemaError(f"drift has dimension {b.size}, state has dimension {self.initial.dim}")

    @property
    def L(self) -> float:
        return self.coeffs.L

    @property
    def dim(self) -> int:
        return self.initial.dim

    def with_controls(self, points) -> "Scenario":
        return replace(self, controls=ControlSet(points))

    def with_initial(self, initial: GridPath) -> "Scenario":
        return replace(self, initial=initial)

    def with_noise(self, noise: NoiseModel) -> "Scenario":
        return replace(self, noise=noise)


# --------------------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    max_beta: float
    max_f: float
    max_G: float
    max_lipschitz_ratio: float
    bound_L: float
    lipschitz: float
    samples: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {
            "max_beta": self.max_beta,
            "max_f": self.max_f,
            "max_G": self.max_G,
            "max_lipschitz_ratio": self.max_lipschitz_ratio,
            "bound_L": self.bound_L,
            "lipschitz": self.lipschitz,
            "L": max(self.bound_L, self.lipschitz),
            "samples": self.samples,
            "passed": self.passed,
            "violations": list(self.violations),
        }


def random_lattice_path(spec: PathClassSpec, levels: int, rng: np.random.Generator) -> GridPath:
    """A uniformly drawn member of the slope lattice of ``spec``."""
    grid, d = spec.base.grid, spec.base.dim
    slopes = np.linspace(-spec.k, spec.k, levels) if levels > 1 else np.zeros(1)
    picks = slopes[rng.integers(levels, size=(spec.steps, d))]
    if d > 1:
        norms = np.linalg.norm(picks, axis=1, keepdims=True)
        picks = picks * np.minimum(1.0, spec.k / np.maximum(norms, 1e-300))
    tail = spec.base.terminal + np.cumsum(picks * grid.dt, axis=0)
    return GridPath(grid, np.vstack([spec.base.nodes, tail]))


def validate_coefficients(s: Scenario, sample_count: int, levels: int = 3, k: float | None = None, tol: float = 1e-12) -> ValidationReport:
    """Sample bounds and Lipschitz ratios of (beta, f, G) on the slope lattice of paths from the initial prefix."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    c = s.coeffs
    k = c.bound_L if k is None else k
    rng = stream(s.noise.seed, "validate", 0)
    start, N = s.initial.anchor_index, s.grid.N
    mb = mf = mg = ratio = 0.0
    for _ in range(sample_count):
        i = int(rng.integers(start, N))
        spec = PathClassSpec(k, s.initial, i)
        x, y = random_lattice_path(spec, levels, rng), random_lattice_path(spec, levels, rng)
        w = _random_noise_path(s.noise, i, rng)
        v = s.controls[int(rng.integers(len(s.controls)))]
        bx, by = np.asarray(c.beta(i, x, w, v), float), np.asarray(c.beta(i, y, w, v), float)
        fx, fy = float(c.f(i, x, w, v)), float(c.f(i, y, w, v))
        mb = max(mb, np.linalg.norm(bx), np.linalg.norm(by))
        mf = max(mf, abs(fx), abs(fy))
        dist = sup_distance(x, y)
        if dist > 0:
            ratio = max(ratio, np.linalg.norm(bx - by) / dist, abs(fx - fy) / dist)
        tspec = PathClassSpec(k, s.initial, N)
        xT, yT = random_lattice_path(tspec, levels, rng), random_lattice_path(tspec, levels, rng)
        wT = _random_noise_path(s.noise, N, rng)
        gx, gy = float(c.G(xT, wT)), float(c.G(yT, wT))
        mg = max(mg, abs(gx), abs(gy))
        dT = sup_distance(xT, yT)
        if dT > 0:
            ratio = max(ratio, abs(gx - gy) / dT)
    violations = []
    for label, val in (("beta", mb), ("f", mf), ("G", mg)):
        if val > c.bound_L + tol:
            violations.append(f"|{label}| reached {val:.6g} > bound {c.bound_L:.6g}")
    if ratio > c.lipschitz + tol:
        violations.append(f"Lipschitz ratio reached {ratio:.6g} > declared {c.lipschitz:.6g}")
    return ValidationReport(float(mb), float(mf), float(mg), float(ratio), c.bound_L, c.lipschitz, sample_count, violations)


def _random_noise_path(noise: NoiseModel, n: int, rng: np.random.Generator) -> GridPath:
    if noise.mode == QUANTIZED:
        return noise.path(tuple(int(b) for b in rng.integers(noise.branches, size=n)))
    incs = rng.standard_normal((n, noise.dim)) * np.sqrt(noise.grid.dt) if noise.m else np.zeros((n, 1))
    return noise.path_from_increments(incs)


# --------------------------------------------------------------------------- transformations


def _shifted_path(x, eta: Callable, w):
    n = x.anchor_index
    offsets = [np.asarray(eta(l, w), dtype=float) for l in range(n + 1)]
    offsets = np.stack([o if o.ndim > 1 else lift(o, x) for o in offsets])
    nodes = x.nodes + offsets
    if isinstance(x, GridPath) and nodes.ndim == 2:
        return GridPath(x.grid, x.values + offsets, x.terminal_jump, regularity=x.regularity)
    return PathBatch(x.grid, nodes)


def shift_coefficients(base: CoefficientSet, eta: Callable) -> CoefficientSet:
    """Coefficients that read the state path shifted by the adapted process ``eta(l, w)``."""

    def beta(i, x, w, v):
        return base.beta(i, _shifted_path(x, eta, w), w, v)

    def f(i, x, w, v):
        return base.f(i, _shifted_path(x, eta, w), w, v)

    def G(x, w):
        return base.G(_shifted_path(x, eta, w), w)

    return CoefficientSet(beta, f, G, base.bound_L, base.lipschitz, base.markovian, f"shifted({base.name})", dict(base.params))


def shift_by_eta(s: Scenario, eta: Callable) -> Scenario:
    """Substitute ``X = X~ - eta``: the new problem is a random ODE in ``X``.

    A problem with additive noise ``dX~ = beta~ dt + d eta`` becomes one whose
    coefficients evaluate ``beta~`` on the shifted path ``(X + eta)_t``.
    """
    return replace(s, coeffs=shift_coefficients(s.coeffs, eta))


def constant_eta(c) -> Callable:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return lambda l, w: c


def noise_eta(sigma: float, d: int = 1) -> Callable:
    """``eta = sigma * W`` (first ``d`` noise components, zero-padded)."""

    def eta(l, w):
        val = np.asarray(w(l), dtype=float)
        out = np.zeros((d,) + val.shape[1:])
        k = min(d, val.shape[0])
        out[:k] = sigma * val[:k]
        return out

    return eta


# --------------------------------------------------------------------------- habit formation


def _living_standard(t_index, c_nodes, gamma_t, kernel_row):
    inc = np.diff(c_nodes[: t_index + 1], axis=0)
    weights = np.asarray(kernel_row[:t_index], dtype=float)
    return gamma_t + np.tensordot(weights, inc, axes=(0, 0))


def habit_living_standard(t_index: int, C: GridPath, gamma, xi) -> float:
    """Standard of living ``gamma(t) + sum_{s<t} xi(t, t_s) (C(t_{s+1}) - C(t_s))``."""
    nodes = C.nodes[:, 0]
    if t_index > C.anchor_index:
        raise IndexError("t_index beyond the consumption path")
    if np.any(np.diff(nodes[: t_index + 1]) < 0):
        raise ValueError("cumulative consumption must be non-decreasing")
    xi = np.asarray(xi, dtype=float)
    return float(_living_standard(t_index, nodes, np.asarray(gamma, dtype=float)[t_index], xi[t_index]))


# --------------------------------------------------------------------------- registry


def _dot(e, val):
    return np.tensordot(np.asarray(e, dtype=float), val, axes=(0, 0))


def _driftable_abs(grid, noise, controls, d, params):
    L = float(params.get("L", max(1.0, float(np.abs(controls.points).max()))))

    def beta(i, x, w, v):
        return np.broadcast_to(lift(v, x), x(i).shape)

    def f(i, x, w, v):
        return np.zeros(x.batch_shape) if x.batch_shape else 0.0

    def G(x, w):
        return np.linalg.norm(x(x.anchor_index), axis=0)

    return CoefficientSet(beta, f, G, L, 1.0, True, "driftable_abs", {"L": L})


def _running_max(grid, noise, controls, d, params):
    L = float(params.get("L", 2.0))
    kappa = float(params.get("kappa", 1.0))

    def beta(i, x, w, v):
        run = np.max(x.nodes[: i + 1], axis=0)
        return np.clip(lift(v, x) - kappa * run, -L, L)

    def f(i, x, w, v):
        return 0.0 * x(i)[0]

    def G(x, w):
        return np.clip(np.max(x.nodes, axis=0)[0], -L, L)

    return CoefficientSet(beta, f, G, L, max(kappa, 1.0), False, "running_max", {"L": L, "kappa": kappa})


def _clipped_linear(grid, noise, controls, d, params):
    L = float(params.get("L", max(1.0, float(np.abs(controls.points).max()))))

    def beta(i, x, w, v):
        return np.broadcast_to(lift(v, x), x(i).shape)

    def f(i, x, w, v):
        return np.clip(x(i)[0], -1.0, 1.0)

    def G(x, w):
        return 0.0 * x(x.anchor_index)[0]

    return CoefficientSet(beta, f, G, L, 1.0, True, "clipped_linear", {"L": L})


def _random_cylinder(grid, noise, controls, d, params):
    L = float(params.get("L", 1.0))
    markovian = bool(params.get("markovian", False))
    seed = int(params.get("seed", 0))
    rng = stream(seed, "random_cylinder", 0)
    e = rng.standard_normal(d)
    e /= np.linalg.norm(e)
    alpha = float(rng.uniform(0.3, 0.7))

    def pair():
        a = rng.uniform(-1, 1, 2)
        a /= max(1.0, np.abs(a).sum()) * 1.0001
        if markovian:
            a[1] = 0.0
        return a

    a, c, g = pair(), pair(), pair()
    wb = rng.uniform(-1, 1, (3, noise.dim))
    b0, c0, g0, cv, ct = rng.uniform(-1, 1, 5)
    gamma = float(rng.uniform(0.5, 1.0))
    lag = lambda i: i // 2

    def beta(i, x, w, v):
        feat = a[0] * _dot(e, x(i)) + a[1] * _dot(e, x(lag(i))) + _dot(wb[0], w(i)) + b0
        return L * (alpha * lift(v, x) + (1 - alpha) * np.tanh(feat) * lift(e, x))

    def f(i, x, w, v):
        feat = c[0] * _dot(e, x(i)) + c[1] * _dot(e, x(lag(i))) + _dot(wb[1], w(i)) + cv * float(np.sum(v)) + ct * grid.time(i) + c0
        return L * gamma * np.sin(feat)

    def G(x, w):
        n = x.anchor_index
        feat = g[0] * _dot(e, x(n)) + g[1] * _dot(e, x(lag(n))) + _dot(wb[2], w(n)) + g0
        return L * np.tanh(feat)

    info = {"L": L, "seed": seed, "markovian": markovian}
    return CoefficientSet(beta, f, G, L, L, markovian, "random_cylinder", info)


def _habit(grid, noise, controls, d, params):
    L = float(params.get("L", 1.0))
    a = float(params.get("decay", 1.0))
    g0 = float(params.get("gamma0", 0.2))
    sg = float(params.get("sigma_gamma", 0.2))
    t = grid.times
    kernel = np.exp(-a * np.clip(t[:, None] - t[None, :], 0.0, None))
    xi_max = 1.0

    def standard(i, x, w):
        return _living_standard(i, x.nodes[:, 0], g0 + sg * w(i)[0], kernel[i])

    def beta(i, x, w, v):
        return np.broadcast_to(lift(v, x), x(i).shape)

    def f(i, x, w, v):
        return -L * np.tanh(float(v[0]) - standard(i, x, w))

    def G(x, w):
        return 0.0 * x(x.anchor_index)[0]

    info = {"L": L, "decay": a, "gamma0": g0, "sigma_gamma": sg, "kernel": kernel}
    return CoefficientSet(beta, f, G, L, 2 * L * xi_max, False, "habit", info)


REGISTRY = {
    "driftable_abs": _driftable_abs,
    "running_max": _running_max,
    "clipped_linear": _clipped_linear,
    "random_cylinder": _random_cylinder,
    "habit": _habit,
}


def build_coefficients(name: str, grid: TimeGrid, noise: NoiseModel, controls: ControlSet, d: int, params: dict) -> CoefficientSet:
    if name == "shifted":
        base_block = params.get("base")
        if not isinstance(base_block, dict) or "name" not in base_block:
            raise SchemaError("shifted coefficients need a base block with a name")
        base = build_coefficients(base_block["name"], grid, noise, controls, d, base_block.get("params", {}))
        eta_block = params.get("eta", {"kind": "constant", "value": 0.0})
        kind = eta_block.get("kind")
        if kind == "constant":
            eta = constant_eta(np.broadcast_to(np.asarray(eta_block.get("value", 0.0), float), (d,)))
        elif kind == "noise":
            eta = noise_eta(float(eta_block.get("sigma", 1.0)), d)
        else:
            raise SchemaError(f"unknown eta kind {kind!r}")
        return shift_coefficients(base, eta)
    if name not in REGISTRY:
        raise SchemaError(f"unknown coefficient set {name!r}; known: {sorted(REGISTRY) + ['shifted']}")
    return REGISTRY[name](grid, noise, controls, d, params)


def make_scenario(
    name: str,
    T: float = 1.0,
    N: int = 4,
    controls=(-1.0, 1.0),
    m: int = 0,
    initial=(0.0,),
    params: dict | None = None,
    mode: str = QUANTIZED,
    mc_samples: int = 0,
    seed: int = 0,
) -> Scenario:
    """Build a registered scenario from keyword arguments."""
    grid = TimeGrid(T, N)
    noise = NoiseModel(mode, m, grid, mc_samples, seed)
    ctrl = ControlSet(controls)
    init = np.asarray(initial, dtype=float)
    init = init.reshape(1, -1) if init.ndim <= 1 else init
    x0 = GridPath(grid, init)
    coeffs = build_coefficients(name, grid, noise, ctrl, x0.dim, params or {})
    return Scenario(grid, ctrl, noise, coeffs, x0)


def scenario_from_dict(data: dict) -> Scenario:
    try:
        g = data["grid"]
        grid = TimeGrid(float(g["T"]), int(g["N"]))
        nz = data.get("noise", {})
        noise = NoiseModel(nz.get("mode", QUANTIZED), int(nz.get("m", 0)), grid, int(nz.get("mc_samples", 0)), int(nz.get("seed", 0)))
        controls = ControlSet(data["controls"])
        init = np.asarray(data.get("initial", [0.0]), dtype=float)
        init = init.reshape(1, -1) if init.ndim <= 1 else init
        x0 = GridPath(grid, init)
        block = data["coefficients"]
        coeffs = build_coefficients(block["name"], grid, noise, controls, x0.dim, block.get("params", {}))
        return Scenario(grid, controls, noise, coeffs, x0)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid scenario block: {exc}") from exc


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))
