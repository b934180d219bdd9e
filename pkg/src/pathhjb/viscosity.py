"""Functional Ito calculus on the walk tree, optimal stopping, and test-function probes.

A *path functional* here is any callable ``u(i, w, x) -> float`` taking the step,
the noise path up to ``i`` and the state path up to ``i``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .control import ValueFunction
from .dynamics import ControlPolicy, integrate_state
from .noise import NoiseModel, conditional_mean, expand_to_children
from .paths import CapExceeded, GridPath, PathClassSpec, TimeGrid, enumerate_class_lattice, horizontal_extension, vertical_perturbation
from .scenario import Scenario, random_lattice_path

CENTRAL, FORWARD, BACKWARD = "central", "forward", "backward"


class NotTangent(ValueError):
    """The test function does not touch the value in the required one-sided sense."""


class CellStraddle(ValueError):
    """Interval crosses a breakpoint of the test function's partition."""


# --------------------------------------------------------------------------- test functions


@dataclass(frozen=True, eq=False)
class CylinderTestFunction:
    """``sum_j g_j(W samples) h_j(x samples) psi_j(t)``.

    Samples are taken at ``partition[l] ^ t_i``; the last breakpoint is the
    horizon, so the current value always enters.  ``g`` receives an array of
    shape ``(len(partition) - 1, noise dim)`` and ``h`` one of shape
    ``(len(partition), state dim)``.
    """

    partition: tuple
    terms: tuple
    gradient_bound: float = math.inf
    holder_exponent: float = 1.0

    def samples(self, i: int, w: GridPath, x: GridPath):
        idx = np.minimum(np.asarray(self.partition), i)
        return w.nodes[idx[1:]], x.nodes[idx]

    def __call__(self, i: int, w: GridPath, x: GridPath) -> float:
        ws, xs = self.samples(i, w, x)
        t = x.grid.time(i)
        return float(sum(g(ws) * h(xs) * psi(t) for g, h, psi in self.terms))

    def cell_of(self, i: int) -> int:
        return int(np.searchsorted(self.partition, i, side="left"))


def _cell_window(a: float, b: float, amp: float, base: float):
    def psi(t):
        return base + amp * math.sin(math.pi * (t - a) / (b - a)) if a < t <= b else 0.0

    return psi


def random_test_function(grid: TimeGrid, noise_dim: int, state_dim: int, seed: int, n_terms: int = 3, cells: int = 2) -> CylinderTestFunction:
    """Random smooth cylinder function; one term is active on every time step, the rest on single cells."""
    rng = np.random.default_rng(seed)
    part = tuple(int(p) for p in np.unique(np.round(np.linspace(0, grid.N, cells + 1)).astype(int)))
    times = grid.times
    terms = []
    for n in range(n_terms):
        A = rng.uniform(-1, 1, (len(part) - 1, noise_dim))
        C = rng.uniform(-1, 1, (len(part), state_dim)) / len(part)
        b, e = rng.uniform(-1, 1, 2)
        g = lambda ws, A=A, b=b: math.sin(float(np.sum(A * ws)) + b)
        h = lambda xs, C=C, e=e: math.tanh(float(np.sum(C * xs)) + e)
        if n == 0:
            psi = lambda t: 1.0
        else:
            j = int(rng.integers(len(part) - 1))
            psi = _cell_window(times[part[j]], times[part[j + 1]], float(rng.uniform(0.2, 1)), float(rng.uniform(0.5, 1)))
        terms.append((g, h, psi))
    return CylinderTestFunction(part, tuple(terms), gradient_bound=float(n_terms))


def value_functional(vf: ValueFunction) -> Callable:
    """Wrap a tree value function as ``u(i, w, x)``."""
    noise = vf.s.noise

    def u(i, w, x):
        return vf(i, noise.prefix_from_path(w.restrict(i)), x)

    return u


@dataclass(frozen=True, eq=False)
class Combination:
    """``sum_j c_j u_j + c (t_i - t_tau)``."""

    parts: tuple
    weights: tuple
    slope: float = 0.0
    tau: int = 0

    def __call__(self, i, w, x):
        out = sum(c * u(i, w, x) for c, u in zip(self.weights, self.parts))
        if self.slope:
            out += self.slope * (x.grid.time(i) - x.grid.time(self.tau))
        return out

    def shifted(self, c: float, tau: int) -> "Combination":
        return Combination(self.parts, self.weights, self.slope + c, tau)


def anchored_quadratic(xi: GridPath, weight: Callable | None = None) -> Callable:
    """``g(W(t_i)) |x(t_i) - xi(t_tau)|^2`` with a positive noise weight ``g`` (default 1)."""
    centre = xi.terminal.copy()

    def q(i, w, x):
        g = 1.0 if weight is None else float(weight(w(i)))
        return g * float(np.sum((x(i) - centre) ** 2))

    return q


def positive_weight(seed: int) -> Callable:
    """``1 + 0.5 sin(a . W + b)``: smooth, bounded in [0.5, 1.5]."""
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, 8), rng.uniform(-1, 1)
    return lambda wv: 1.0 + 0.5 * math.sin(float(np.dot(a[: len(wv)], wv)) + b)


# --------------------------------------------------------------------------- vertical derivative


def vertical_gradient(u: Callable, i: int, w: GridPath, x: GridPath, h: float = 1e-4, mode: str = CENTRAL, richardson: bool = False) -> np.ndarray:
    """Difference quotients of ``u`` under jumps of the anchor value, one per state component.

    ``forward``/``backward`` are one-sided; use them at kinks (for instance a
    running maximum attained at the anchor), where the central quotient
    averages the two sides.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    x = x.restrict(i) if x.anchor_index != i else x

    def quotient(step):
        out = np.empty(x.dim)
        for c in range(x.dim):
            e = np.zeros(x.dim)
            e[c] = step
            if mode == CENTRAL:
                out[c] = (u(i, w, vertical_perturbation(x, e)) - u(i, w, vertical_perturbation(x, -e))) / (2 * step)
            elif mode == FORWARD:
                out[c] = (u(i, w, vertical_perturbation(x, e)) - u(i, w, x)) / step
            elif mode == BACKWARD:
                out[c] = (u(i, w, x) - u(i, w, vertical_perturbation(x, -e))) / step
            else:
                raise ValueError(f"unknown difference mode {mode!r}")
        return out

    d1 = quotient(h)
    if not richardson:
        return d1
    d2 = quotient(h / 2)
    order = 2 if mode == CENTRAL else 1
    return (2**order * d2 - d1) / (2**order - 1)


# --------------------------------------------------------------------------- Ito decomposition


@dataclass
class ItoDecomposition:
    """Per level ``n`` of the subtree below ``root``: drift ``dt_part[n]`` and martingale ``dw_part[n]``.

    ``values[n]`` are the functional's values along the frozen extension;
    ``remainder[n]`` is the branch component orthogonal to the increments
    (zero when the noise is one-dimensional).
    """

    start: int
    root: tuple
    values: list
    dt_part: list
    dw_part: list
    remainder: list
    increments: np.ndarray
    dt: float
    branches: int

    def reconstruction_residual(self) -> float:
        """Max over subtree nodes of ``|u_n - u_0 - sum dt_part dt - sum dw_part . dW - remainder|``."""
        acc = np.array([self.values[0][0]])
        worst = 0.0
        B = self.branches
        for n in range(len(self.dt_part)):
            step = (self.dt_part[n] * self.dt)[:, None] + self.dw_part[n] @ self.increments.T + self.remainder[n]
            acc = (acc[:, None] + step).reshape(-1)
            worst = max(worst, float(np.abs(acc - self.values[n + 1]).max()))
        return worst


def _subtree_values(u: Callable, noise: NoiseModel, r: int, root: tuple, x_r: GridPath, stop: int) -> list:
    vals = []
    for n in range(stop - r + 1):
        xe = horizontal_extension(x_r, n)
        vals.append(np.array([u(r + n, noise.path(p), xe) for p in noise.prefixes(n, root)]))
    return vals


def ito_decompose(u: Callable, r: int, x_r: GridPath, noise: NoiseModel, root: tuple | None = None, stop: int | None = None, order: str = "drift_first") -> ItoDecomposition:
    """Split the increments of ``u`` along the frozen extension of ``x_r`` into drift and martingale parts.

    ``order="drift_first"`` takes the conditional mean first and projects the
    deviation onto the increments; ``"martingale_first"`` projects the raw
    branch values first and reads the drift from what is left.
    """
    if not noise.exact:
        raise ValueError("decomposition needs the quantized tree")
    root = (0,) * r if root is None else tuple(root)
    if len(root) != r or x_r.anchor_index != r:
        raise ValueError("root prefix and path anchor must sit at step r")
    stop = noise.grid.N if stop is None else stop
    B, dt, m = noise.branches, noise.grid.dt, noise.m
    inc = noise.increments()[:, :m] if m else np.zeros((B, 0))
    vals = _subtree_values(u, noise, r, root, x_r, stop)
    dtp, dwp, rem = [], [], []
    for n in range(stop - r):
        kids = vals[n + 1].reshape(-1, B)
        if order == "drift_first":
            mean = conditional_mean(vals[n + 1], B)
            drift = (mean - vals[n]) / dt
            dev = kids - mean[:, None]
            z = dev @ inc / (B * dt) if m else np.zeros((len(mean), 0))
            rest = dev - z @ inc.T
        elif order == "martingale_first":
            z = kids @ inc / (B * dt) if m else np.zeros((len(kids), 0))
            left = kids - z @ inc.T
            drift = (left.mean(axis=1) - vals[n]) / dt
            rest = left - left.mean(axis=1, keepdims=True)
        else:
            raise ValueError(f"unknown order {order!r}")
        dtp.append(drift)
        dwp.append(z)
        rem.append(rest)
    return ItoDecomposition(r, root, vals, dtp, dwp, rem, inc, dt, B)


def _one_step(u: Callable, i: int, w: GridPath, x: GridPath, noise: NoiseModel):
    """Drift and martingale parts of ``u`` at a single node along the frozen extension."""
    B, dt, m = noise.branches, noise.grid.dt, noise.m
    inc = noise.increments()
    here = u(i, w, x)
    xe = horizontal_extension(x, 1)
    kids = np.array([u(i + 1, w.extend(w.terminal + inc[b]), xe) for b in range(B)])
    mean = kids.mean()
    z = (kids - mean) @ inc[:, :m] / (B * dt) if m else np.zeros(0)
    return (mean - here) / dt, z


def apply_generator(u: Callable, s: Scenario, i: int, w: GridPath, x: GridPath, v, h: float = 1e-6) -> float:
    """``dt_part + beta(t_i, x, v) . grad u`` with the vertical gradient by central differences."""
    drift, _ = _one_step(u, i, w, x, s.noise)
    beta = np.asarray(s.coeffs.beta(i, x, w, v), dtype=float).reshape(-1)
    if not np.any(beta):
        return float(drift)
    return float(drift + beta @ vertical_gradient(u, i, w, x, h))


def ito_kunita_residual(u: Callable, s: Scenario, pol: ControlPolicy, w_full: GridPath, rho: int, tau: int, x_rho: GridPath, partition: Sequence[int] | None = None, h: float = 1e-6) -> float:
    """``|u(tau, X) - u(rho, x) - sum generator dt - sum dw_part . dW|`` along the realized trajectory."""
    if not rho <= tau <= s.grid.N:
        raise ValueError("need rho <= tau <= N")
    if partition is not None:
        part = np.asarray(partition)
        inner = part[(part > rho) & (part < tau)]
        if inner.size:
            raise CellStraddle(f"[{rho}, {tau}] crosses breakpoint(s) {inner.tolist()}")
    traj = integrate_state(s, pol, w_full, rho, x_rho, stop=tau).path
    total = 0.0
    for i in range(rho, tau):
        w = w_full.restrict(i)
        x = traj.restrict(i)
        j = pol.index(i, w, x)
        gen = apply_generator(u, s, i, w, x, s.controls[j], h)
        _, z = _one_step(u, i, w, x, s.noise)
        dW = (w_full(i + 1) - w_full(i))[: s.noise.m]
        total += gen * s.grid.dt + float(z @ dW)
    return abs(u(tau, w_full.restrict(tau), traj) - u(rho, w_full.restrict(rho), x_rho) - total)


# --------------------------------------------------------------------------- optimal stopping


@dataclass
class SnellEnvelope:
    """``Z[n]`` per level; ``stop[n]`` marks nodes where stopping is optimal."""

    Y: list
    Z: list
    stop: list
    branches: int

    def root(self) -> float:
        return float(self.Z[0][0])

    def tau_star(self) -> np.ndarray:
        """First optimal stopping level along each leaf path."""
        N, B = len(self.Y) - 1, self.branches
        first = np.full(B**N, N)
        for n in range(N - 1, -1, -1):
            hit = np.repeat(self.stop[n], B ** (N - n))
            first = np.where(hit, n, first)
        return first


def snell_envelope(Y: Sequence, branches: int) -> SnellEnvelope:
    """``Z_N = Y_N`` and ``Z_n = max(Y_n, E[Z_{n+1} | node])``; ``Y[n]`` has ``branches**n`` entries."""
    Y = [np.asarray(y, dtype=float).reshape(-1) for y in Y]
    N = len(Y) - 1
    Z = [None] * (N + 1)
    stop = [None] * (N + 1)
    Z[N] = Y[N].copy()
    stop[N] = np.ones(len(Y[N]), dtype=bool)
    for n in range(N - 1, -1, -1):
        cont = conditional_mean(Z[n + 1], branches)
        stop[n] = Y[n] >= cont
        Z[n] = np.maximum(Y[n], cont)
    return SnellEnvelope(Y, Z, stop, branches)


def brute_force_stopping(Y: Sequence, branches: int, cap: int = 1 << 20) -> float:
    """Max of ``E[Y_tau]`` over every stopping rule of the tree, by enumeration."""
    Y = [np.asarray(y, dtype=float).reshape(-1) for y in Y]
    N = len(Y) - 1
    sizes = [len(y) for y in Y[:N]]
    n_bits = sum(sizes)
    if 2**n_bits > cap:
        raise CapExceeded(f"{2**n_bits} stopping rules exceed the cap {cap}")
    rules = ((np.arange(2**n_bits)[:, None] >> np.arange(n_bits)) & 1).astype(bool)
    offsets = np.cumsum([0] + sizes)
    val = np.broadcast_to(Y[N], (len(rules), len(Y[N])))
    for n in range(N - 1, -1, -1):
        cont = val.reshape(len(rules), -1, branches).mean(axis=2)
        val = np.where(rules[:, offsets[n] : offsets[n + 1]], Y[n], cont)
    return float(val[:, 0].max())


# --------------------------------------------------------------------------- tangency and probes

UPPER, LOWER = "upper", "lower"


def _shell_extrema(fn: Callable, noise: NoiseModel, tau: int, root: tuple, xi: GridPath, k: float, s_idx: int, levels: int, side: str) -> np.ndarray:
    """Per level-``s`` node below ``root``: max (upper) or min (lower) of ``fn`` over the class lattice."""
    lattice = enumerate_class_lattice(PathClassSpec(k, xi, s_idx), levels)
    pick = np.max if side == UPPER else np.min
    out = []
    for p in noise.prefixes(s_idx - tau, root):
        w = noise.path(p)
        out.append(pick([fn(s_idx, w, x) for x in lattice]))
    return np.array(out)


@dataclass
class Tangency:
    is_member: bool
    tau_hat: int
    envelope: float


def test_tangency(phi: Callable, u: Callable, noise: NoiseModel, tau: int, xi: GridPath, k: float, side: str, root: tuple | None = None, tau_hat: int | None = None, levels: int = 3, tol: float = 1e-10) -> Tangency:
    """One-sided touching of ``u`` by ``phi`` at ``(tau, xi)`` up to ``tau_hat`` (default ``tau + 1``).

    ``upper``: the optimal-stopping value of the lattice max of ``phi - u`` is 0.
    ``lower``: the same for the lattice min, with the infimum over stopping rules.
    """
    root = (0,) * tau if root is None else tuple(root)
    tau_hat = min(tau + 1, noise.grid.N) if tau_hat is None else tau_hat
    if not tau < tau_hat <= noise.grid.N:
        raise ValueError("need tau < tau_hat <= N")
    diff = lambda i, w, x: phi(i, w, x) - u(i, w, x)
    if abs(diff(tau, noise.path(root), xi)) > tol:
        raise NotTangent("phi and u differ at (tau, xi); shift phi by a constant first")
    S = [_shell_extrema(diff, noise, tau, root, xi, k, n, levels, side) for n in range(tau, tau_hat + 1)]
    if side == UPPER:
        env = snell_envelope(S, noise.branches).root()
    elif side == LOWER:
        env = -snell_envelope([-a for a in S], noise.branches).root()
    else:
        raise ValueError(f"unknown side {side!r}")
    return Tangency(abs(env) <= tol, tau_hat, env)


test_tangency.__test__ = False


def discrete_residual(phi: Callable, s: Scenario, i: int, w: GridPath, x: GridPath) -> float:
    """``-min_v [ (E phi(i+1, W', x + beta dt) - phi(i, x)) / dt + f ]`` on the tree."""
    dt, noise = s.grid.dt, s.noise
    inc = noise.increments()
    here = phi(i, w, x)
    best = math.inf
    kids_w = [w.extend(w.terminal + inc[b]) for b in range(noise.branches)]
    for v in s.controls:
        drift = np.asarray(s.coeffs.beta(i, x, w, v), dtype=float).reshape(-1)
        y = x.extend(x.terminal + drift * dt)
        mean = float(np.mean([phi(i + 1, wb, y) for wb in kids_w]))
        best = min(best, (mean - here) / dt + float(s.coeffs.f(i, x, w, v)))
    return -best


@dataclass
class ProbeResult:
    tau: int
    k: float
    side: str
    margin: float
    shells: list
    trend_slope: float


def viscosity_probe(u: Callable, s: Scenario, phi: Callable, tau: int, xi: GridPath, k: float, side: str, root: tuple | None = None, n_shells: int = 3, levels: int = 3, require_membership: bool = True) -> ProbeResult:
    """Residual of the equation for ``phi`` over lattice shells ``s = tau, tau+1, ...``.

    ``lower`` tests the subsolution inequality (inf per shell, margin expected
    <= 0); ``upper`` tests the supersolution inequality (sup per shell, margin
    expected >= 0).  Each shell is averaged over the noise nodes below ``root``.
    The margin is the innermost shell; the slope is a least-squares fit over
    shell times.
    """
    noise = s.noise
    root = (0,) * tau if root is None else tuple(root)
    if require_membership:
        tg = test_tangency(phi, u, noise, tau, xi, k, side, root, levels=levels)
        if not tg.is_member:
            raise NotTangent(f"phi is not in the {side} test class (envelope {tg.envelope:.3e})")
    pick = np.min if side == LOWER else np.max
    last = min(tau + n_shells, s.grid.N) - 1
    shells = []
    for n in range(tau, last + 1):
        lattice = enumerate_class_lattice(PathClassSpec(k, xi, n), levels)
        per_node = [pick([discrete_residual(phi, s, n, noise.path(p), x) for x in lattice]) for p in noise.prefixes(n - tau, root)]
        shells.append(float(np.mean(per_node)))
    times = s.grid.times[tau : last + 1] - s.grid.time(tau)
    slope = float(np.polyfit(times, shells, 1)[0]) if len(shells) > 1 else math.nan
    return ProbeResult(tau, k, side, shells[0], shells, slope)


@dataclass
class ProbeCase:
    tau: int
    xi: GridPath
    k: float
    root: tuple


def random_probe_cases(s: Scenario, count: int, seed: int, ks=(0.5, 1.0), levels: int = 3) -> list[ProbeCase]:
    """Random ``(tau, xi, k)`` with ``tau <= N - 2`` and ``xi`` a class-lattice member."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        tau = int(rng.integers(0, max(1, s.grid.N - 1)))
        k = float(ks[int(rng.integers(len(ks)))])
        xi = random_lattice_path(PathClassSpec(k, s.initial, tau), levels, rng)
        root = tuple(int(b) for b in rng.integers(s.noise.branches, size=tau))
        out.append(ProbeCase(tau, xi, k, root))
    return out


def matched_test_function(u: Callable, xi: GridPath, side: str, seed: int, scale: float = 1.0) -> Combination:
    """``u`` plus (lower side) or minus (upper side) a noise-weighted quadratic centred at ``xi``."""
    sign = 1.0 if side == LOWER else -1.0
    return Combination((u, anchored_quadratic(xi, positive_weight(seed))), (1.0, sign * scale))


def write_probe_csv(rows: Sequence[tuple], path) -> Path:
    """Rows of ``(tau, xi_id, k, side, margin, shells, trend_slope)``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tau", "xi_id", "k", "side", "margin", "shells", "trend_slope"])
        for r in rows:
            wr.writerow(r)
    return path
