"""Hamiltonian, cost functional, backward dynamic programming and value-function checks."""
from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import ControlPolicy, integrate_state
from .noise import stream
from .paths import (
    CapExceeded,
    GridPath,
    PathClassSpec,
    build_epsilon_net,
    enumerate_class_lattice,
    sup_distance,
)
from .scenario import Scenario


@dataclass(frozen=True)
class DPConfig:
    cap: int = 2_000_000
    tol: float = 1e-10
    decimals: int = 12

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("cap must be positive")


def hamiltonian(s: Scenario, i: int, x: GridPath, w: GridPath, p) -> float:
    """``min_v beta(t_i, x, v) . p + f(t_i, x, v)`` over the control set."""
    if len(s.controls) == 0:
        raise ValueError("empty control set")
    p = np.asarray(p, dtype=float).reshape(-1)
    return float(min(np.dot(np.asarray(s.coeffs.beta(i, x, w, v), float).reshape(-1), p) + float(s.coeffs.f(i, x, w, v)) for v in s.controls))


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    samples: int


def _drift(s: Scenario, i: int, x: GridPath, w: GridPath, v) -> np.ndarray:
    return np.asarray(s.coeffs.beta(i, x, w, v), dtype=float).reshape(-1)


def _step(s: Scenario, i: int, x: GridPath, w: GridPath, v) -> GridPath:
    return x.extend(x.terminal + _drift(s, i, x, w, v) * s.grid.dt)


def cost_functional(s: Scenario, r: int, xi: GridPath, pol: ControlPolicy, prefix=(), cap: int = 2_000_000):
    """Conditional expected cost of ``pol`` from ``(t_r, xi)``.

    Quantized mode expands the whole subtree below the noise ``prefix`` and
    returns a float.  Gaussian mode returns an :class:`MCEstimate`; ``prefix``
    is then a noise path anchored at ``r``.
    """
    if xi.anchor_index != r:
        raise ValueError("prefix path must be anchored at r")
    noise, N, dt = s.noise, s.grid.N, s.grid.dt
    if not noise.exact:
        return _mc_cost(s, r, xi, pol, prefix)
    prefix = tuple(prefix)
    if len(prefix) != r:
        raise ValueError("noise prefix length must equal r")
    if noise.branches ** (N - r) > cap:
        raise CapExceeded(f"subtree has {noise.branches ** (N - r)} leaves, cap is {cap}")

    def walk(i, pre, x):
        w = noise.path(pre)
        if i == N:
            return float(s.coeffs.G(x, w))
        v = s.controls[pol.index(i, w, x)]
        run = float(s.coeffs.f(i, x, w, v)) * dt
        nxt = _step(s, i, x, w, v)
        return run + float(np.mean([walk(i + 1, pre + (b,), nxt) for b in range(noise.branches)]))

    return walk(r, prefix, xi)


def _mc_cost(s: Scenario, r: int, xi: GridPath, pol: ControlPolicy, prefix) -> MCEstimate:
    noise, N, dt = s.noise, s.grid.N, s.grid.dt
    base = prefix if isinstance(prefix, GridPath) else noise.path_from_increments(np.zeros((r, noise.dim)))
    incs = noise.sample_increments(noise.mc_samples, "cost", r, steps=N - r)
    costs = np.empty(noise.mc_samples)
    for n in range(noise.mc_samples):
        w = GridPath(s.grid, np.vstack([base.nodes, base.terminal + np.cumsum(incs[n], axis=0)]))
        traj = integrate_state(s, pol, w, r, xi)
        total = 0.0
        for i in range(r, N):
            total += float(s.coeffs.f(i, traj.path.restrict(i), w.restrict(i), traj.controls[i - r])) * dt
        costs[n] = total + float(s.coeffs.G(traj.path, w))
    stderr = float(costs.std(ddof=1) / math.sqrt(len(costs))) if len(costs) > 1 else math.inf
    return MCEstimate(float(costs.mean()), stderr, len(costs))


# --------------------------------------------------------------------------- value table


@dataclass
class Layer:
    step: int
    prefixes: list
    paths: list
    values: np.ndarray = None
    argmin: np.ndarray = None
    children: np.ndarray = None  # (nodes, controls, branches) indices into the next layer
    index: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.paths)


def _key(prefix: tuple, x: GridPath, decimals: int):
    return (prefix, x.key(decimals))


class ValueTable:
    """Value function tabulated on every (noise node, reachable path) pair."""

    def __init__(self, scenario: Scenario, layers: list[Layer], cfg: DPConfig):
        self.scenario = scenario
        self.layers = layers
        self.cfg = cfg
        self.start = layers[0].step

    def layer(self, i: int) -> Layer:
        return self.layers[i - self.start]

    def __contains__(self, item):
        i, prefix, x = item
        return _key(tuple(prefix), x, self.cfg.decimals) in self.layer(i).index

    def position(self, i: int, prefix, x: GridPath) -> int:
        return self.layer(i).index[_key(tuple(prefix), x, self.cfg.decimals)]

    def value(self, i: int, prefix, x: GridPath) -> float:
        lay = self.layer(i)
        return float(lay.values[lay.index[_key(tuple(prefix), x, self.cfg.decimals)]])

    def argmin(self, i: int, prefix, x: GridPath) -> int:
        lay = self.layer(i)
        return int(lay.argmin[lay.index[_key(tuple(prefix), x, self.cfg.decimals)]])

    @property
    def size(self) -> int:
        return sum(len(l) for l in self.layers)

    def entries(self):
        """Yield ``(step, prefix, path, value)`` for every table entry."""
        for lay in self.layers:
            for p, x, v in zip(lay.prefixes, lay.paths, lay.values):
                yield lay.step, p, x, float(v)

    def root_value(self, prefix=None) -> float:
        lay = self.layers[0]
        if prefix is None:
            return float(lay.values[0])
        return self.value(self.start, prefix, self.scenario.initial)

    def policy(self) -> ControlPolicy:
        """Feedback policy playing the stored argmin (lowest index on ties)."""
        noise = self.scenario.noise

        def rule(i, w, x):
            return self.argmin(i, noise.prefix_from_path(w), x)

        return ControlPolicy.feedback(rule)

    def max_abs(self) -> float:
        return float(max(np.abs(l.values).max() for l in self.layers))


def solve_value(s: Scenario, cfg: DPConfig = DPConfig()) -> ValueTable:
    """Forward reachability sweep then layer-synchronous backward minimization."""
    if not s.noise.exact:
        raise ValueError("exact dynamic programming needs the quantized noise tree")
    noise, N, dt, U = s.noise, s.grid.N, s.grid.dt, s.controls
    r0, B, dec = s.initial.anchor_index, noise.branches, cfg.decimals
    roots = noise.prefixes(r0)
    first = Layer(r0, roots, [s.initial] * len(roots))
    first.index = {_key(p, s.initial, dec): n for n, p in enumerate(roots)}
    layers = [first]
    total = len(first)
    running = []  # per layer (nodes, controls) running cost times dt
    for i in range(r0, N):
        lay = layers[-1]
        nxt = Layer(i + 1, [], [])
        children = np.empty((len(lay), len(U), B), dtype=np.int64)
        fdt = np.empty((len(lay), len(U)))
        for n, (pre, x) in enumerate(zip(lay.prefixes, lay.paths)):
            w = noise.path(pre)
            for j, v in enumerate(U):
                fdt[n, j] = float(s.coeffs.f(i, x, w, v)) * dt
                y = _step(s, i, x, w, v)
                ykey = y.key(dec)
                for b in range(B):
                    cp = pre + (b,)
                    key = (cp, ykey)
                    pos = nxt.index.get(key)
                    if pos is None:
                        pos = len(nxt.paths)
                        nxt.index[key] = pos
                        nxt.prefixes.append(cp)
                        nxt.paths.append(y)
                    children[n, j, b] = pos
        total += len(nxt)
        if total > cfg.cap:
            raise CapExceeded(f"value table would exceed {cfg.cap} entries")
        lay.children = children
        running.append(fdt)
        layers.append(nxt)
    last = layers[-1]
    last.values = np.array([float(s.coeffs.G(x, noise.path(p))) for p, x in zip(last.prefixes, last.paths)])
    last.argmin = np.zeros(len(last), dtype=np.int64)
    for lay, fdt in zip(reversed(layers[:-1]), reversed(running)):
        after = layers[lay.step + 1 - r0].values
        q = fdt + after[lay.children].mean(axis=-1)
        lay.argmin = np.argmin(q, axis=1)
        lay.values = q[np.arange(len(lay)), lay.argmin]
    return ValueTable(s, layers, cfg)


class ValueFunction:
    """Memoized evaluation of ``V(t_i, x)`` at arbitrary paths and noise nodes.

    Uses the same one-step recursion as :func:`solve_value`, so values agree
    bitwise with table entries where both exist.
    """

    def __init__(self, s: Scenario, decimals: int = 12, cap: int = 5_000_000):
        if not s.noise.exact:
            raise ValueError("value evaluation needs the quantized noise tree")
        self.s = s
        self.decimals = decimals
        self.cap = cap
        self.memo: dict = {}

    def _eval(self, i: int, prefix: tuple, x: GridPath):
        key = (i, prefix, x.key(self.decimals))
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        s, noise = self.s, self.s.noise
        w = noise.path(prefix)
        if i == s.grid.N:
            out = (float(s.coeffs.G(x, w)), 0)
        else:
            q = np.empty(len(s.controls))
            for j, v in enumerate(s.controls):
                y = _step(s, i, x, w, v)
                kids = np.array([self._eval(i + 1, prefix + (b,), y)[0] for b in range(noise.branches)])
                q[j] = float(s.coeffs.f(i, x, w, v)) * s.grid.dt + kids.mean()
            j = int(np.argmin(q))
            out = (float(q[j]), j)
        if len(self.memo) >= self.cap:
            raise CapExceeded(f"value memo exceeded {self.cap} entries")
        self.memo[key] = out
        return out

    def __call__(self, i: int, prefix, x: GridPath) -> float:
        if x.anchor_index != i or len(prefix) != i:
            raise ValueError("path anchor and noise prefix length must equal the step")
        return self._eval(i, tuple(prefix), x)[0]

    def argmin(self, i: int, prefix, x: GridPath) -> int:
        return self._eval(i, tuple(prefix), x)[1]

    def q_values(self, i: int, prefix, x: GridPath) -> np.ndarray:
        """One-step costs ``f dt + E V(t_{i+1}, X^v)`` for every control."""
        s, noise = self.s, self.s.noise
        prefix = tuple(prefix)
        w = noise.path(prefix)
        out = np.empty(len(s.controls))
        for j, v in enumerate(s.controls):
            y = _step(s, i, x, w, v)
            kids = np.array([self(i + 1, prefix + (b,), y) for b in range(noise.branches)])
            out[j] = float(s.coeffs.f(i, x, w, v)) * s.grid.dt + kids.mean()
        return out


# --------------------------------------------------------------------------- DPP


@dataclass
class AchievableCosts:
    values: np.ndarray
    exhaustive: bool


def achievable_costs(
    s: Scenario,
    terminal_value: Callable,
    tau: int,
    stop,
    xi: GridPath,
    prefix: tuple,
    set_cap: int = 1 << 18,
) -> AchievableCosts:
    """Costs of every feedback policy on ``[tau, stop)`` continued by ``terminal_value``.

    ``stop`` is a step index or a predicate ``(i, prefix, x) -> bool``; the
    horizon always stops.  Each policy's cost is enumerated (no minimization
    happens before the caller takes the minimum).  Above ``set_cap`` distinct
    values the sets are pruned to their minimum and ``exhaustive`` is False.
    """
    noise, N, dt = s.noise, s.grid.N, s.grid.dt
    stop_at = (lambda i, p, x: i >= stop) if isinstance(stop, (int, np.integer)) else stop
    exhaustive = True

    def costs(i, pre, x):
        nonlocal exhaustive
        if i >= N or stop_at(i, pre, x):
            return np.array([terminal_value(i, pre, x)])
        w = noise.path(pre)
        out = []
        for v in s.controls:
            run = float(s.coeffs.f(i, x, w, v)) * dt
            y = _step(s, i, x, w, v)
            acc = None
            for b in range(noise.branches):
                kid = costs(i + 1, pre + (b,), y)
                acc = kid if acc is None else (acc[:, None] + kid[None, :]).reshape(-1)
                if acc.size > set_cap:
                    acc = np.unique(acc)
                    if acc.size > set_cap:
                        acc = acc[:1]
                        exhaustive = False
            out.append(run + acc / noise.branches)
        return np.unique(np.concatenate(out))

    return AchievableCosts(costs(tau, tuple(prefix), xi), exhaustive)


def dpp_residual(tbl, s: Scenario, tau: int, tau_hat, xi: GridPath, prefix=(), set_cap: int = 1 << 18) -> float:
    """``|V(tau, xi) - min over policies of E[sum f dt + V(tau_hat, X)]|``.

    ``tbl`` is a :class:`ValueTable` or :class:`ValueFunction`; the right side
    is built by policy enumeration and only reads ``V`` at the stopping layer.
    """
    if isinstance(tau_hat, (int, np.integer)) and not tau <= tau_hat <= s.grid.N:
        raise ValueError("need tau <= tau_hat <= N")
    lookup = tbl.value if isinstance(tbl, ValueTable) else tbl
    rhs = achievable_costs(s, lookup, tau, tau_hat, xi, tuple(prefix), set_cap).values.min()
    return abs(lookup(tau, tuple(prefix), xi) - float(rhs))


def dpp_sweep(tbl: ValueTable, s: Scenario, set_cap: int = 1 << 18) -> list[tuple]:
    """Residual rows ``(tau, tau_hat, prefix, path_node, residual)`` over every table entry."""
    rows = []
    N = s.grid.N
    for lay in tbl.layers:
        tau = lay.step
        for n, (pre, x) in enumerate(zip(lay.prefixes, lay.paths)):
            for tau_hat in range(tau, N + 1):
                rows.append((tau, tau_hat, pre, n, dpp_residual(tbl, s, tau, tau_hat, x, pre, set_cap)))
    return rows


# --------------------------------------------------------------------------- structural checks


def random_feedback_policy(n_controls: int, seed: int, index: int) -> ControlPolicy:
    """Deterministic pseudo-random adapted feedback rule keyed by (seed, index)."""
    salt = f"{seed}:{index}".encode()

    def rule(i, w, x):
        h = zlib.crc32(x.key(12), zlib.crc32(w.key(12), zlib.crc32(salt)))
        return h % n_controls

    return ControlPolicy.feedback(rule)


def supermartingale_gaps(tbl, s: Scenario, pol: ControlPolicy, t: int, t_tilde: int) -> np.ndarray:
    """``E_t[V(t~, X_t~) + sum f dt] - V(t, X_t)`` at every noise node of step ``t``.

    The state follows ``pol`` from the initial prefix.
    """
    if not t <= t_tilde <= s.grid.N:
        raise ValueError("need t <= t_tilde <= N")
    lookup = tbl.value if isinstance(tbl, ValueTable) else tbl
    noise, dt = s.noise, s.grid.dt
    r0 = s.initial.anchor_index

    def state_at(pre):
        x = s.initial
        for i in range(r0, t):
            w = noise.path(pre[:i])
            x = _step(s, i, x, w, s.controls[pol.index(i, w, x)])
        return x

    def forward(i, pre, x):
        if i == t_tilde:
            return lookup(i, pre, x)
        w = noise.path(pre)
        v = s.controls[pol.index(i, w, x)]
        run = float(s.coeffs.f(i, x, w, v)) * dt
        y = _step(s, i, x, w, v)
        return run + float(np.mean([forward(i + 1, pre + (b,), y) for b in range(noise.branches)]))

    gaps = []
    for pre in noise.prefixes(t):
        x = state_at(pre)
        gaps.append(forward(t, pre, x) - lookup(t, pre, x))
    return np.array(gaps)


def supermartingale_gap(tbl, s: Scenario, pol: ControlPolicy, t: int, t_tilde: int) -> float:
    return float(supermartingale_gaps(tbl, s, pol, t, t_tilde).min())


def lipschitz_bound(s: Scenario) -> float:
    L, g = s.L, s.grid
    return L * (1.0 + g.T) * (1.0 + L * g.dt) ** g.N


def lipschitz_probe(tbl: ValueTable, s: Scenario, pairs: int, seed: int = 0) -> float:
    """Max ``|V(t,x) - V(t,y)| / |x - y|_0`` over sampled same-node table pairs."""
    rng = stream(seed, "lipschitz_probe", 0)
    groups: dict = {}
    for i, pre, x, v in tbl.entries():
        groups.setdefault((i, pre), []).append((x, v))
    keys = [k for k, g in groups.items() if len(g) > 1]
    worst = 0.0
    if not keys:
        return worst
    for _ in range(pairs):
        grp = groups[keys[int(rng.integers(len(keys)))]]
        a, b = rng.choice(len(grp), 2, replace=False)
        (x, vx), (y, vy) = grp[a], grp[b]
        dist = sup_distance(x, y)
        if dist > 0:
            worst = max(worst, abs(vx - vy) / dist)
    return worst


@dataclass
class LatticeSweep:
    max_ratio: float
    max_abs_value: float
    pairs: int
    points: int


def lattice_lipschitz_sweep(vf: ValueFunction, s: Scenario, k: float | None = None, levels: int = 3) -> LatticeSweep:
    """Exhaustive ratio and bound scan over the class lattice at every step and noise node."""
    k = s.L if k is None else k
    noise, r0 = s.noise, s.initial.anchor_index
    worst = biggest = 0.0
    pairs = points = 0
    for t in range(r0, s.grid.N + 1):
        members = enumerate_class_lattice(PathClassSpec(k, s.initial, t), levels)
        for pre in noise.prefixes(t):
            vals = np.array([vf(t, pre, x) for x in members])
            nodes = np.stack([x.nodes for x in members])
            biggest = max(biggest, float(np.abs(vals).max()))
            points += len(members)
            for a in range(len(members)):
                dist = np.linalg.norm(nodes[a + 1 :] - nodes[a], axis=2).max(axis=1) if a + 1 < len(members) else np.zeros(0)
                ok = dist > 0
                if ok.any():
                    worst = max(worst, float((np.abs(vals[a + 1 :][ok] - vals[a]) / dist[ok]).max()))
                pairs += int(ok.sum())
    return LatticeSweep(worst, biggest, pairs, points)


# --------------------------------------------------------------------------- epsilon-net gluing


@dataclass
class GluingReport:
    delta: float
    eps: float
    cells: int
    members: int
    max_excess: float

    @property
    def within_bound(self) -> bool:
        return self.max_excess <= 3 * self.eps + 1e-12


def glued_policy_demo(s: Scenario, vf: ValueFunction, t: int, delta: float, levels: int = 3, k: float | None = None) -> GluingReport:
    """Glue per-cell optimal controls over an epsilon-net of the class at step ``t``.

    Every member ``x`` of cell ``j`` plays the control process that is optimal
    from the cell center; its cost exceeds ``V(t, x)`` by at most ``3 eps`` with
    ``eps = L_V delta`` and ``L_V`` the value Lipschitz bound.
    """
    k = s.L if k is None else k
    noise, N = s.noise, s.grid.N
    spec = PathClassSpec(k, s.initial, t)
    net = build_epsilon_net(spec, delta, levels)
    members = enumerate_class_lattice(spec, levels)
    eps = lipschitz_bound(s) * delta
    worst = -math.inf
    for pre in noise.prefixes(t):
        plans = [_optimal_plan(s, vf, t, pre, c) for c in net.centers]
        for x in members:
            plan = plans[net.assign(x)]
            pol = ControlPolicy.open_loop(lambda i, w, plan=plan: plan[noise.prefix_from_path(w)])
            cost = cost_functional(s, t, x, pol, pre)
            worst = max(worst, cost - vf(t, pre, x))
    return GluingReport(delta, eps, len(net.centers), len(members), worst)


def _optimal_plan(s: Scenario, vf: ValueFunction, t: int, prefix: tuple, x: GridPath) -> dict:
    """Map noise prefix -> control index along the optimal feedback from ``(t, x)``."""
    noise, plan = s.noise, {}

    def walk(i, pre, y):
        if i == s.grid.N:
            return
        j = vf.argmin(i, pre, y)
        plan[pre] = j
        z = _step(s, i, y, noise.path(pre), s.controls[j])
        for b in range(noise.branches):
            walk(i + 1, pre + (b,), z)

    walk(t, tuple(prefix), x)
    return plan


# --------------------------------------------------------------------------- export


def export_value_table(tbl: ValueTable, out_dir, per_layer: bool = False) -> list[Path]:
    """Write ``value_index.json`` plus CSV value matrices (one file or one per layer)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {
        "start": tbl.start,
        "N": tbl.scenario.grid.N,
        "T": tbl.scenario.grid.T,
        "controls": tbl.scenario.controls.points.tolist(),
        "layers": [
            {"step": lay.step, "nodes": [{"prefix": list(p), "path": x.nodes.tolist()} for p, x in zip(lay.prefixes, lay.paths)]}
            for lay in tbl.layers
        ],
    }
    files = [out / "value_index.json"]
    files[0].write_text(json.dumps(index))

    def rows(lay):
        for n, (p, v, a) in enumerate(zip(lay.prefixes, lay.values, lay.argmin)):
            yield [lay.step, n, "".join(map(str, p)), repr(float(v)), int(a)]

    header = ["step", "node", "noise_prefix", "value", "argmin"]
    if per_layer:
        for lay in tbl.layers:
            path = out / f"value_layer_{lay.step}.csv"
            _write_csv(path, header, rows(lay))
            files.append(path)
    else:
        path = out / "value_table.csv"
        _write_csv(path, header, (r for lay in tbl.layers for r in rows(lay)))
        files.append(path)
    return files


def write_residual_csv(rows, path) -> Path:
    path = Path(path)
    _write_csv(path, ["tau", "tau_hat", "noise_prefix", "path_node", "residual"], ([r[0], r[1], "".join(map(str, r[2])), r[3], repr(float(r[4]))] for r in rows))
    return path


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
