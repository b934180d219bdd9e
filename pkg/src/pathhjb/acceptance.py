"""Desk-scale acceptance checks, each returning a pass flag and a one-line summary.

Every check compares the solvers against an independent oracle: a closed form,
exhaustive enumeration, an analytic convolution, or a structural identity.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .control import (
    ValueFunction,
    dpp_sweep,
    lattice_lipschitz_sweep,
    lipschitz_bound,
    random_feedback_policy,
    solve_value,
    supermartingale_gaps,
)
from .dynamics import ControlPolicy, flow_bounds
from .hjb import heat_refinement_study
from .noise import stream
from .paths import GridPath, PathClassSpec, build_epsilon_net, enumerate_class_lattice, net_cells, sup_distance
from .sandwich import sandwich_gap_study
from .scenario import make_scenario, random_lattice_path
from .viscosity import (
    LOWER,
    UPPER,
    brute_force_stopping,
    ito_decompose,
    ito_kunita_residual,
    matched_test_function,
    random_probe_cases,
    random_test_function,
    snell_envelope,
    value_functional,
    viscosity_probe,
)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(number: int, name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(number, name, bool(ok), detail, time.perf_counter() - t0)


# --------------------------------------------------------------------------- 1


def closed_form_value(seconds_limit: float = 10.0) -> CheckResult:
    """Value table of the driftable |x(T)| problem against max(|x| - (T - t), 0) and open-loop enumeration."""

    def run():
        T, N = 1.0, 6
        t0 = time.perf_counter()
        s = make_scenario("driftable_abs", T=T, N=N, controls=(-1.0, 0.0, 1.0))
        tbl = solve_value(s)
        elapsed = time.perf_counter() - t0
        dt = s.grid.dt
        err_cf = err_enum = 0.0
        sums = {}
        for i, _, x, v in tbl.entries():
            xi = float(x(i)[0])
            closed = max(abs(xi) - (T - s.grid.time(i)), 0.0)
            if i not in sums:
                sums[i] = np.array([sum(c) for c in itertools.product((-1.0, 0.0, 1.0), repeat=N - i)]) * dt
            enum = float(np.abs(xi + sums[i]).min())
            err_cf = max(err_cf, abs(v - closed))
            err_enum = max(err_enum, abs(v - enum))
        ok = err_cf <= 1e-9 and err_enum <= 1e-9 and elapsed < seconds_limit
        return ok, f"{tbl.size} entries, closed-form err {err_cf:.1e}, enumeration err {err_enum:.1e}, solve {elapsed:.2f}s"

    return _timed(1, "closed-form value match", run)


# --------------------------------------------------------------------------- 2


def dpp_exactness(seed: int = 7, seconds_limit: float = 60.0) -> CheckResult:
    def run():
        t0 = time.perf_counter()
        s = make_scenario("random_cylinder", T=1.0, N=4, controls=(-1.0, 1.0), m=1, params={"seed": seed})
        tbl = solve_value(s)
        rows = dpp_sweep(tbl, s)
        worst = max(r[-1] for r in rows)
        elapsed = time.perf_counter() - t0
        return worst <= 1e-10 and elapsed < seconds_limit, f"{len(rows)} (tau, tau_hat, node) rows, max residual {worst:.1e}"

    return _timed(2, "DPP exactness", run)


# --------------------------------------------------------------------------- 3


def _random_scenario(rng: np.random.Generator, n: int):
    kind = ["driftable_abs", "running_max", "clipped_linear", "random_cylinder"][n % 4]
    N = int(rng.integers(3, 7))
    T = float(rng.uniform(0.5, 2.0))
    m = int(rng.integers(0, 2))
    x0 = (float(rng.uniform(-1, 1)),)
    if kind == "random_cylinder":
        params = {"seed": int(rng.integers(1 << 30)), "L": float(rng.uniform(0.5, 2.0))}
        controls = (-1.0, 1.0)
    elif kind == "running_max":
        params = {"L": 2.0, "kappa": float(rng.uniform(0.2, 1.0))}
        controls = (-1.0, 0.0, 1.0)
    else:
        params = {}
        controls = (-1.0, 0.0, 1.0)
    return make_scenario(kind, T=T, N=N, controls=controls, m=m, initial=x0, params=params)


def flow_estimates(count: int = 1000, seed: int = 11, tol: float = 1e-12) -> CheckResult:
    def run():
        viol = {"sup": 0, "holder": 0, "stability": 0}
        worst = {"sup": math.inf, "holder": math.inf, "stability": math.inf}
        for n in range(count):
            rng = stream(seed, "flow_triples", n)
            s = _random_scenario(rng, n)
            N = s.grid.N
            r = int(rng.integers(0, N))
            xi = random_lattice_path(PathClassSpec(s.L, s.initial, r), 3, rng)
            xi_hat = GridPath(s.grid, xi.nodes + rng.normal(scale=0.3, size=xi.nodes.shape))
            seq = rng.integers(len(s.controls), size=N)
            pol = ControlPolicy.open_loop(lambda i, w, seq=seq: int(seq[i]) if w(i)[0] >= 0 else int(seq[N - 1 - i]))
            noise = s.noise.path(tuple(int(b) for b in rng.integers(s.noise.branches, size=N)))
            rep = flow_bounds(s, pol, noise, xi, xi_hat)
            fb = flow_bounds(s, random_feedback_policy(len(s.controls), seed, n), noise, xi, xi_hat)
            for key, val in (("sup", min(rep.sup_margin, fb.sup_margin)), ("holder", min(rep.holder_margin, fb.holder_margin)), ("stability", rep.stability_margin)):
                worst[key] = min(worst[key], val)
                viol[key] += val < -tol
        ok = not any(viol.values())
        return ok, f"{count} triples, violations {viol}, min margins " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items())

    return _timed(3, "flow bounds", run)


# --------------------------------------------------------------------------- 4


def supermartingale(count: int = 200, seed: int = 5) -> CheckResult:
    def run():
        s = make_scenario("random_cylinder", T=1.0, N=4, controls=(-1.0, 1.0), m=1, params={"seed": seed})
        vf = ValueFunction(s)
        noise, N = s.noise, s.grid.N
        pairs = [(t, u) for t in range(N + 1) for u in range(t, N + 1)]
        low = math.inf
        for n in range(count):
            t, u = pairs[n % len(pairs)]
            low = min(low, float(supermartingale_gaps(vf, s, random_feedback_policy(len(s.controls), seed, n), t, u).min()))
        opt = ControlPolicy.feedback(lambda i, w, x: vf.argmin(i, noise.prefix_from_path(w), x))
        along = max(float(np.abs(supermartingale_gaps(vf, s, opt, t, u)).max()) for t, u in pairs)
        ok = low >= -1e-10 and along <= 1e-10
        return ok, f"min gap over {count} policies {low:.2e}, max |gap| along argmin {along:.1e}"

    return _timed(4, "supermartingale property", run)


# --------------------------------------------------------------------------- 5


def lipschitz_bounds(seed: int = 3) -> CheckResult:
    def run():
        out, ok = [], True
        for s in (
            make_scenario("driftable_abs", T=1.0, N=4, controls=(-1.0, 0.0, 1.0)),
            make_scenario("random_cylinder", T=1.0, N=4, controls=(-1.0, 1.0), m=1, params={"seed": seed}),
        ):
            sw = lattice_lipschitz_sweep(ValueFunction(s), s)
            bound, cap = lipschitz_bound(s), s.L * (s.grid.T + 1)
            ok &= sw.max_ratio <= bound and sw.max_abs_value <= cap
            out.append(f"{s.coeffs.name}: ratio {sw.max_ratio:.3f} <= {bound:.3f}, |V| {sw.max_abs_value:.3f} <= {cap:.3f} ({sw.pairs} pairs)")
        return ok, "; ".join(out)

    return _timed(5, "Lipschitz bound", run)


# --------------------------------------------------------------------------- 6


def ito_exactness(count: int = 20, seed: int = 13, tol: float = 1e-12) -> CheckResult:
    def run():
        s = make_scenario("driftable_abs", T=1.0, N=5, controls=(-1.0, 1.0), m=1)
        res = agree = 0.0
        for n in range(count):
            rng = stream(seed, "ito", n)
            phi = random_test_function(s.grid, 1, 1, int(rng.integers(1 << 30)), n_terms=3)
            r = int(rng.integers(0, 3))
            xr = random_lattice_path(PathClassSpec(1.0, s.initial, r), 3, rng)
            root = tuple(int(b) for b in rng.integers(2, size=r))
            a = ito_decompose(phi, r, xr, s.noise, root)
            b = ito_decompose(phi, r, xr, s.noise, root, order="martingale_first")
            res = max(res, a.reconstruction_residual(), b.reconstruction_residual())
            for p, q in zip(a.dt_part + a.dw_part, b.dt_part + b.dw_part):
                agree = max(agree, float(np.abs(p - q).max()) if p.size else 0.0)
        return res <= tol and agree <= tol, f"{count} functions, reconstruction residual {res:.1e}, order disagreement {agree:.1e}"

    return _timed(6, "Ito decomposition exactness", run)


# --------------------------------------------------------------------------- 7


def ito_kunita_refinement(levels=(8, 16, 32), seed: int = 17) -> CheckResult:
    def run():
        res = []
        for N in levels:
            s = make_scenario("driftable_abs", T=1.0, N=N, controls=(-1.0, 1.0), m=1, initial=(0.3,))
            rng = stream(seed, "kunita", N)
            w = s.noise.path(tuple(int(b) for b in rng.integers(2, size=N)))
            u = lambda i, w, x: float(x(i)[0] ** 2)
            res.append(ito_kunita_residual(u, s, ControlPolicy.constant(1), w, 0, N, s.initial))
        ratios = [b / a for a, b in zip(res, res[1:])]
        ok = all(0.4 <= q <= 0.6 for q in ratios)
        return ok, "residuals " + ", ".join(f"{r:.4e}" for r in res) + " ratios " + ", ".join(f"{q:.3f}" for q in ratios)

    return _timed(7, "Ito-Kunita refinement", run)


# --------------------------------------------------------------------------- 8


def snell_optimality(count: int = 10, seed: int = 19) -> CheckResult:
    def run():
        mism = 0
        shapes = [(2, 4), (2, 3), (4, 2), (2, 2)]
        for n in range(count):
            B, N = shapes[n % len(shapes)]
            rng = stream(seed, "snell", n)
            Y = [rng.standard_normal(B**i) for i in range(N + 1)]
            mism += snell_envelope(Y, B).root() != brute_force_stopping(Y, B)
        return mism == 0, f"{count} trees (N <= 4), mismatches {mism}"

    return _timed(8, "Snell optimality", run)


# --------------------------------------------------------------------------- 9


def epsilon_net(count: int = 10, seed: int = 23) -> CheckResult:
    def run():
        bad = 0
        worst_ratio = 0.0
        for n in range(count):
            rng = stream(seed, "net", n)
            N = int(rng.integers(3, 6))
            s = make_scenario("driftable_abs", T=float(rng.uniform(0.5, 2)), N=N, initial=(float(rng.uniform(-1, 1)),))
            r = int(rng.integers(0, 2))
            base = random_lattice_path(PathClassSpec(1.0, s.initial, r), 3, rng)
            spec = PathClassSpec(float(rng.uniform(0.5, 2)), base, N)
            delta = float(rng.uniform(0.05, 1.0))
            net = build_epsilon_net(spec, delta, 3)
            members = enumerate_class_lattice(spec, 3)
            cells = net_cells(net, members)
            # disjoint + covering: every member lands in exactly one cell
            counts = sum(len(c) for c in cells)
            keys = [x.key() for c in cells for x in c]
            bad += counts != len(members) or len(set(keys)) != len(keys)
            for c in cells:
                diam = max((sup_distance(a, b) for a, b in itertools.combinations(c, 2)), default=0.0)
                worst_ratio = max(worst_ratio, diam / delta)
                bad += diam >= delta
        return bad == 0, f"{count} classes, failures {bad}, max diameter/delta {worst_ratio:.3f}"

    return _timed(9, "epsilon-net validity", run)


# --------------------------------------------------------------------------- 10


def pde_order(seconds_limit: float = 60.0) -> CheckResult:
    def run():
        t0 = time.perf_counter()
        st = heat_refinement_study()
        elapsed = time.perf_counter() - t0
        ok = min(st.orders) >= 0.9 and elapsed < seconds_limit
        return ok, "errors " + ", ".join(f"{e:.2e}" for e in st.errors) + " orders " + ", ".join(f"{o:.2f}" for o in st.orders)

    return _timed(10, "PDE solver order", run)


# --------------------------------------------------------------------------- 11

SANDWICH_SWEEP = ((0.2, 0.2), (0.1, 0.1), (0.05, 0.05))


def sandwich_validity(seed: int = 3) -> CheckResult:
    def run():
        out, ok = [], True
        cases = (
            (make_scenario("driftable_abs", T=1.0, N=4, controls=(-1.0, 0.0, 1.0)), None),
            (make_scenario("random_cylinder", T=1.0, N=4, controls=(-1.0, 1.0), m=1, params={"seed": seed}), 2),
        )
        for s, cells in cases:
            st = sandwich_gap_study(s, SANDWICH_SWEEP, k=1.0, n_cells=cells)
            ok &= st.all_valid and st.decreasing and st.band < 10
            viol = max(r[5] for r in st.rows)
            out.append(f"{s.coeffs.name}: max violation {viol:.2e}, gaps " + "/".join(f"{g:.3f}" for g in st.gaps) + f", band {st.band:.2f}")
        return ok, "; ".join(out)

    return _timed(11, "sandwich validity", run)


# --------------------------------------------------------------------------- 12


def viscosity_probes(count: int = 20, seed: int = 29, tol: float = 1e-6, shift: float = 0.7) -> CheckResult:
    def run():
        s = make_scenario("random_cylinder", T=1.0, N=4, controls=(-1.0, 1.0), m=1, params={"seed": seed})
        u = value_functional(ValueFunction(s))
        sub_max, sup_min, shift_err = -math.inf, math.inf, 0.0
        for n, c in enumerate(random_probe_cases(s, count, seed)):
            for side in (LOWER, UPPER):
                phi = matched_test_function(u, c.xi, side, seed + n)
                base = viscosity_probe(u, s, phi, c.tau, c.xi, c.k, side, c.root)
                cc = shift if side == LOWER else -shift
                moved = viscosity_probe(u, s, phi.shifted(cc, c.tau), c.tau, c.xi, c.k, side, c.root)
                shift_err = max(shift_err, abs(moved.margin - base.margin + cc))
                if side == LOWER:
                    sub_max = max(sub_max, base.margin)
                else:
                    sup_min = min(sup_min, base.margin)
        ok = sub_max <= tol and sup_min >= -tol and shift_err <= 1e-9
        return ok, f"{count} cases, max sub margin {sub_max:.3e}, min super margin {sup_min:.3e}, shift error {shift_err:.1e}"

    return _timed(12, "viscosity probes", run)


CHECKS = {
    1: closed_form_value,
    2: dpp_exactness,
    3: flow_estimates,
    4: supermartingale,
    5: lipschitz_bounds,
    6: ito_exactness,
    7: ito_kunita_refinement,
    8: snell_optimality,
    9: epsilon_net,
    10: pde_order,
    11: sandwich_validity,
    12: viscosity_probes,
}


def run_checks(numbers=None) -> list[CheckResult]:
    return [CHECKS[n]() for n in (sorted(CHECKS) if numbers is None else numbers)]
