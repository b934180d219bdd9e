"""Command-line runner: ``pathhjb <task> --config <file> [--seed S] [--out DIR] [--cap N]``.

Exit status: 0 when every pass flag holds, 1 when a flag fails, 2 for a
malformed config, 3 when a size cap is exceeded, 4 on numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acceptance
from .control import DPConfig, ValueFunction, dpp_sweep, export_value_table, solve_value, write_residual_csv
from .dynamics import ControlPolicy, dump_trajectory, integrate_state
from .hjb import CFLViolation, DomainTooSmall, HJBGridSpec
from .paths import CapExceeded, GridPath
from .report import Series, emit_convergence_data
from .sandwich import sandwich_gap_study
from .scenario import SchemaError, Scenario, constant_eta, habit_living_standard, scenario_from_dict, shift_by_eta, validate_coefficients
from .viscosity import LOWER, UPPER, matched_test_function, random_probe_cases, value_functional, viscosity_probe, write_probe_csv

TASKS = ("validate", "value", "dpp", "sandwich", "probe", "demo_habit", "demo_shift", "check")

EXIT_OK, EXIT_FAILED, EXIT_SCHEMA, EXIT_CAP, EXIT_NUMERIC = 0, 1, 2, 3, 4


class NumericFailure(RuntimeError):
    """A computed quantity is not finite."""


@dataclass
class ExperimentConfig:
    task: str
    scenario: dict
    params: dict
    out: Path
    seed: int
    cap: int

    @classmethod
    def from_dict(cls, data: dict, task: str, out=None, seed=None, cap=None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise SchemaError("config must be a JSON object")
        if task not in TASKS:
            raise SchemaError(f"unknown task {task!r}")
        if data.get("task", task) != task:
            raise SchemaError(f"config is for task {data['task']!r}, command line asked for {task!r}")
        scen = data.get("scenario")
        if task != "check" and not isinstance(scen, dict):
            raise SchemaError("config needs a 'scenario' object")
        params = data.get("params", {})
        if not isinstance(params, dict):
            raise SchemaError("'params' must be an object")
        try:
            seed = int(data.get("seed", 0) if seed is None else seed)
            cap = int(data.get("cap", 2_000_000) if cap is None else cap)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"seed and cap must be integers: {exc}") from exc
        out = Path(out or data.get("out", f"runs/{task}"))
        return cls(task, scen or {}, params, out, seed, cap)


@dataclass
class RunReport:
    task: str
    summary: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "passed": self.passed,
            "flags": self.flags,
            "summary": self.summary,
            "params": self.params,
            "files": [str(f) for f in self.files],
            "wall_time": self.wall_time,
        }


def _finite(**vals):
    for k, v in vals.items():
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"{k} is not finite: {v}")


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float))
    return path


# --------------------------------------------------------------------------- tasks


def task_validate(cfg: ExperimentConfig, s: Scenario, rep: RunReport):
    r = validate_coefficients(s, int(cfg.params.get("samples", 200)), int(cfg.params.get("levels", 3)))
    info = r.as_dict()
    rep.summary.update({"L": info["L"], "max_beta": info["max_beta"], "max_f": info["max_f"], "max_G": info["max_G"]})
    rep.flags["coefficients_valid"] = r.passed
    rep.files.append(_write_json(cfg.out / "validation.json", info))


def task_value(cfg: ExperimentConfig, s: Scenario, rep: RunReport):
    tbl = solve_value(s, DPConfig(cap=cfg.cap))
    _finite(root=tbl.root_value())
    rep.summary.update({"root_value": tbl.root_value(), "entries": tbl.size, "max_abs": tbl.max_abs()})
    rep.flags["values_bounded"] = tbl.max_abs() <= s.L * (s.grid.T + 1) + 1e-12
    rep.files += export_value_table(tbl, cfg.out, bool(cfg.params.get("per_layer", False)))


def task_dpp(cfg: ExperimentConfig, s: Scenario, rep: RunReport):
    tol = float(cfg.params.get("tol", 1e-10))
    tbl = solve_value(s, DPConfig(cap=cfg.cap))
    rows = dpp_sweep(tbl, s)
    worst = max(r[-1] for r in rows)
    _finite(residual=worst)
    rep.summary.update({"rows": len(rows), "max_residual": worst})
    rep.flags["dpp_residuals_within_tol"] = worst <= tol
    rep.files.append(write_residual_csv(rows, cfg.out / "dpp_residuals.csv"))


def _sweep_settings(params: dict, sweep: str | None) -> list[tuple[float, float]]:
    if "settings" in params and sweep is None:
        return [(float(a), float(b)) for a, b in params["settings"]]
    names = {n.strip() for n in (sweep or "eps,delta").split(",") if n.strip()}
    if not names <= {"eps", "delta"}:
        raise SchemaError(f"--sweep accepts eps and/or delta, got {sorted(names)}")
    eps0, delta0 = float(params.get("eps", 0.2)), float(params.get("delta", 0.2))
    points = int(params.get("points", 3))
    if points < 2:
        raise SchemaError("a sweep needs at least 2 points")
    return [(eps0 / 2**n if "eps" in names else eps0, delta0 / 2**n if "delta" in names else delta0) for n in range(points)]


def task_sandwich(cfg: ExperimentConfig, s: Scenario, rep: RunReport, sweep: str | None = None):
    settings = _sweep_settings(cfg.params, sweep)
    spec = HJBGridSpec(**cfg.params.get("grid", {}))
    k = float(cfg.params.get("k", 1.0))
    st = sandwich_gap_study(s, settings, k=k, levels=int(cfg.params.get("levels", 3)), spec=spec, n_cells=cfg.params.get("n_cells"))
    _finite(gaps=st.gaps)
    rep.summary.update({"settings": settings, "gaps": st.gaps, "fitted_constants": st.fitted, "band": st.band})
    rep.flags["sandwich_holds"] = st.all_valid
    if len(settings) > 1:
        rep.flags["gap_decreases"] = st.decreasing
        rep.flags["fitted_constant_band_below_10"] = st.band < 10
    rep.files.append(st.to_csv(cfg.out / "sandwich.csv"))
    scale = [e * (1 + k) + d for e, d in settings]
    rep.files += emit_convergence_data(
        [
            Series("sandwich_gap", scale, st.gaps, "eps(1+k)+delta", "max gap", logscale=True),
            Series("sandwich_fitted_constant", scale, st.fitted, "eps(1+k)+delta", "gap/(eps(1+k)+delta)"),
        ],
        cfg.out,
        render_png=bool(cfg.params.get("png", False)),
    )


def task_probe(cfg: ExperimentConfig, s: Scenario, rep: RunReport):
    tol = float(cfg.params.get("tol", 1e-6))
    count = int(cfg.params.get("count", 20))
    ks = tuple(float(k) for k in cfg.params.get("ks", (0.5, 1.0)))
    u = value_functional(ValueFunction(s, cap=cfg.cap))
    rows, sub, sup = [], -np.inf, np.inf
    for n, c in enumerate(random_probe_cases(s, count, cfg.seed, ks)):
        for side in (LOWER, UPPER):
            phi = matched_test_function(u, c.xi, side, cfg.seed + n)
            r = viscosity_probe(u, s, phi, c.tau, c.xi, c.k, side, c.root, n_shells=int(cfg.params.get("shells", 3)))
            rows.append((c.tau, n, c.k, "sub" if side == LOWER else "super", f"{r.margin:.12g}", " ".join(f"{v:.12g}" for v in r.shells), f"{r.trend_slope:.12g}"))
            if side == LOWER:
                sub = max(sub, r.margin)
            else:
                sup = min(sup, r.margin)
    rep.summary.update({"cases": count, "max_sub_margin": sub, "min_super_margin": sup})
    rep.flags["sub_margins_nonpositive"] = sub <= tol
    rep.flags["super_margins_nonnegative"] = sup >= -tol
    rep.files.append(write_probe_csv(rows, cfg.out / "probes.csv"))


def task_demo_habit(cfg: ExperimentConfig, s: Scenario, rep: RunReport):
    if s.coeffs.name != "habit":
        raise SchemaError("demo_habit needs the 'habit' coefficient set")
    tbl = solve_value(s, DPConfig(cap=cfg.cap))
    vf = ValueFunction(s)
    noise = s.noise
    prefix = tuple(int(b) for b in np.random.default_rng(cfg.seed).integers(noise.branches, size=s.grid.N))
    w = noise.path(prefix)
    pol = ControlPolicy.feedback(lambda i, ww, x: vf.argmin(i, noise.prefix_from_path(ww), x))
    traj = integrate_state(s, pol, w, s.initial.anchor_index, s.initial)
    info = s.coeffs.params
    gamma = info["gamma0"] + info["sigma_gamma"] * w.nodes[:, 0]
    z = [habit_living_standard(i, traj.path.restrict(i), gamma, info["kernel"]) if np.all(np.diff(traj.path.nodes[: i + 1, 0]) >= 0) else np.nan for i in range(s.grid.N + 1)]
    rep.summary.update({"root_value": tbl.root_value(), "noise_prefix": list(prefix)})
    rep.flags["value_finite"] = bool(np.isfinite(tbl.root_value()))
    rep.files += dump_trajectory(traj, cfg.out / "habit_trajectory", noise_id=",".join(map(str, prefix)))
    rep.files += emit_convergence_data(
        [Series("habit_consumption", s.grid.times, traj.path.nodes[:, 0], "t", "C(t)"), Series("habit_living_standard", s.grid.times, z, "t", "Z(t)")],
        cfg.out,
        render_png=bool(cfg.params.get("png", False)),
    )


def task_demo_shift(cfg: ExperimentConfig, s: Scenario, rep: RunReport):
    c = np.broadcast_to(np.asarray(cfg.params.get("eta", 0.5), dtype=float), (s.dim,))
    shifted = shift_by_eta(s, constant_eta(c))
    v_shift = solve_value(shifted, DPConfig(cap=cfg.cap)).root_value()
    moved = s.with_initial(GridPath(s.grid, s.initial.nodes + c))
    v_orig = solve_value(moved, DPConfig(cap=cfg.cap)).root_value()
    diff = abs(v_shift - v_orig)
    rep.summary.update({"shifted_value": v_shift, "translated_value": v_orig, "difference": diff, "eta": c.tolist()})
    rep.flags["shift_matches_translation"] = diff <= float(cfg.params.get("tol", 1e-10))
    rep.files.append(_write_json(cfg.out / "shift.json", rep.summary))


def task_check(cfg: ExperimentConfig, rep: RunReport):
    numbers = cfg.params.get("criteria") or sorted(acceptance.CHECKS)
    lines = []
    for n in numbers:
        if n not in acceptance.CHECKS:
            raise SchemaError(f"no acceptance check numbered {n}")
        r = acceptance.CHECKS[n]()
        rep.flags[f"criterion_{n}"] = r.passed
        lines.append(r.line())
        print(r.line())
    path = cfg.out / "acceptance.txt"
    path.write_text("\n".join(lines) + "\n")
    rep.files.append(path)


def run(cfg: ExperimentConfig, sweep: str | None = None) -> RunReport:
    t0 = time.perf_counter()
    rep = RunReport(cfg.task, params={"scenario": cfg.scenario, "params": cfg.params, "seed": cfg.seed, "cap": cfg.cap})
    s = scenario_from_dict(cfg.scenario) if cfg.task != "check" else None
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cfg.task == "check":
        task_check(cfg, rep)
    elif cfg.task == "sandwich":
        task_sandwich(cfg, s, rep, sweep)
    else:
        globals()[f"task_{cfg.task}"](cfg, s, rep)
    rep.wall_time = time.perf_counter() - t0
    rep.files.append(cfg.out / "report.json")
    _write_json(cfg.out / "report.json", rep.as_dict())
    return rep


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pathhjb", description="Path-dependent stochastic control experiments on quantized trees.")
    ap.add_argument("task", choices=TASKS)
    ap.add_argument("--config", help="JSON experiment config (optional for 'check')")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", help="output directory (default runs/<task>)")
    ap.add_argument("--cap", type=int, help="size cap on enumerations; exceeding it exits with 3")
    ap.add_argument("--sweep", help="sandwich only: comma list of swept parameters, e.g. eps,delta")
    ap.add_argument("--criteria", help="check only: comma list of criterion numbers")
    return ap


def _load(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    elif args.task == "check":
        data = {}
    else:
        raise SchemaError("--config is required for this task")
    if not isinstance(data, dict):
        raise SchemaError("config must be a JSON object")
    if args.criteria:
        data.setdefault("params", {})["criteria"] = [int(c) for c in args.criteria.split(",")]
    cfg = ExperimentConfig.from_dict(data, args.task, args.out, args.seed, args.cap)
    if cfg.task != "check":
        scenario_from_dict(cfg.scenario)
        if cfg.task == "sandwich":
            _sweep_settings(cfg.params, args.sweep)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # validation happens before anything is written
    try:
        cfg = _load(args)
    except (SchemaError, json.JSONDecodeError, OSError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        rep = run(cfg, args.sweep)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except CapExceeded as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (NumericFailure, CFLViolation, DomainTooSmall, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = {k: v for k, v in rep.summary.items() if not isinstance(v, (list, dict))}
    print(json.dumps({"task": rep.task, "passed": rep.passed, "flags": rep.flags, **summary}, default=float))
    return EXIT_OK if rep.passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
