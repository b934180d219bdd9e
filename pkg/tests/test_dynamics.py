import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathhjb.dynamics import ControlPolicy, dump_trajectory, flow_bounds, integrate_state, restart_consistency, stability_factor
from pathhjb.paths import GridMismatch, GridPath, PathClassSpec
from pathhjb.scenario import make_scenario, random_lattice_path


def test_constant_control_moves_linearly():
    s = make_scenario("driftable_abs", T=1.0, N=4, controls=(-1.0, 1.0))
    tr = integrate_state(s, ControlPolicy.constant(1), s.noise.path((0,) * 4), 0, s.initial)
    assert np.allclose(tr.path.nodes[:, 0], np.linspace(0, 1, 5))
    assert tr.control_indices == (1, 1, 1, 1)


def test_wrong_anchor_is_rejected():
    s = make_scenario("driftable_abs", N=4)
    with pytest.raises(GridMismatch):
        integrate_state(s, ControlPolicy.constant(0), s.noise.path((0,) * 4), 1, s.initial)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_restarting_reproduces_the_tail(r, extra, seed):
    s = make_scenario("random_cylinder", N=5, m=1, params={"seed": 2})
    t = min(r + extra, 5)
    rng = np.random.default_rng(seed)
    w = s.noise.path(tuple(rng.integers(2, size=5)))
    pol = ControlPolicy.feedback(lambda i, w, x: int(x(i)[0] > 0))
    xi = random_lattice_path(PathClassSpec(1.0, s.initial, r), 3, rng)
    assert restart_consistency(s, pol, w, r, t, xi) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_flow_bounds_hold_for_random_open_loop_controls(seed):
    rng = np.random.default_rng(seed)
    s = make_scenario("random_cylinder", N=5, m=1, params={"seed": int(rng.integers(100)), "L": 1.5})
    seq = rng.integers(2, size=5)
    pol = ControlPolicy.open_loop(seq)
    w = s.noise.path(tuple(rng.integers(2, size=5)))
    xi = random_lattice_path(PathClassSpec(1.5, s.initial, 1), 3, rng)
    xh = GridPath(s.grid, xi.nodes + rng.normal(size=xi.nodes.shape))
    rep = flow_bounds(s, pol, w, xi, xh)
    assert rep.sup_margin >= -1e-12 and rep.holder_margin >= -1e-12 and rep.stability_margin >= -1e-12


def test_stability_factor_is_the_discrete_gronwall_constant():
    assert stability_factor(2.0, 0.1, 3) == pytest.approx(1.2**3)


def test_trajectory_dump_writes_csv_and_json(tmp_path):
    s = make_scenario("driftable_abs", N=3)
    tr = integrate_state(s, ControlPolicy.constant(0), s.noise.path((0,) * 3), 0, s.initial)
    files = dump_trajectory(tr, tmp_path / "traj", "zeros")
    assert [f.suffix for f in files] == [".csv", ".json"] and all(f.exists() for f in files)
