import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathhjb.control import (
    DPConfig,
    MCEstimate,
    ValueFunction,
    achievable_costs,
    cost_functional,
    dpp_residual,
    export_value_table,
    glued_policy_demo,
    hamiltonian,
    lattice_lipschitz_sweep,
    lipschitz_bound,
    lipschitz_probe,
    random_feedback_policy,
    solve_value,
    supermartingale_gap,
)
from pathhjb.dynamics import ControlPolicy
from pathhjb.noise import GAUSSIAN
from pathhjb.paths import CapExceeded, GridPath, PathClassSpec
from pathhjb.scenario import make_scenario, random_lattice_path


@pytest.fixture(scope="module")
def cyl():
    s = make_scenario("random_cylinder", T=1.0, N=4, controls=(-1.0, 1.0), m=1, params={"seed": 7})
    return s, solve_value(s)


def test_deterministic_value_from_an_offset_start_matches_open_loop_enumeration():
    # reachable states 0.7 + 0.2 n never hit 0, so the kink sits between lattice points
    s = make_scenario("driftable_abs", T=1.0, N=5, controls=(-1.0, 0.0, 1.0), initial=(0.7,))
    tbl = solve_value(s)
    for i, _, x, v in tbl.entries():
        sums = np.array([sum(c) for c in itertools.product((-1.0, 0.0, 1.0), repeat=5 - i)]) * s.grid.dt
        assert v == pytest.approx(np.abs(x(i)[0] + sums).min(), abs=1e-12)


def test_table_root_is_the_minimum_over_all_open_loop_sequences(cyl):
    s, tbl = cyl
    # with noise, open-loop sequences are an upper bound; feedback can only do better
    best_open = min(cost_functional(s, 0, s.initial, ControlPolicy.open_loop(seq)) for seq in itertools.product(range(2), repeat=4))
    assert tbl.root_value() <= best_open + 1e-12


def test_value_function_agrees_bitwise_with_the_table(cyl):
    s, tbl = cyl
    vf = ValueFunction(s)
    for i, pre, x, v in tbl.entries():
        assert vf(i, pre, x) == v


def test_argmin_policy_attains_the_value(cyl):
    s, tbl = cyl
    assert cost_functional(s, 0, s.initial, tbl.policy()) == pytest.approx(tbl.root_value(), abs=1e-12)


def test_dpp_with_a_random_stopping_predicate(cyl):
    s, tbl = cyl
    stop = lambda i, pre, x: x(i)[0] > 0.1 or i >= 3
    assert dpp_residual(tbl, s, 0, stop, s.initial) <= 1e-12


def test_achievable_costs_contain_every_constant_policy(cyl):
    s, tbl = cyl
    costs = achievable_costs(s, tbl.value, 0, 4, s.initial, ()).values
    for j in range(2):
        c = cost_functional(s, 0, s.initial, ControlPolicy.constant(j))
        assert np.min(np.abs(costs - c)) <= 1e-12


def test_cap_is_enforced():
    s = make_scenario("random_cylinder", N=4, m=1, params={"seed": 1})
    with pytest.raises(CapExceeded):
        solve_value(s, DPConfig(cap=10))


def test_monte_carlo_cost_is_consistent_with_the_tree_for_deterministic_problems():
    s = make_scenario("driftable_abs", N=4, controls=(-1.0, 1.0), initial=(0.5,))
    pol = ControlPolicy.constant(0)
    exact = cost_functional(s, 0, s.initial, pol)
    mc = cost_functional(s.with_noise(type(s.noise)(GAUSSIAN, 0, s.grid, mc_samples=5, seed=1)), 0, s.initial, pol)
    assert isinstance(mc, MCEstimate) and mc.mean == pytest.approx(exact)


def test_hamiltonian_of_driftable_abs_is_minus_abs_p():
    s = make_scenario("driftable_abs", controls=(-1.0, 0.0, 1.0))
    w = s.noise.path(())
    for p in (-2.0, 0.0, 0.5):
        assert hamiltonian(s, 0, s.initial, w, [p]) == -abs(p)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.integers(0, 4))
def test_value_is_a_supermartingale_along_any_policy(cyl, idx, a, b):
    s, tbl = cyl
    t, u = min(a, b), max(a, b)
    vf = ValueFunction(s)
    assert supermartingale_gap(vf, s, random_feedback_policy(2, 0, idx), t, u) >= -1e-12


def test_lipschitz_probe_and_sweep_stay_under_the_bound(cyl):
    s, tbl = cyl
    bound = lipschitz_bound(s)
    assert lipschitz_probe(tbl, s, 500) <= bound
    sw = lattice_lipschitz_sweep(ValueFunction(s), s, levels=3)
    assert sw.max_ratio <= bound and sw.max_abs_value <= s.L * (1 + s.grid.T)


def test_glued_policy_stays_within_three_eps():
    s = make_scenario("driftable_abs", N=4, controls=(-1.0, 0.0, 1.0))
    rep = glued_policy_demo(s, ValueFunction(s), 2, 1.0)
    assert rep.within_bound and rep.cells >= 1


def test_export_writes_index_and_values(tmp_path, cyl):
    s, tbl = cyl
    files = export_value_table(tbl, tmp_path)
    names = {f.name for f in files}
    assert {"value_index.json", "value_table.csv"} <= names
    again = export_value_table(tbl, tmp_path / "b")
    assert (tmp_path / "value_table.csv").read_bytes() == (tmp_path / "b" / "value_table.csv").read_bytes()
