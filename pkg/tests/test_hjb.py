import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathhjb.approximation import ApproxParams, build_cylinder_approximation
from pathhjb.hjb import (
    CFLViolation,
    DomainTooSmall,
    HJBGridSpec,
    bilinear,
    estimate_gradient_bound,
    heat_refinement_study,
    heat_solution,
    solve_markovian_hjb,
    stable_step,
)
from pathhjb.noise import QUANTIZED, NoiseModel
from pathhjb.paths import GridPath, TimeGrid
from pathhjb.scenario import CoefficientSet, ControlSet, Scenario, make_scenario

GRID = TimeGrid(1.0, 4)
ZERO_B = lambda i, x, w, v: 0.0 * x(i)
ZERO_F = lambda i, x, w, v: 0.0 * x(i)[0]


def _scenario(G, f=ZERO_F, beta=ZERO_B, controls=(0.0,), m=0, x0=0.0, markovian=True, L=1.0):
    coeffs = CoefficientSet(beta, f, G, L, L, markovian)
    return Scenario(GRID, ControlSet(controls), NoiseModel(QUANTIZED, m, GRID), coeffs, GridPath(GRID, [[x0]]))


def _solve(s, delta=0.3, cells=1, spec=HJBGridSpec(nx=81, ny=31)):
    p = ApproxParams(1.0, 1.0, delta, n_cells=cells, mollifier_width=0.0)
    return solve_markovian_hjb(build_cylinder_approximation(s, p), p, spec)


def test_constant_terminal_and_unit_running_cost_integrate_time():
    s = _scenario(lambda x, w: 0 * x(x.anchor_index)[0] + 2.0, f=lambda i, x, w, v: 0 * x(i)[0] + 1.0)
    fld = _solve(s)
    for i in range(5):
        assert np.allclose(fld.values(i), 2.0 + (GRID.T - GRID.time(i)), atol=1e-12)


def test_linear_terminal_is_transported_by_the_best_drift():
    # min over v in {-1, 1} of v u_x with u_x = 1 picks v = -1: u = x - (T - t)
    s = _scenario(lambda x, w: x(x.anchor_index)[0], beta=lambda i, x, w, v: np.broadcast_to(v[0], x(i).shape), controls=(-1.0, 1.0))
    fld = _solve(s)
    x = fld.x_axis
    inner = np.abs(x) <= 1.5  # outside the numerical domain of dependence of both edges
    for i in range(5):
        assert np.allclose(fld.values(i)[0][inner], x[inner] - (GRID.T - GRID.time(i)), atol=1e-11)


def test_noise_axis_carries_a_martingale_terminal():
    s = _scenario(lambda x, w: w(w.anchor_index)[0] + 0 * x(x.anchor_index)[0], m=1)
    fld = _solve(s, spec=HJBGridSpec(nx=21, ny=81, y_halfwidth=10.0))
    y = fld.y_axis
    u0 = fld.values(0)
    inner = np.abs(y) <= 4.0
    assert u0.shape == (len(y), len(fld.x_axis))
    assert np.allclose(u0[inner], y[inner][:, None], atol=1e-10)


def test_heat_reduction_converges_at_better_than_first_order():
    study = heat_refinement_study()
    assert all(b < a for a, b in zip(study.errors, study.errors[1:]))
    assert min(study.orders) > 1.0


def test_heat_solution_is_the_gaussian_convolution():
    # direct quadrature of the bump against the heat kernel
    z = np.linspace(-12, 12, 400_001)
    T, delta, s0, x = 1.0, 0.5, 0.4, 0.7
    kernel = np.exp(-((x - z) ** 2) / (2 * delta**2 * T)) / math.sqrt(2 * math.pi * delta**2 * T)
    assert heat_solution(x, T, delta, s0) == pytest.approx(np.trapezoid(kernel * np.exp(-(z**2) / (2 * s0**2)), z), rel=1e-9)


def test_explicit_step_above_the_stability_limit_raises():
    s = _scenario(lambda x, w: x(x.anchor_index)[0])
    with pytest.raises(CFLViolation):
        _solve(s, spec=HJBGridSpec(nx=81, dt_pde=1.0))


def test_stable_step_matches_the_rate_formula():
    assert stable_step(0.1, None, 0.5, 2.0) == pytest.approx(1 / (25 + 20))
    assert stable_step(0.1, 0.2, 0.5, 0.0) == pytest.approx(1 / (25 + 25))


def test_box_too_small_for_the_reachable_region_raises():
    s = _scenario(lambda x, w: x(x.anchor_index)[0], x0=0.5)
    with pytest.raises(DomainTooSmall):
        _solve(s, spec=HJBGridSpec(nx=81, x_halfwidth=1.0))
    with pytest.raises(DomainTooSmall):
        _solve(_scenario(lambda x, w: x(x.anchor_index)[0], m=1), spec=HJBGridSpec(nx=81, y_halfwidth=0.5))


def test_unsupported_dimensions_are_rejected():
    with pytest.raises(ValueError):
        _solve(_scenario(lambda x, w: x(x.anchor_index)[0], m=2))
    s = make_scenario("driftable_abs", N=4, initial=(0.0, 0.0))
    with pytest.raises(ValueError):
        _solve(s)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        HJBGridSpec(nx=3)
    with pytest.raises(ValueError):
        HJBGridSpec(cfl=1.5)


@pytest.mark.parametrize(
    "G, bound",
    [
        (lambda x, w: 0 * x(x.anchor_index)[0] + 1.0, 0.0),
        (lambda x, w: 0.5 * x(x.anchor_index)[0], 0.5),
    ],
)
def test_gradient_bound_of_constant_and_linear_terminals(G, bound):
    assert estimate_gradient_bound(_solve(_scenario(G))) == pytest.approx(bound, abs=1e-12)


def test_gradient_bound_of_abs_is_at_most_one():
    fld = _solve(_scenario(lambda x, w: np.abs(x(x.anchor_index)[0])))
    assert estimate_gradient_bound(fld) <= 1.0 + 1e-12


def test_value_is_bounded_by_terminal_plus_running_cost():
    s = make_scenario("clipped_linear", N=4, controls=(-1.0, 1.0), initial=(0.2,))
    fld = _solve(s)
    for i in range(5):
        assert np.abs(fld.values(i)).max() <= (GRID.T - GRID.time(i)) * 1.0 + 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(-1, 1), st.floats(0.0, 1.0))
def test_larger_terminal_gives_larger_solution(a, bump):
    lo = _solve(_scenario(lambda x, w: np.tanh(x(x.anchor_index)[0] + a)))
    hi = _solve(_scenario(lambda x, w: np.tanh(x(x.anchor_index)[0] + a) + bump * np.exp(-x(x.anchor_index)[0] ** 2)))
    for i in range(5):
        assert np.all(hi.values(i) >= lo.values(i) - 1e-13)


def test_partition_cells_chain_through_the_frozen_samples():
    # G = x(T) + x(t_2) with no drift: u(0, x0) = 2 x0 since X is a martingale
    s = _scenario(lambda x, w: x(x.anchor_index)[0] + x(2)[0], x0=0.3, markovian=False)
    fld = _solve(s, delta=0.1, cells=2, spec=HJBGridSpec())
    assert fld.at_path(0, s.noise.path(()), s.initial) == pytest.approx(0.6, abs=1e-9)
    assert len(fld.slabs) > 1
    assert {cell for cell, _ in fld.slabs} == {0, 1}


def test_markovian_sets_use_one_cell():
    fld = _solve(make_scenario("clipped_linear", N=4, controls=(-1.0, 1.0)), cells=4)
    assert fld.partition.tolist() == [0, 4] and list(fld.slabs) == [(0, ())]


def test_bilinear_reproduces_affine_data_and_clamps():
    y, x = np.linspace(-1, 1, 5), np.linspace(-2, 2, 9)
    u = 3 * y[:, None] - x[None, :] + 0.5
    assert bilinear(u, y, x, 0.3, 0.7) == pytest.approx(3 * 0.3 - 0.7 + 0.5)
    assert bilinear(u, y, x, 5.0, -9.0) == pytest.approx(3 + 2 + 0.5)
    assert bilinear((0.5 - x)[None, :], None, x, 0.0, 1.25) == pytest.approx(-0.75)


def test_dump_writes_slabs_and_a_header(tmp_path):
    s = _scenario(lambda x, w: x(x.anchor_index)[0] + x(2)[0], x0=0.3, markovian=False)
    fld = _solve(s, delta=0.1, cells=2)
    files = fld.dump(tmp_path)
    head = json.loads((tmp_path / "markov_field.json").read_text())
    assert head["N"] == 4 and head["partition"] == [0, 2, 4]
    assert len(head["slabs"]) == len(fld.slabs) == len(files) - 1
    arr = np.load(tmp_path / head["slabs"][0]["file"])
    assert arr.shape == (len(head["slabs"][0]["steps"]), 1, 81)
