import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathhjb.paths import (
    CADLAG,
    CapExceeded,
    GridMismatch,
    GridPath,
    NetPartition,
    PathClassSpec,
    TimeGrid,
    build_epsilon_net,
    class_contains,
    constant_path,
    d0,
    enumerate_class_lattice,
    horizontal_extension,
    lattice_size,
    net_cells,
    path_from_csv,
    path_to_csv,
    sup_distance,
    sup_norm,
    vertical_perturbation,
)

GRID = TimeGrid(1.0, 4)
values = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=5)


def path_of(vals, grid=GRID):
    return GridPath(grid, np.array(vals, dtype=float)[:, None])


def test_grid_rejects_bad_horizon_and_steps():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_grid_times_end_exactly_at_horizon():
    g = TimeGrid(0.3, 7)
    assert g.times[-1] == 0.3 and g.time(7) == 0.3
    assert np.allclose(np.diff(g.times), g.dt)


def test_call_past_anchor_holds_the_last_value():
    x = path_of([0.0, 1.0, 2.0])
    assert x(10)[0] == 2.0


def test_vertical_jump_shows_up_in_nodes_only_at_the_anchor():
    x = vertical_perturbation(path_of([0.0, 1.0]), [0.5])
    assert x.regularity == CADLAG
    assert x.values[-1, 0] == 1.0 and x.nodes[-1, 0] == 1.5


def test_sup_norm_counts_both_the_left_limit_and_the_jumped_value():
    x = vertical_perturbation(path_of([0.0, 3.0]), [-3.0])
    assert sup_norm(x) == 3.0


def test_d0_between_a_path_and_its_horizontal_extension_is_the_time_gap():
    x = path_of([0.0, 1.0])
    y = horizontal_extension(x, 2)
    assert math.isclose(d0(x, y), math.sqrt(2 * GRID.dt))


def test_d0_rejects_different_grids():
    with pytest.raises(GridMismatch):
        d0(path_of([0.0]), path_of([0.0], TimeGrid(2.0, 4)))


@given(values, values)
def test_d0_is_symmetric(a, b):
    x, y = path_of(a), path_of(b)
    assert d0(x, y) == d0(y, x)


@given(values, values, values)
def test_d0_triangle_inequality(a, b, c):
    x, y, z = path_of(a), path_of(b), path_of(c)
    assert d0(x, z) <= d0(x, y) + d0(y, z) + 1e-12


@given(values)
def test_d0_vanishes_on_the_diagonal(a):
    x = path_of(a)
    assert d0(x, x) == 0.0


def test_extension_past_horizon_fails():
    with pytest.raises(GridMismatch):
        horizontal_extension(path_of([0.0, 0.0, 0.0]), 3)


def test_lattice_has_the_predicted_size_and_stays_in_class():
    spec = PathClassSpec(1.5, path_of([0.2]), 3)
    members = enumerate_class_lattice(spec, 3)
    assert len(members) == lattice_size(spec, 3) == 27
    assert all(class_contains(spec, x) for x in members)


def test_lattice_in_two_dimensions_respects_the_euclidean_ball():
    base = GridPath(GRID, np.zeros((1, 2)))
    spec = PathClassSpec(1.0, base, 2)
    for x in enumerate_class_lattice(spec, 3):
        assert np.all(np.linalg.norm(np.diff(x.values, axis=0), axis=1) <= GRID.dt + 1e-15)


def test_lattice_cap_raises():
    with pytest.raises(CapExceeded):
        enumerate_class_lattice(PathClassSpec(1.0, path_of([0.0]), 4), 5, cap=100)


def test_even_levels_rejected():
    with pytest.raises(ValueError):
        enumerate_class_lattice(PathClassSpec(1.0, path_of([0.0]), 2), 2)


def test_class_contains_rejects_fast_paths():
    spec = PathClassSpec(1.0, path_of([0.0]), 1)
    assert not class_contains(spec, path_of([0.0, 1.0]))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.3, 2.0), st.floats(0.05, 1.0), st.integers(1, 3))
def test_epsilon_net_cells_partition_the_lattice_with_small_diameter(k, delta, steps):
    spec = PathClassSpec(k, path_of([0.0]), steps)
    net = build_epsilon_net(spec, delta, 3)
    members = enumerate_class_lattice(spec, 3)
    cells = net_cells(net, members)
    assert sum(len(c) for c in cells) == len(members)
    for c in cells:
        for a in c:
            for b in c:
                assert sup_distance(a, b) < delta


def test_net_round_trips_through_json():
    spec = PathClassSpec(1.0, path_of([0.0]), 2)
    net = build_epsilon_net(spec, 0.2, 3)
    back = NetPartition.from_json(net.to_json())
    assert len(back.centers) == len(net.centers)
    assert all(np.array_equal(a.nodes, b.nodes) for a, b in zip(back.centers, net.centers))


def test_csv_round_trip_keeps_jump_and_values():
    x = vertical_perturbation(path_of([0.1, -0.7, 1.0 / 3.0]), [0.25])
    y = path_from_csv(path_to_csv(x))
    assert np.array_equal(x.values, y.values) and np.array_equal(x.terminal_jump, y.terminal_jump)


def test_constant_path_is_constant():
    x = constant_path(GRID, [1.0, 2.0], 3)
    assert x.nodes.shape == (4, 2) and np.all(x.nodes == [1.0, 2.0])
