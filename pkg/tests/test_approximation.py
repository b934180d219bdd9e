import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathhjb.approximation import (
    ApproxParams,
    build_cylinder_approximation,
    bump_rule,
    estimate_approx_error,
    held_source,
    partition_indices,
    project_path,
)
from pathhjb.paths import GridPath, PathBatch, PathClassSpec, TimeGrid, enumerate_class_lattice
from pathhjb.scenario import make_scenario


def _bump_moment(g):
    # E g(Z) for density proportional to exp(-1/(1-z^2)) on (-1, 1), by fine trapezoid quadrature
    z = np.linspace(-1, 1, 200_001)[1:-1]
    rho = np.exp(-1.0 / (1.0 - z**2))
    return np.trapezoid(g(z) * rho, z) / np.trapezoid(rho, z)


def test_project_path_none_is_identity():
    x = GridPath(TimeGrid(1.0, 4), np.arange(5.0))
    assert project_path(x, None) is x


def test_project_path_holds_values_at_dyadic_times():
    x = GridPath(TimeGrid(1.0, 4), np.linspace(0, 1, 5))
    y = project_path(x, 1)
    assert np.allclose(y.nodes[:, 0], [0.0, 0.0, 0.5, 0.5, 1.0])
    assert np.allclose(project_path(x, 2).nodes[:, 0], x.nodes[:, 0])


def test_partition_is_uniform_and_capped_by_the_grid():
    assert partition_indices(8, 4).tolist() == [0, 2, 4, 6, 8]
    assert partition_indices(3, 10).tolist() == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        partition_indices(4, 0)


def test_held_source_reads_last_partition_time_and_current_node():
    assert held_source(np.array([0, 2, 4]), 3).tolist() == [0, 0, 2, 3]
    assert held_source(np.array([0, 1, 2, 3]), 3).tolist() == [0, 1, 2, 3]


def test_bump_rule_is_a_symmetric_probability():
    z, w = bump_rule(16)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(z, -z[::-1]) and np.allclose(w, w[::-1])
    # smooth moments converge quickly with the rule size, the kinked |z| only slowly
    cos3 = lambda t: np.cos(3 * t)
    assert float(z**2 @ w) == pytest.approx(_bump_moment(np.square), rel=1e-4)
    assert float(cos3(z) @ w) == pytest.approx(_bump_moment(cos3), rel=1e-4)
    assert float(np.abs(z) @ w) == pytest.approx(_bump_moment(np.abs), rel=1e-2)
    z, w = bump_rule(64)
    assert float(z**2 @ w) == pytest.approx(_bump_moment(np.square), rel=1e-8)
    assert float(cos3(z) @ w) == pytest.approx(_bump_moment(cos3), rel=1e-8)


def test_params_reject_bad_knobs():
    for kw in ({"target_eps": 0, "k": 1, "delta": 0.5}, {"target_eps": 1, "k": 1, "delta": 1.0}, {"target_eps": 1, "k": 0, "delta": 0.5}):
        with pytest.raises(ValueError):
            ApproxParams(**kw)
    with pytest.raises(ValueError):
        ApproxParams(1, 1, 0.5, mollifier_width=-1)


@pytest.mark.parametrize("name", ["random_cylinder", "running_max", "habit"])
def test_zero_width_full_partition_returns_the_original_coefficients(name):
    s = make_scenario(name, N=4, controls=(-1.0, 0.0, 1.0), m=1, initial=(0.3,))
    cyl = build_cylinder_approximation(s, ApproxParams(0.1, 1.0, 0.5, n_cells=4, mollifier_width=0.0))
    assert cyl.identity
    rep = estimate_approx_error(s, cyl, 1.0, levels=3)
    assert rep.max_errors() == {"f": 0.0, "beta": 0.0, "G": 0.0}
    assert rep.combined == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(-2, 2))
def test_mollified_abs_error_is_bounded_by_width(width, x0):
    s = make_scenario("driftable_abs", N=2, initial=(x0,))
    cyl = build_cylinder_approximation(s, ApproxParams(0.1, 1.0, 0.5, mollifier_width=width))
    x = GridPath(s.grid, [[x0], [x0], [x0]])
    w = s.noise.path((0, 0))
    assert abs(cyl.G(x, w) - abs(x0)) <= width * (1 + 1e-12)


def test_mollified_abs_error_at_the_kink_matches_the_bump_moment():
    s = make_scenario("driftable_abs", N=4, controls=(-1.0, 0.0, 1.0))
    moment = _bump_moment(np.abs)
    errs = []
    for width in (0.2, 0.1, 0.05):
        cyl = build_cylinder_approximation(s, ApproxParams(0.1, 1.0, 0.5, mollifier_width=width))
        errs.append(estimate_approx_error(s, cyl, 1.0).max_errors()["G"])
        assert errs[-1] == pytest.approx(width * moment, rel=1e-2)
    # the error is linear in the width
    assert errs[0] == pytest.approx(2 * errs[1], rel=1e-12) and errs[1] == pytest.approx(2 * errs[2], rel=1e-12)


def test_errors_shrink_as_the_width_and_cells_refine():
    s = make_scenario("random_cylinder", N=4, controls=(-1.0, 1.0), m=1, initial=(0.2,))
    combined = []
    for width, cells in ((0.4, 1), (0.2, 2), (0.1, 4)):
        cyl = build_cylinder_approximation(s, ApproxParams(0.1, 1.0, 0.5, n_cells=cells, mollifier_width=width))
        combined.append(estimate_approx_error(s, cyl, 1.0).combined)
    assert combined[0] > combined[1] > combined[2]


def test_a_larger_class_gives_no_smaller_errors():
    # the 5-level lattice of 2k contains the 3-level lattice of k
    s = make_scenario("random_cylinder", N=3, controls=(-1.0, 1.0), m=1, initial=(0.2,))
    cyl = build_cylinder_approximation(s, ApproxParams(0.1, 1.0, 0.5, n_cells=1, mollifier_width=0.2))
    small = estimate_approx_error(s, cyl, 1.0, levels=3)
    big = estimate_approx_error(s, cyl, 2.0, levels=5)
    for a, b in zip(small.f_err + small.beta_err + [small.G_err], big.f_err + big.beta_err + [big.G_err]):
        assert np.all(b >= a)


def test_approximants_only_read_partition_samples_and_the_current_value():
    s = make_scenario("random_cylinder", N=4, controls=(-1.0, 1.0), m=1, initial=(0.0,))
    cyl = build_cylinder_approximation(s, ApproxParams(0.1, 1.0, 0.5, n_cells=2, mollifier_width=0.1))
    w = s.noise.path((0, 1, 1))
    a = GridPath(s.grid, [[0.0], [0.2], [0.3], [0.1]])
    b = GridPath(s.grid, [[0.0], [-0.2], [0.3], [0.1]])  # differs only at node 1, which is not a partition time
    for v in s.controls:
        assert cyl.f(3, a, w, v) == cyl.f(3, b, w, v)
        assert np.array_equal(cyl.beta(3, a, w, v), cyl.beta(3, b, w, v))


def test_batch_evaluation_matches_single_paths():
    s = make_scenario("random_cylinder", N=3, controls=(-1.0, 1.0), m=1, initial=(0.1,))
    cyl = build_cylinder_approximation(s, ApproxParams(0.1, 1.0, 0.5, n_cells=2, mollifier_width=0.1))
    members = enumerate_class_lattice(PathClassSpec(1.0, s.initial, 2), 3)
    batch = PathBatch.stack(members)
    w = s.noise.path((1, 0))
    fb = np.asarray(cyl.f(2, batch, w, s.controls[0]))
    for n, x in enumerate(members):
        assert fb[n] == pytest.approx(cyl.f(2, x, w, s.controls[0]), abs=1e-14)
