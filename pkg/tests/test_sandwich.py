import csv

import numpy as np
import pytest

from pathhjb.approximation import ApproxParams, build_cylinder_approximation
from pathhjb.control import ValueFunction
from pathhjb.hjb import solve_markovian_hjb
from pathhjb.noise import GAUSSIAN, QUANTIZED, NoiseModel
from pathhjb.paths import TimeGrid
from pathhjb.sandwich import (
    GapStudy,
    TreeMismatch,
    build_sandwich,
    check_sandwich,
    running_sup_norms,
    supersolution_margin,
)
from pathhjb.scenario import make_scenario


def _abs_scenario():
    return make_scenario("driftable_abs", T=1.0, N=4, controls=(-1.0, 0.0, 1.0))


def _sandwich(s, eps=0.2, delta=0.2, cells=None, width=None):
    p = ApproxParams(eps, 1.0, delta, n_cells=cells, mollifier_width=width)
    cyl = build_cylinder_approximation(s, p)
    return build_sandwich(solve_markovian_hjb(cyl, p), s, p)


@pytest.fixture(scope="module")
def abs_sandwich():
    return _sandwich(_abs_scenario())


def test_running_sup_norms_match_path_enumeration():
    nm = NoiseModel(QUANTIZED, 1, TimeGrid(1.0, 4))
    got = running_sup_norms(nm, 3)
    for j, pre in enumerate(nm.prefixes(3)):
        steps = [(-1.0 if b == 0 else 1.0) * 0.5 for b in pre]
        partial = np.abs(np.concatenate([[0.0], np.cumsum(steps)]))
        assert got[j] == pytest.approx(partial.max())


def test_envelope_is_nonnegative_everywhere(abs_sandwich):
    sw = abs_sandwich
    for i in range(5):
        for pw in sw.s.noise.prefixes(i):
            for pb in sw.aux.prefixes(i):
                assert sw.envelope(i, pw, pb) >= 0


def test_upper_dominates_lower(abs_sandwich):
    sw = abs_sandwich
    x = sw.s.initial
    assert sw.upper(0, (), (), x) >= sw.lower(0, (), (), x)
    lo, hi = sw.bounds(0, (), (), x)
    assert hi - lo == pytest.approx(2 * sw.envelope(0, (), ()))


def test_exact_coefficients_leave_only_the_viscous_term():
    s = make_scenario("random_cylinder", T=1.0, N=2, controls=(-1.0, 1.0), m=1, params={"seed": 1})
    sw = _sandwich(s, eps=0.1, delta=0.1, cells=2, width=0.0)
    assert all(np.all(y == 0) for y in sw.Y.Y)
    root = sw.envelope(0, (), ())
    assert root == pytest.approx(0.1 * sw.C2 * sw.y.root())
    assert sw.C2 == pytest.approx(4 * s.coeffs.lipschitz * (sw.C1 + 1))


def test_bounds_hold_on_the_class_lattice(abs_sandwich):
    chk = check_sandwich(abs_sandwich, ValueFunction(abs_sandwich.s), k=1.0, levels=3)
    assert chk.passed and chk.max_violation < 0
    assert chk.points > 0 and chk.max_gap >= chk.max_upper_gap


def test_upper_envelope_is_a_discrete_supersolution_up_to_dt_squared(abs_sandwich):
    dt = abs_sandwich.s.grid.dt
    assert supersolution_margin(abs_sandwich, 1.0, 3, steps=range(0, 3), side="upper") >= -(dt**2)
    assert supersolution_margin(abs_sandwich, 1.0, 3, steps=range(0, 3), side="lower") >= -(dt**2)


def test_gaussian_noise_is_rejected():
    s = make_scenario("driftable_abs", N=4, controls=(-1.0, 1.0), m=1, mode=GAUSSIAN, mc_samples=10)
    p = ApproxParams(0.2, 1.0, 0.2)
    fld = solve_markovian_hjb(build_cylinder_approximation(_abs_scenario(), p), p)
    with pytest.raises(TreeMismatch):
        build_sandwich(fld, s, p)


def test_auxiliary_walk_must_match_the_state(abs_sandwich):
    s = abs_sandwich.s
    with pytest.raises(TreeMismatch):
        build_sandwich(abs_sandwich.field, s, abs_sandwich.p, aux=NoiseModel(QUANTIZED, 2, s.grid))
    with pytest.raises(TreeMismatch):
        build_sandwich(abs_sandwich.field, s, abs_sandwich.p, aux=NoiseModel(QUANTIZED, 1, TimeGrid(1.0, 2)))


def test_gap_study_summaries_and_csv(tmp_path):
    st = GapStudy(rows=[(0.2, 0.2, 1.0, 0.8, 2.5, -0.1), (0.1, 0.1, 0.6, 0.5, 3.0, -0.2)], k=1.0)
    assert st.gaps == [1.0, 0.6] and st.decreasing and st.all_valid
    assert st.band == pytest.approx(1.2)
    path = st.to_csv(tmp_path / "gap.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0][0] == "setting" and len(rows) == 3
    assert float(rows[2][4]) == 0.5
    bad = GapStudy(rows=[(0.2, 0.2, 1.0, 1.0, 0.0, 1e-3)])
    assert not bad.all_valid and bad.band == float("inf")
