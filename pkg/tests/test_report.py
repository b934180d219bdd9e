import json

import numpy as np
import pytest

from pathhjb.report import Series, emit_convergence_data, fitted_order


def test_single_point_series_writes_one_row(tmp_path):
    files = emit_convergence_data([Series("one", [0.5], [2.0])], tmp_path)
    lines = (tmp_path / "one.dat").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == "5.000000000000e-01 2.000000000000e+00"
    assert {f.name for f in files} == {"one.dat", "plots.gp", "plots_manifest.json"}


def test_manifest_lists_series_sorted_by_name(tmp_path):
    emit_convergence_data([Series("b", [1, 2], [3, 4]), Series("a", [1], [1], "h", "err", logscale=True)], tmp_path, render_png=False)
    man = json.loads((tmp_path / "plots_manifest.json").read_text())
    assert [m["name"] for m in man] == ["a", "b"]
    assert man[1]["rows"] == 2 and man[0]["xlabel"] == "h"
    gp = (tmp_path / "plots.gp").read_text()
    assert "plot 'a.dat'" in gp and "set logscale xy" in gp


def test_output_is_byte_identical_across_runs(tmp_path):
    series = [Series("conv", [0.1, 0.05, 0.025], [1e-2, 2.6e-3, 6.4e-4], logscale=True)]
    pytest.importorskip("matplotlib")
    emit_convergence_data(series, tmp_path / "a", render_png=True)
    emit_convergence_data(series, tmp_path / "b", render_png=True)
    for name in ("conv.dat", "plots.gp", "plots_manifest.json", "conv.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_series_are_rejected(tmp_path):
    with pytest.raises(ValueError):
        Series("x", [1, 2], [1])
    with pytest.raises(ValueError):
        Series("a/b", [1], [1])
    with pytest.raises(ValueError):
        emit_convergence_data([], tmp_path)
    with pytest.raises(ValueError):
        emit_convergence_data([Series("d", [1], [1]), Series("d", [2], [2])], tmp_path, render_png=False)


def test_fitted_order_recovers_a_power_law():
    h = np.array([0.4, 0.2, 0.1, 0.05])
    assert fitted_order(h, 3 * h**1.5) == pytest.approx(1.5)
