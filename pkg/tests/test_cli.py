import csv
import json
from pathlib import Path

import pytest

from pathhjb.cli import EXIT_FAILED, EXIT_OK, EXIT_SCHEMA, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _run(task, config, out, *extra):
    return main([task, "--config", str(config), "--out", str(out), *extra])


def test_validate_echoes_the_bound(tmp_path, capsys):
    assert _run("validate", CONFIGS / "validate_driftable_abs.json", tmp_path) == EXIT_OK
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["L"] == 1.0 and line["passed"]
    assert (tmp_path / "validation.json").exists() and (tmp_path / "report.json").exists()


def test_dpp_task_passes(tmp_path):
    assert _run("dpp", CONFIGS / "dpp_random_cylinder.json", tmp_path) == EXIT_OK
    rows = list(csv.reader((tmp_path / "dpp_residuals.csv").open()))
    assert len(rows) > 1


def test_malformed_config_exits_before_writing(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"task": "value", "scenario": {"grid": {"T": -1, "N": 4}}}))
    out = tmp_path / "out"
    assert _run("value", bad, out) == EXIT_SCHEMA
    assert not out.exists()
    bad.write_text("{not json")
    assert _run("value", bad, out) == EXIT_SCHEMA
    assert not out.exists()


def test_task_mismatch_is_a_schema_error(tmp_path):
    assert _run("dpp", CONFIGS / "value_driftable_abs.json", tmp_path / "o") == EXIT_SCHEMA


def test_failed_flag_gives_exit_one(tmp_path):
    cfg = json.loads((CONFIGS / "demo_shift.json").read_text())
    cfg["params"]["tol"] = -1.0  # no difference can beat a negative tolerance
    path = tmp_path / "shift.json"
    path.write_text(json.dumps(cfg))
    assert _run("demo_shift", path, tmp_path / "o") == EXIT_FAILED


def test_reruns_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert _run("value", CONFIGS / "value_driftable_abs.json", tmp_path / name, "--seed", "4") == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "report.json")
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    # the report differs only in the wall time
    ra, rb = (json.loads((tmp_path / n / "report.json").read_text()) for n in "ab")
    ra.pop("wall_time"), rb.pop("wall_time")
    ra["files"] = [Path(f).name for f in ra["files"]]
    rb["files"] = [Path(f).name for f in rb["files"]]
    assert ra == rb


def test_sweep_writes_one_row_per_setting(tmp_path):
    assert _run("sandwich", CONFIGS / "sandwich_driftable_abs.json", tmp_path, "--sweep", "eps,delta") == EXIT_OK
    rows = list(csv.reader((tmp_path / "sandwich.csv").open()))
    assert len(rows) == 4
    assert [float(r[1]) for r in rows[1:]] == [0.2, 0.1, 0.05]
    assert (tmp_path / "sandwich_gap.dat").exists() and (tmp_path / "plots_manifest.json").exists()


def test_bad_sweep_name_is_a_schema_error(tmp_path):
    assert _run("sandwich", CONFIGS / "sandwich_driftable_abs.json", tmp_path / "o", "--sweep", "gamma") == EXIT_SCHEMA
    assert not (tmp_path / "o").exists()


def test_check_task_runs_selected_criteria(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path), "--criteria", "1,6"]) == EXIT_OK
    text = (tmp_path / "acceptance.txt").read_text().splitlines()
    assert len(text) == 2 and all("PASS" in t for t in text)


@pytest.mark.parametrize("name", ["probe_random_cylinder", "demo_habit", "demo_shift"])
def test_shipped_configs_pass(tmp_path, name):
    task = json.loads((CONFIGS / f"{name}.json").read_text())["task"]
    assert _run(task, CONFIGS / f"{name}.json", tmp_path) == EXIT_OK
