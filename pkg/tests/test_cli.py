from __future__ import annotations

import json
import subprocess
import sys

import pytest

from nmgst import cli


def write_config(path, **extra):
    cfg = {"schema": 1, "seed": 3, "scenario": {"label": "0121", "menu": "J_ibm"}, **extra}
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "cfg.json", mle={"max_inner": 100, "max_rounds": 2})


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_writes_records(cfg, tmp_path):
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    lines = (tmp_path / "a" / "records.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["seed"] == 3
    assert len(lines) == 1 + (1 + 9 + 81)


def test_sampled_simulation_is_reproducible(tmp_path):
    c = write_config(tmp_path / "c.json", data={"n_shots": 500})
    for d in ("x", "y"):
        assert run("simulate", "--config", c, "--out", tmp_path / d) == 0
    assert (tmp_path / "x" / "records.jsonl").read_bytes() == (tmp_path / "y" / "records.jsonl").read_bytes()
    assert run("simulate", "--config", c, "--seed", 9, "--out", tmp_path / "z") == 0
    assert (tmp_path / "z" / "records.jsonl").read_bytes() != (tmp_path / "x" / "records.jsonl").read_bytes()


def test_design(cfg, tmp_path):
    assert run("design", "--config", cfg, "--out", tmp_path) == 0
    blob = json.loads((tmp_path / "design.json").read_text())
    assert blob["circuits"]


def test_tomograph_and_certify(cfg, tmp_path):
    run("simulate", "--config", cfg, "--out", tmp_path)
    rec = tmp_path / "records.jsonl"
    assert run("tomograph", "--config", cfg, "--method", "mle-ist", "--records", rec, "--out", tmp_path / "m") == 0
    res = json.loads((tmp_path / "m" / "result.json").read_text())
    assert res["sep_records"] <= 1e-8 and res["n_records"] == 91
    assert (tmp_path / "m" / "trace.csv").exists()
    assert run("certify", "--input", tmp_path / "m" / "result.json", "--out", tmp_path / "m") == 0
    assert json.loads((tmp_path / "m" / "certify.json").read_text())["all_pass"]


def test_list_on_design_records(tmp_path, capsys):
    c = write_config(tmp_path / "c.json", circuits="design")
    run("simulate", "--config", c, "--out", tmp_path)
    assert run("tomograph", "--config", c, "--method", "list", "--records", tmp_path / "records.jsonl",
               "--out", tmp_path) == 0
    assert json.loads((tmp_path / "result.json").read_text())["sep_records"] <= 1e-16


def test_list_reports_missing_circuits(cfg, tmp_path, capsys):
    run("simulate", "--config", cfg, "--out", tmp_path)
    rec = tmp_path / "records.jsonl"
    lines = rec.read_text().splitlines()
    rec.write_text("\n".join(lines[:1] + lines[5:]) + "\n")
    assert run("tomograph", "--config", cfg, "--method", "list", "--records", rec, "--out", tmp_path) == 2
    assert "missing:" in capsys.readouterr().err


def test_records_path_from_config_is_relative(tmp_path):
    c = write_config(tmp_path / "c.json", records="data/records.jsonl")
    run("simulate", "--config", c, "--out", tmp_path / "data")
    assert run("tomograph", "--config", c, "--method", "ptt", "--out", tmp_path) == 0


def test_certify_flags_unphysical_input(tmp_path):
    bad = {"instruments": [{"A0": [[1.0, 0, 0, 0], [0, 2.0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]}]}
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert run("certify", "--input", tmp_path / "bad.json", "--out", tmp_path) == 3


def test_benchmark_and_report(tmp_path):
    bench = {"labels": ["000"], "methods": ["list", "ptt"], "regimes": ["perfect"], "d_env": 1}
    c = write_config(tmp_path / "c.json", benchmark=bench)
    assert run("benchmark", "--config", c, "--out", tmp_path / "b1") == 0
    assert run("benchmark", "--config", c, "--out", tmp_path / "b2") == 0
    for name in ("sep.csv", "summary.json", "sep_perfect.svg"):
        assert (tmp_path / "b1" / name).read_bytes() == (tmp_path / "b2" / name).read_bytes()
    assert run("report", "--input", tmp_path / "b1" / "sep.csv", "--out", tmp_path / "r") == 0
    assert "| 000 | perfect |" in (tmp_path / "r" / "report.md").read_text()


@pytest.mark.parametrize("argv", [
    ["simulate", "--bogus"],
    ["tomograph", "--config", "x.json", "--method", "magic"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("simulate", "--config", tmp_path / "none.json") == 2
    (tmp_path / "v.json").write_text('{"schema": 2}')
    assert run("simulate", "--config", tmp_path / "v.json") == 2
    (tmp_path / "j.json").write_text('{"schema": 1,')
    assert run("simulate", "--config", tmp_path / "j.json") == 2
    c = write_config(tmp_path / "c.json")
    assert run("tomograph", "--config", c, "--method", "ptt") == 2
    assert "error" in capsys.readouterr().err


def test_console_script(tmp_path):
    c = write_config(tmp_path / "c.json")
    out = subprocess.run([sys.executable, "-m", "nmgst.cli", "design", "--config", c, "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "design.json").exists()
