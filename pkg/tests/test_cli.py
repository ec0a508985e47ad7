import json
import subprocess
import sys

import numpy as np
import pytest

from qfilter import ito
from qfilter.cli import main
from qfilter.io import parse_expectations, parse_record, parse_table
from qfilter.ito import Basis

DECAY = """
preset = "qubit-decay"
params.gamma = 1.0
detection = "homodyne"
grid.dt = 1e-3
grid.n_steps = 400
n_traj = 40
master_seed = 7
observables = ["sigma_z", "sigma_x"]
output.records = 3
"""

RABI_COUNTING = """
preset = "rabi-decay"
detection = "counting"
grid.dt = 1e-3
grid.n_steps = 300
n_traj = 30
master_seed = 5
output.records = 2
"""

ZERO = """
model.dim = 2
model.H = [0, 0, 0, 0]
model.L = [0, 0, 0, 0]
model.rho0 = [1, 0, 0, 0]
detection = "homodyne"
grid.dt = 1e-3
grid.n_steps = 10
n_traj = 1
master_seed = 1
"""


@pytest.fixture
def write(tmp_path):
    def _write(text, name="scenario.toml"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return _write


def run(*argv):
    return main([str(a) for a in argv])


def test_simulate_outputs(write, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("simulate", "--config", write(DECAY), "--out", out) == 0
    names = sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file())
    assert names == ["expectations.csv", "plot_sigma_x.svg", "plot_sigma_z.svg",
                     "records/record_00000.csv", "records/record_00001.csv",
                     "records/record_00002.csv", "summary.json", "timing.json",
                     "trajectories.csv"]
    text = (out / "expectations.csv").read_text()
    assert text.splitlines()[0] == "t,obs_name,mean,stderr,master"
    table = parse_expectations(text)
    assert len(table["sigma_z"]["t"]) == 401 and len(table["sigma_x"]["t"]) == 401
    assert table["sigma_z"]["mean"][0] == 1.0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_used"] == 40 and summary["diverged_count"] == 0
    assert summary["config"]["preset"] == "qubit-decay"
    assert "wall_seconds" not in (out / "summary.json").read_text()
    assert "trajectories" in capsys.readouterr().out


def test_simulate_is_byte_reproducible(write, tmp_path):
    cfg = write(DECAY)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", "--config", cfg, "--out", a) == 0
    assert run("simulate", "--config", cfg, "--out", b, "--quiet") == 0
    for p in a.rglob("*"):
        if p.is_file() and p.name != "timing.json":
            assert p.read_bytes() == (b / p.relative_to(a)).read_bytes(), p.name


def test_seed_override_changes_records(write, tmp_path):
    cfg = write(DECAY)
    run("simulate", "--config", cfg, "--out", tmp_path / "a", "--quiet")
    run("simulate", "--config", cfg, "--out", tmp_path / "b", "--seed", 8, "--quiet")
    ra = parse_record((tmp_path / "a/records/record_00000.csv").read_text())
    rb = parse_record((tmp_path / "b/records/record_00000.csv").read_text())
    assert ra.master_seed == 7 and rb.master_seed == 8
    assert not np.array_equal(ra.increments, rb.increments)


def test_invalid_config_writes_nothing(write, tmp_path, capsys):
    out = tmp_path / "out"
    code = run("simulate", "--config", write(DECAY.replace("n_traj = 40", "n_traj = 0")),
               "--out", out)
    assert code == 2
    assert not out.exists()
    assert "n_traj" in capsys.readouterr().err


def test_config_errors_are_all_listed(write, capsys):
    code = run("symbolic", "--config", write('preset = "qubit-decay"\n'))
    err = capsys.readouterr().err
    assert code == 2
    for key in ("detection: required", "grid.dt: required", "n_traj: required"):
        assert key in err


def test_out_required(write, capsys):
    assert run("simulate", "--config", write(DECAY)) == 2
    assert "--out is required" in capsys.readouterr().err


@pytest.mark.parametrize("config", [DECAY, RABI_COUNTING])
def test_filter_replay_is_bitwise(config, write, tmp_path):
    cfg = write(config)
    sim = tmp_path / "sim"
    assert run("simulate", "--config", cfg, "--out", sim, "--quiet") == 0
    stored = parse_table((sim / "trajectories.csv").read_text())
    for i in (0, 1):
        out = tmp_path / f"filter{i}"
        rec = sim / f"records/record_{i:05d}.csv"
        assert run("filter", "--config", cfg, "--record", rec, "--out", out, "--quiet") == 0
        replay = parse_table((out / "filter.csv").read_text())
        rows = stored["traj_index"] == i
        obs = [c for c in stored if c not in ("traj_index", "k", "t")]
        for name in obs:
            assert replay[f"{name}_normalized"].tobytes() == stored[name][rows].tobytes()
        if "dy" in rec.read_text():
            assert np.max(replay["trace_distance"]) <= 5e-2
            summary = json.loads((out / "summary.json").read_text())
            assert summary["checks"][0]["status"] == "pass"


def test_filter_truncated_record(write, tmp_path, capsys):
    cfg = write(DECAY)
    sim = tmp_path / "sim"
    run("simulate", "--config", cfg, "--out", sim, "--quiet")
    lines = (sim / "records/record_00000.csv").read_text().splitlines()
    short = tmp_path / "short.csv"
    short.write_text("\n".join(lines[:-100]) + "\n")
    out = tmp_path / "f"
    assert run("filter", "--config", cfg, "--record", short, "--out", out) == 2
    assert "expected 400 steps, found 300" in capsys.readouterr().err
    assert not out.exists()


def test_filter_grid_mismatch(write, tmp_path, capsys):
    sim = tmp_path / "sim"
    run("simulate", "--config", write(DECAY), "--out", sim, "--quiet")
    other = write(DECAY.replace("grid.dt = 1e-3", "grid.dt = 2e-3"), "other.toml")
    code = run("filter", "--config", other, "--record", sim / "records/record_00000.csv",
               "--out", tmp_path / "f")
    assert code == 2
    assert "dt: record 0.001, config 0.002" in capsys.readouterr().err


def test_filter_missing_record(write, tmp_path, capsys):
    code = run("filter", "--config", write(DECAY), "--record", tmp_path / "nope.csv",
               "--out", tmp_path / "f")
    assert code == 2 and "cannot read" in capsys.readouterr().err


def test_symbolic_qubit_decay(write, capsys):
    assert run("symbolic", "--config", write(DECAY)) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "dU = (-0.5 L†L·dt + L·dA† - L†·dA) U"
    assert lines[1] == "d(U†U) = 0"
    # dt coefficient -gamma (I + sigma_z)
    assert lines[2].startswith("d j_t(sigma_z) = j_t[(-I - σ_z)·dt")


def test_symbolic_zero_model(write, capsys):
    assert run("symbolic", "--config", write(ZERO)) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[:2] == ["dU = 0", "d(U†U) = 0"]


@pytest.mark.parametrize("config", [DECAY, RABI_COUNTING, DECAY.replace(
    '"qubit-decay"', '"constant-rate-counting"').replace("params.gamma", "params.lambda")
    .replace("homodyne", "counting")])
def test_symbolic_unitarity_line_for_presets(config, write, capsys):
    assert run("symbolic", "--config", write(config)) == 0
    assert "d(U†U) = 0" in capsys.readouterr().out.splitlines()


def test_check_with_config(write, tmp_path, capsys):
    out = tmp_path / "check"
    assert run("check", "--config", write(DECAY), "--out", out) == 0
    summary = json.loads((out / "summary.json").read_text())
    names = [c["name"] for c in summary["checks"]]
    assert names[:3] == ["ito_table", "unitarity", "lindblad_drift"]
    assert summary["failed"] == 0
    table = capsys.readouterr().out
    assert "check" in table and "PASS" in table


def test_check_notices_an_ito_sign_error(write, tmp_path, monkeypatch, capsys):
    monkeypatch.setitem(ito.ITO_TABLE, (Basis.DA, Basis.DA_DAG), (-1.0, Basis.DT))
    out = tmp_path / "check"
    assert run("check", "--config", write(DECAY), "--out", out) == 1
    summary = json.loads((out / "summary.json").read_text())
    by_name = {c["name"]: c for c in summary["checks"]}
    assert by_name["unitarity"]["status"] == "fail"
    assert "nonzero dt coefficient" in by_name["unitarity"]["detail"]
    assert "nonzero dt coefficient" in capsys.readouterr().out


def test_module_entry_point(write):
    proc = subprocess.run([sys.executable, "-m", "qfilter.cli", "symbolic", "--config",
                           write(ZERO)], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("dU = 0")


def test_divergence_exit_code(write, tmp_path, monkeypatch, capsys):
    from qfilter import cli
    from qfilter.errors import DivergenceError

    def blow_up(*args, **kwargs):
        raise DivergenceError("3 of 40 trajectories diverged")

    monkeypatch.setattr(cli, "simulate_ensemble", blow_up)
    out = tmp_path / "out"
    assert run("simulate", "--config", write(DECAY), "--out", out) == 3
    assert "diverged" in capsys.readouterr().err
    assert not out.exists()
