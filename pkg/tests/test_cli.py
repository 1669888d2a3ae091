import csv

import numpy as np
import pytest

from thermodamage.cli import main

EQUILIBRIUM = """\
seed = 1

[mesh]
n = 4
dirichlet = ["left"]

[time]
T = 1.0
steps = 6

[initial]
z = 1.0
theta = 1.0

[output]
vtk = false
"""

LOADED = """\
seed = 3

[mesh]
n = 6
dirichlet = ["left"]

[time]
T = 1.0
steps = 8

[material]
expansion = 1.0

[loads.traction]
kind = "ramp"
rate = 0.6
direction = [1.0, 0.0]
sides = ["right"]

[output]
vtk = true
every = 4
"""

SWEEP = """\
seed = 11

[mesh]
n = 3
dirichlet = ["left", "right", "bottom", "top"]

[time]
T = 1.0
steps = 4

[material]
expansion = 0.5

[loads.volume_force]
kind = "ramp"
rate = 2.0
direction = [1.0, 0.5]

[rescaling]
eps = [1.0, 0.5, 0.25, 0.125]
beta = 2.0

[semistability]
samples = 5
every = 2

[output]
vtk = false
"""


def _cfg(tmp_path, text, name="case.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _verify_lines(capsys):
    out = capsys.readouterr().out
    return {line.split()[0]: line.split()[1] for line in out.splitlines() if line.split()[-1] in ("PASS", "FAIL")
            and len(line.split()) == 2}, out


def test_run_equilibrium(tmp_path, capsys):
    out = tmp_path / "eq"
    assert main(["run", _cfg(tmp_path, EQUILIBRIUM), "--output", str(out)]) == 0
    assert "all certifications PASS" in capsys.readouterr().out
    for name in ("ledger.csv", "run.json", "trajectory.npz"):
        assert (out / name).exists()
    with open(out / "ledger.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7
    assert max(abs(float(r["mech_residual"])) for r in rows) <= 1e-12


def test_verify_unmodified_run(tmp_path, capsys):
    out = tmp_path / "ld"
    assert main(["run", _cfg(tmp_path, LOADED), "--output", str(out), "--strict"]) == 0
    assert sorted(p.name for p in out.glob("*.vtk")) == ["step_00000.vtk", "step_00004.vtk", "step_00008.vtk"]
    capsys.readouterr()
    assert main(["verify", str(out)]) == 0
    flags, _ = _verify_lines(capsys)
    assert set(flags.values()) == {"PASS"}
    assert len(flags) == 5
    assert (out / "verify_ledger.csv").read_bytes() != b""


def test_verify_detects_healing(tmp_path, capsys):
    out = tmp_path / "eq"
    assert main(["run", _cfg(tmp_path, EQUILIBRIUM), "--output", str(out)]) == 0
    path = out / "trajectory.npz"
    with np.load(path) as d:
        data = {k: d[k] for k in d.files}
    data["z"][3, 7] = 0.9  # damage, then heal back to 1 at step 4
    np.savez_compressed(path, **data)
    capsys.readouterr()
    assert main(["verify", str(out)]) == 1
    flags, text = _verify_lines(capsys)
    assert flags["unidirectional"] == "FAIL"
    assert "step 4: unidirectional FAIL" in text


def test_verify_missing_directory(tmp_path, capsys):
    assert main(["verify", str(tmp_path / "none")]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("text", [EQUILIBRIUM + "\n[solver]\ngama = 5.0\n", EQUILIBRIUM.replace("T = 1.0", "T = -1.0"),
                                  "[time\n"])
def test_bad_config_exit_two(tmp_path, capsys, text):
    assert main(["run", _cfg(tmp_path, text)]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2


def test_strict_certification_failure(tmp_path, capsys):
    # W = 5 z makes the undamaged initial state unstable against any drop
    text = EQUILIBRIUM.replace("[output]", "[material]\nw1 = 5.0\n\n[output]").replace("steps = 6", "steps = 1")
    cfg = _cfg(tmp_path, text)
    assert main(["run", cfg, "--output", str(tmp_path / "a")]) == 0
    assert "semistable" in capsys.readouterr().out
    assert main(["run", cfg, "--output", str(tmp_path / "b"), "--strict"]) == 1


def test_seed_override(tmp_path):
    cfg = _cfg(tmp_path, EQUILIBRIUM)
    assert main(["run", cfg, "--output", str(tmp_path / "s"), "--seed", "42"]) == 0
    assert '"seed": 42' in (tmp_path / "s" / "run.json").read_text()


def test_sweep_eps(tmp_path, capsys):
    out = tmp_path / "sw"
    assert main(["sweep-eps", _cfg(tmp_path, SWEEP), "--output", str(out)]) == 0
    with open(out / "sweep_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert [float(r["eps"]) for r in rows] == [1.0, 0.5, 0.25, 0.125]
    assert "slope_grad_theta" in rows[0]
    assert len({r["slope_grad_theta"] for r in rows}) == 1
    for e in ("1", "0.5", "0.25", "0.125"):
        assert (out / f"eps_{e}" / "ledger.csv").exists()
        assert (out / f"eps_{e}" / "diagnostics.csv").exists()
    capsys.readouterr()
    assert main(["verify", str(out / "eps_0.125")]) == 0


def test_sweep_eps_parallel_matches_serial(tmp_path):
    cfg = _cfg(tmp_path, SWEEP)
    assert main(["sweep-eps", cfg, "--output", str(tmp_path / "a")]) == 0
    assert main(["sweep-eps", cfg, "--output", str(tmp_path / "b"), "--threads", "2"]) == 0
    for e in ("1", "0.125"):
        a = (tmp_path / "a" / f"eps_{e}" / "ledger.csv").read_bytes()
        assert a == (tmp_path / "b" / f"eps_{e}" / "ledger.csv").read_bytes()


@pytest.mark.parametrize("threads", ["1", "4"])
def test_ledger_bytes_independent_of_threads(tmp_path, monkeypatch, threads):
    from thermodamage import assembly

    monkeypatch.setattr(assembly, "_CHUNK", 16)  # force several chunks on a small mesh
    cfg = _cfg(tmp_path, LOADED.replace("vtk = true", "vtk = false"))
    assert main(["run", cfg, "--output", str(tmp_path / "ref"), "--threads", "1"]) == 0
    assert main(["run", cfg, "--output", str(tmp_path / "t"), "--threads", threads]) == 0
    assert (tmp_path / "ref" / "ledger.csv").read_bytes() == (tmp_path / "t" / "ledger.csv").read_bytes()


def test_threads_from_environment(tmp_path, monkeypatch):
    from thermodamage import assembly

    monkeypatch.setenv("THERMODAMAGE_THREADS", "3")
    assert main(["run", _cfg(tmp_path, EQUILIBRIUM), "--output", str(tmp_path / "e")]) == 0
    assert assembly.get_num_threads() == 3
    assembly.set_num_threads(1)
