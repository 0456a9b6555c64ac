import csv
import hashlib
import json

import numpy as np
import pytest

from sismap import io as sio
from sismap.cli import run
from sismap.epimodel import OutbreakPanel
from sismap.errors import DataIOError, InvalidInputError
from sismap.spatial import SpatialUnits

import oracles

# sha256 of the panel written by `simulate --seed 42 --n-units 30 --T 20`
GOLDEN_PANEL = "fbecc938cce75e0de0622b4088e93c6429982065523f321f4631d5962a8ffc01"
GOLDEN_BETA = "16d346a27631a9fcb9c7da391873b38578144200b1998dd49ac8b4571b379df5"


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_panel_roundtrip(tmp_path):
    y = (np.random.default_rng(0).random((4, 7)) < 0.4).astype(int)
    panel = OutbreakPanel(y, ["a", "b", "c", "d"])
    sio.write_panel(tmp_path / "p.csv", panel)
    back = sio.read_panel(tmp_path / "p.csv")
    assert back.ids == panel.ids and np.array_equal(back.y, y)
    sio.write_panel(tmp_path / "p.csv.gz", panel)
    assert np.array_equal(sio.read_panel(tmp_path / "p.csv.gz").y, y)


def test_panel_reorders_to_locations(tmp_path):
    units = SpatialUnits(["b", "a"], [[0, 0], [1, 1]])
    sio.write_panel(tmp_path / "p.csv", OutbreakPanel(np.array([[1, 0], [0, 1]]), ["a", "b"]))
    back = sio.read_panel(tmp_path / "p.csv", units)
    assert back.ids == ("b", "a") and back.y.tolist() == [[0, 1], [1, 0]]


@pytest.mark.parametrize("body", [
    "id,t,y\na,1,2\n",          # not binary
    "id,t,y\na,1,0\na,1,1\n",   # duplicate
    "id,t,y\na,1,0\na,3,1\n",   # gap in time
    "id,x,y\na,1,0\n",          # wrong header
])
def test_panel_rejects_malformed(tmp_path, body):
    (tmp_path / "p.csv").write_text(body)
    with pytest.raises(InvalidInputError):
        sio.read_panel(tmp_path / "p.csv")


def test_missing_file_carries_path(tmp_path):
    with pytest.raises(DataIOError) as exc:
        sio.read_locations(tmp_path / "nope.csv")
    assert exc.value.filename == tmp_path / "nope.csv"


def test_simulate_golden(tmp_path):
    assert run(["simulate", "--seed", "42", "--n-units", "30", "--T", "20", "--out", str(tmp_path)]) == 0
    assert sha(tmp_path / "panel.csv") == GOLDEN_PANEL
    assert sha(tmp_path / "beta_true.csv") == GOLDEN_BETA
    assert sio.validate_csv(tmp_path / "panel.csv", "panel") == 30 * 20
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["outputs"]["panel.csv"] == GOLDEN_PANEL
    assert man["command"] == "simulate" and man["config"]["seed"] == 42


def test_fit_ism_single_unit_matches_quadrature(tmp_path):
    rng = np.random.default_rng(1)
    T = 2000
    y = np.zeros((1, T), int)
    y[0, 0] = 1
    for t in range(1, T):
        y[0, t] = rng.random() < -np.expm1(-(0.8 * y[0, t - 1] + 0.1))
    (tmp_path / "loc.csv").write_text("id,x,y\nonly,0.0,0.0\n")
    sio.write_panel(tmp_path / "panel.csv", OutbreakPanel(y, ["only"]))
    sio.write_json(tmp_path / "s1.json", {"gamma": 0.1, "phi": 10.0, "b0": 3.0})
    code = run(["fit", "--model", "ism", "--locations", str(tmp_path / "loc.csv"),
                "--panel", str(tmp_path / "panel.csv"), "--step1", str(tmp_path / "s1.json"),
                "--n-iter", "40000", "--burn-in", "5000", "--thin", "5", "--seed", "3",
                "--out", str(tmp_path / "fit")])
    assert code == 0
    with open(tmp_path / "fit" / "posterior_summary.csv") as fh:
        row = next(csv.DictReader(fh))
    _, _, mean, (lo, hi) = oracles.ism_quadrature(y, np.zeros((1, 1)), 10.0, 3.0, 0.1)
    assert float(row["beta_mean"]) == pytest.approx(mean, rel=0.02)
    assert float(row["beta_q025"]) == pytest.approx(lo, rel=0.05)
    assert float(row["beta_q975"]) == pytest.approx(hi, rel=0.05)
    assert sio.validate_csv(tmp_path / "fit" / "hyper_summary.csv", "hyper_summary") >= 1


def test_missing_input_exit_code(tmp_path, capsys):
    code = run(["estimate-background", "--locations", str(tmp_path / "missing.csv"),
                "--panel", str(tmp_path / "p.csv"), "--out", str(tmp_path)])
    assert code == 3
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["path"] == str(tmp_path / "missing.csv")
    assert json.loads((tmp_path / "error.json").read_text())["exit_code"] == 3


def test_invalid_parameter_exit_code(tmp_path):
    assert run(["simulate", "--seed", "1", "--n-units", "10", "--T", "5", "--out", str(tmp_path / "s")]) == 0
    s = tmp_path / "s"
    code = run(["fit", "--model", "ism", "--locations", str(s / "locations.csv"),
                "--panel", str(s / "panel.csv"), "--n-iter", "-5", "--out", str(tmp_path / "f")])
    assert code == 2


def test_help_and_version(capsys):
    with pytest.raises(SystemExit):
        run(["fit", "--help"])
    assert "exit codes" in capsys.readouterr().out.lower()
    with pytest.raises(SystemExit):
        run(["--version"])
    assert "sismap" in capsys.readouterr().out


def test_config_file_and_cli_precedence(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[common]\nseed = 42\n[simulate]\nn_units = 30\nT = 20\n")
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert sha(tmp_path / "a" / "panel.csv") == GOLDEN_PANEL
    assert run(["simulate", "--config", str(cfg), "--T", "21", "--out", str(tmp_path / "b")]) == 0
    assert sio.validate_csv(tmp_path / "b" / "panel.csv", "panel") == 30 * 21


def test_manifest_replay_and_tamper_detection(tmp_path):
    assert run(["simulate", "--seed", "7", "--n-units", "25", "--T", "15", "--out", str(tmp_path / "s")]) == 0
    s = tmp_path / "s"
    args = ["fit", "--model", "ism", "--locations", str(s / "locations.csv"), "--panel", str(s / "panel.csv"),
            "--n-iter", "600", "--burn-in", "200", "--seed", "5"]
    assert run(["estimate-background", *args[3:7], "--out", str(tmp_path / "e")]) == 0
    args += ["--step1", str(tmp_path / "e" / "step1.json")]
    assert run([*args, "--out", str(tmp_path / "f1")]) == 0
    assert run(["fit", "--from-manifest", str(tmp_path / "f1" / "manifest.json"), "--out", str(tmp_path / "f2")]) == 0
    for name in ("posterior_summary.csv", "hyper_summary.csv"):
        assert sha(tmp_path / "f1" / name) == sha(tmp_path / "f2" / name)
    rep = json.loads((tmp_path / "e" / "step1.json").read_text())
    rep["phi"] *= 2
    (tmp_path / "e" / "step1.json").write_text(json.dumps(rep))
    assert run([*args, "--out", str(tmp_path / "f3")]) == 2


def test_every_output_matches_its_schema(tmp_path):
    assert run(["simulate", "--seed", "3", "--n-units", "40", "--T", "30", "--out", str(tmp_path / "s")]) == 0
    s = tmp_path / "s"
    code = run(["pipeline", "--locations", str(s / "locations.csv"), "--panel", str(s / "panel.csv"),
                "--beta-true", str(s / "beta_true.csv"), "--n-iter", "600", "--burn-in", "200",
                "--n-perms", "99", "--seed", "1", "--out", str(tmp_path / "p")])
    assert code == 0
    p = tmp_path / "p"
    for name, schema in [("posterior_summary.csv", "posterior_summary"), ("hyper_summary.csv", "hyper_summary"),
                         ("correlogram.csv", "correlogram"), ("losses.csv", "losses"),
                         ("phi_residuals.csv", "phi_residuals")]:
        assert sio.validate_csv(p / name, schema) > 0
    verdict = json.loads((p / "verdict.json").read_text())
    assert verdict["model"] in ("ism", "sdsm")
    man = json.loads((p / "manifest.json").read_text())
    assert set(man["outputs"]) >= {"step1.json", "verdict.json", "posterior_summary.csv", "evaluation.csv"}


@pytest.mark.slow
@pytest.mark.parametrize("field, expected", [("gp", "sdsm"), ("independent", "ism")])
def test_pipeline_picks_generating_model(tmp_path, field, expected):
    extra = ["--rho", "600", "--omega", "-1.5"] if field == "gp" else ["--alpha", "0.37"]
    assert run(["simulate", "--seed", "5", "--n-units", "150", "--T", "200", "--phi", "10", "--gamma", "0.1",
                "--field", field, *extra, "--out", str(tmp_path / "s")]) == 0
    s = tmp_path / "s"
    code = run(["pipeline", "--locations", str(s / "locations.csv"), "--panel", str(s / "panel.csv"),
                "--n-iter", "3000", "--burn-in", "1500", "--thin", "5", "--seed", "1",
                "--out", str(tmp_path / "p")])
    assert code == 0
    assert json.loads((tmp_path / "p" / "verdict.json").read_text())["model"] == expected


def test_fit_with_automatic_rank(tmp_path):
    assert run(["simulate", "--seed", "2", "--n-units", "60", "--T", "30", "--out", str(tmp_path / "s")]) == 0
    s = tmp_path / "s"
    sio.write_json(tmp_path / "s1.json", {"gamma": 0.1, "phi": 10.0, "b0": 3.0})
    code = run(["fit", "--model", "sdsm-picar", "--rank", "auto", "--locations", str(s / "locations.csv"),
                "--panel", str(s / "panel.csv"), "--step1", str(tmp_path / "s1.json"),
                "--n-iter", "300", "--burn-in", "100", "--seed", "1", "--out", str(tmp_path / "f")])
    assert code == 0
    man = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert man["decisions"]["rank"] in (25, 50, 100)
    assert set(man["decisions"]["rank_scores"]) <= {"25", "50", "100"}
    with pytest.raises(SystemExit):
        run(["fit", "--rank", "seven"])
