import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from gpmpcc import gp
from gpmpcc.cli import main
from gpmpcc.config import load_config
from gpmpcc.experiment import atomic_write_text, export_tables, load_log, replay
from gpmpcc.track import rounded_polygon
from gpmpcc.vehicle import IVX, IVY, IOMEGA, TireParams, VehicleParams, integrate_step

DATA = Path(__file__).resolve().parent.parent / "data"

CONTROLLER = """
[controller]
N = 40
dt = 0.1
dT_max = 1000.0
ddelta_max = 0.04
Ru = 0.0001, 1000.0, 0.001
"""

DEGENERATE = """
[plant]
tire_peak_scale = 1.0
stiffness_scale = 1.0
load_transfer = 0.0
combined_slip = 0.0
tau_T = 0.0
tau_delta = 0.0
substep = 0.1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    pts = rounded_polygon([(0, 0, 20), (150, 0, 20), (150, 80, 20), (0, 80, 20)])
    (root / "loop.csv").write_text("x,y\n" + "\n".join(f"{float(x)!r},{float(y)!r}" for x, y in pts) + "\n")
    head = f"[paths]\ntrack = loop.csv\nvehicle = {DATA / 'vehicle.params'}\n" + CONTROLLER
    (root / "degenerate.ini").write_text(head + DEGENERATE + "[protocol]\nlaps = 1\nspeed_limit = 20\n")
    (root / "mismatch.ini").write_text(head + "[plant]\nsubstep = 0.02\n[protocol]\nlaps = 2\nspeed_limit = 20\n")
    return root


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def mismatch_runs(workspace):
    outs = []
    for name in ("a", "b"):
        out = workspace / f"run_{name}"
        assert run("run", "--config", workspace / "mismatch.ini", "--seed", 3, "--out", out, "--quiet") == 0
        outs.append(out)
    return outs


def test_degenerate_single_lap(workspace, capsys):
    out = workspace / "degenerate_out"
    assert run("run", "--config", workspace / "degenerate.ini", "--out", out) == 0
    assert "lap  1" in capsys.readouterr().out
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert float(rows[0]["e_vy_nom_mean"]) <= 1e-6 and float(rows[0]["e_omega_nom_mean"]) <= 1e-6
    assert rows[0]["e_vy_gp_mean"] == ""
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 0 and summary["laps"][0]["completed"] is True


def test_same_seed_is_byte_identical(mismatch_runs):
    a, b = mismatch_runs
    names = ["summary.csv", "summary.json", "logs/lap_01.csv", "logs/lap_02.csv",
             "datasets/lap_01.csv", "datasets/lap_02.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # the stored configs differ only in where they were written
    strip = lambda p: [ln for ln in p.read_text().splitlines() if not ln.startswith("output =")]
    assert strip(a / "config.ini") == strip(b / "config.ini")
    assert not any(p.name.endswith(".tmp") for p in a.rglob("*"))


def test_learned_lap_reports_gp_column(mismatch_runs):
    summary = json.loads((mismatch_runs[0] / "summary.json").read_text())
    first, second = summary["laps"]
    assert first["e_vy_gp_mean"] is None and second["e_vy_gp_mean"] is not None
    assert "lap_time_reduction" in summary


def test_replay_matches_reported_stats(workspace, mismatch_runs, tmp_path):
    out = mismatch_runs[0]
    table_path = tmp_path / "table.json"
    # lap 2 drove with the GP fitted to the dictionary that lap 1 left behind
    assert run("replay", out / "logs/lap_02.csv", "--config", workspace / "mismatch.ini",
               "--dataset", out / "datasets/lap_01.csv", "--out", table_path, "--quiet") == 0
    table = json.loads(table_path.read_text())
    lap2 = json.loads((out / "summary.json").read_text())["laps"][1]
    for key in ("e_vy_nom_mean", "e_vy_nom_std", "e_vy_gp_mean", "e_vy_gp_std", "e_omega_gp_mean"):
        assert table[key] == lap2[key], key


def test_replay_without_dataset_omits_gp_columns(workspace, mismatch_runs, capsys):
    assert run("replay", mismatch_runs[0] / "logs/lap_01.csv", "--config", workspace / "mismatch.ini") == 0
    text = capsys.readouterr().out
    assert "e_vy_nom_mean" in text and "e_vy_gp" not in text


def test_replay_single_point_dictionary_closed_form(workspace, mismatch_runs, tmp_path):
    cfg = load_config(workspace / "mismatch.ini")
    hyp = cfg.gp.hyperparams
    log = load_log(mismatch_runs[0] / "logs/lap_01.csv")
    rows = [log.rows[i] for i in (5, 40, 120)]
    small = tmp_path / "three.csv"
    header = list(log.rows[0])
    small.write_text(",".join(header) + "\n" + "\n".join(",".join(
        r["qp_status"] if k == "qp_status" else repr(float(r[k])) for k in header) for r in rows) + "\n")
    z1 = np.array([rows[0]["alpha_f"], rows[0]["alpha_r"], rows[0]["z_T"]]) + [0.004, -0.002, 150.0]
    y1 = np.array([0.01, -0.05, 0.02])
    ds_path = tmp_path / "one.csv"
    gp.save_dataset(gp.GpDataset(z1[None], y1[None]), ds_path)
    table_path = tmp_path / "t.json"
    assert run("replay", small, "--config", workspace / "mismatch.ini", "--dataset", ds_path,
               "--out", table_path, "--quiet") == 0
    table = json.loads(table_path.read_text())

    P, T = VehicleParams(), TireParams()
    ell = np.array(hyp.lengthscales)
    errs_vy, errs_om = [], []
    for r in rows:
        x = np.array([r[k] for k in ("X", "Y", "phi", "vx", "vy", "omega", "T", "delta")])
        nxt = integrate_step(x, [r["dT"], r["ddelta"]], P, T, cfg.controller.dt)
        z = np.array([r["alpha_f"], r["alpha_r"], r["z_T"]])
        prior = hyp.sigma_f2 * np.array(hyp.output_scale) ** 2
        k = math.exp(-0.5 * float(np.sum(((z - z1) / ell) ** 2)))
        g = prior * k / (prior + np.array(hyp.sigma_n2)) * y1
        errs_vy.append(abs(r["vy_next"] - nxt[IVY] - g[1]))
        errs_om.append(abs(r["omega_next"] - nxt[IOMEGA] - g[2]))
    assert table["e_vy_gp_mean"] == pytest.approx(np.mean(errs_vy), abs=1e-12)
    assert table["e_vy_gp_std"] == pytest.approx(np.std(errs_vy), abs=1e-12)
    assert table["e_omega_gp_mean"] == pytest.approx(np.mean(errs_om), abs=1e-12)


def test_export_tables(workspace, mismatch_runs, tmp_path):
    log_path = mismatch_runs[0] / "logs/lap_02.csv"
    out = tmp_path / "plots"
    assert run("export", log_path, "--config", workspace / "mismatch.ini", "--out", out,
               "--boundary-samples", 200, "--quiet") == 0
    log = load_log(log_path)

    def read(name):
        with open(out / name) as fh:
            r = csv.reader(fh)
            return next(r), np.array([[float(v) for v in row] for row in r])

    head, gg = read("gg.csv")
    assert head == ["lap", "a_x", "a_y"] and len(gg) == len(log)
    # a_y in g from the body-frame velocity change
    vx, vy, om = log.column("vx"), log.column("vy"), log.column("omega")
    ay = ((log.column("vy_next") - vy) / 0.1 + vx * om) / 9.81
    np.testing.assert_allclose(gg[:, 2], ay, rtol=1e-12)
    head, vel = read("velocity.csv")
    assert head == ["lap", "theta", "vx", "speed"]
    assert np.all(np.diff(vel[:, 1]) >= 0)
    head, bnd = read("boundary.csv")
    assert len(bnd) == 200
    cfg = load_config(workspace / "mismatch.ini")
    lim = cfg.controller.limits
    P, T = cfg.vehicle()
    m = gp.constraint_margins(*gp.feature_forces(bnd, P, T), bnd[:, 0], bnd[:, 1], T, lim)
    scale = {"ellipse_front": lim.p_ellipse * T.Df, "ellipse_rear": lim.p_ellipse * T.Dr,
             "slip_front": 1.0, "slip_rear": 1.0, "slip_difference": 1.0}
    norm = np.column_stack([m[k] / scale[k] for k in gp.CONSTRAINT_NAMES])
    assert norm.min() >= -1e-6
    assert np.all(np.abs(norm).min(axis=1) <= 1e-6)
    for name in ("xy.csv", "features.csv"):
        assert (out / name).exists()


def test_batch_mode_writes_per_seed_dirs(workspace, tmp_path):
    out = tmp_path / "batch"
    assert run("run", "--config", workspace / "degenerate.ini", "--seeds", "0,1", "--workers", 2,
               "--out", out, "--quiet") == 0
    for s in (0, 1):
        assert json.loads((out / f"seed_{s}" / "summary.json").read_text())["seed"] == s


def test_validate_config_ok(capsys):
    assert run("validate-config", "--config", DATA / "default.ini") == 0
    assert "[controller]" in capsys.readouterr().out


def test_bad_config_exit_code_lists_problems(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[protocol]\nlaps = 0\nspeed_limit = -3\n[gp]\nbudget = 0\n")
    assert run("validate-config", "--config", bad) == 2
    err = capsys.readouterr().err
    assert "laps" in err and "speed_limit" in err and "budget" in err


def test_missing_config_exit_code(tmp_path):
    assert run("run", "--config", tmp_path / "nope.ini") == 2


def test_schema_mismatch_exit_code(tmp_path, capsys):
    log = tmp_path / "log.csv"
    log.write_text("a,b\n1,2\n")
    assert run("replay", log, "--config", DATA / "default.ini") == 2
    assert "missing columns" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["run"], [], ["export", "log.csv"]])
def test_usage_errors_exit_one(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    target = tmp_path / "summary.csv"
    atomic_write_text(target, "old\n")

    class Boom:
        def __str__(self):
            raise RuntimeError("interrupted")

    with pytest.raises(TypeError):
        atomic_write_text(target, Boom())
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["summary.csv"]
