"""Multi-lap learning experiments, offline replay and plot-data export.

A run drives ``nominal_laps`` laps without a GP (samples are still offered
to the dictionary), then refits the GP between laps for the remaining laps.
Every lap starts from the start line at the configured speed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import gp as gpmod
from .config import ExperimentConfig, dump_config
from .sim import G_ACC, LapMetrics, StepLog, model_error_stats, read_log, run_lap, write_log


class ExperimentError(RuntimeError):
    pass


def atomic_write(path, writer: Callable) -> None:
    """Call ``writer(tmp_path)`` and rename the result into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix="." + path.name + ".", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    def _w(tmp):
        with open(tmp, "w", newline="") as fh:
            fh.write(text)

    atomic_write(path, _w)


def log_text(log: StepLog) -> str:
    buf = io.StringIO()
    write_log(log, buf)
    return buf.getvalue()


def load_log(path) -> StepLog:
    with open(path, newline="") as fh:
        return read_log(fh)


# ---------------------------------------------------------------------------
# run


@dataclass
class ExperimentResult:
    metrics: list = field(default_factory=list)  # LapMetrics per lap
    logs: list = field(default_factory=list)  # StepLog per lap
    datasets: list = field(default_factory=list)  # dictionary after each lap
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and all(m.completed for m in self.metrics)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


SUMMARY_COLUMNS = (
    "lap", "lap_time", "completed", "max_ay_g", "avg_speed", "dict_updates", "dict_size",
    "e_vy_nom_mean", "e_vy_nom_std", "e_vy_gp_mean", "e_vy_gp_std",
    "e_omega_nom_mean", "e_omega_nom_std", "e_omega_gp_mean", "e_omega_gp_std",
    "steps", "held_steps", "slack_free_fraction",
)


def summary_records(metrics) -> list[dict]:
    return [{k: _clean(m.as_record()[k]) for k in SUMMARY_COLUMNS} for m in metrics]


def summary_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for rec in summary_records(metrics):
        w.writerow(["" if v is None else (int(v) if isinstance(v, bool) else repr(v) if isinstance(v, float) else v)
                    for v in rec.values()])
    return buf.getvalue()


def summary_json(metrics, seed: int) -> str:
    recs = summary_records(metrics)
    out = {"seed": seed, "laps": recs}
    t = [r["lap_time"] for r in recs]
    if len(recs) > 1 and all(r["completed"] for r in recs):
        out["lap_time_reduction"] = (t[0] - t[-1]) / t[0]
    return json.dumps(out, indent=2) + "\n"


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   progress: Callable[[LapMetrics], None] | None = None) -> ExperimentResult:
    """Drive the lap protocol; writes logs, dictionary snapshots and summaries when ``out_dir`` is set.

    Stops after the first lap that fails to finish.
    """
    track = cfg.track()
    vehicle, tires = cfg.vehicle()
    plant = cfg.plant.params(vehicle, tires)
    controller = cfg.mpcc
    hyp = cfg.gp.hyperparams
    proto = cfg.protocol
    settings = proto.lap_settings(cfg.gp.gamma_threshold)
    rng = np.random.default_rng(proto.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        atomic_write_text(out / "config.ini", dump_config(cfg))

    result = ExperimentResult()
    dataset = gpmod.GpDataset(budget=cfg.gp.budget)
    model = None
    for lap in range(1, proto.laps + 1):
        if lap > proto.nominal_laps and len(dataset):
            try:
                model = gpmod.fit(dataset, hyp)
            except gpmod.GpFitError as exc:
                result.error = f"GP refit before lap {lap} failed: {exc}"
                break
        metrics, log, dataset = run_lap(controller, plant, track, model, dataset, hyp, settings,
                                        lap=lap, rng=rng, nominal=(vehicle, tires))
        result.metrics.append(metrics)
        result.logs.append(log)
        result.datasets.append(dataset)
        if out is not None:
            atomic_write_text(out / "logs" / f"lap_{lap:02d}.csv", log_text(log))
            atomic_write(out / "datasets" / f"lap_{lap:02d}.csv",
                         lambda tmp, ds=dataset: gpmod.save_dataset(ds, tmp))
            atomic_write_text(out / "summary.csv", summary_csv(result.metrics))
            atomic_write_text(out / "summary.json", summary_json(result.metrics, proto.seed))
        if progress is not None:
            progress(metrics)
        if not metrics.completed:
            result.error = f"lap {lap} did not finish (held {metrics.held_steps} steps, {metrics.steps} steps driven)"
            break
    return result


def _run_seed(args):
    cfg, seed, out = args
    res = run_experiment(cfg.with_overrides(seed=seed), out)
    return seed, res.metrics, res.error


def run_batch(cfg: ExperimentConfig, seeds, out_dir, workers: int = 1) -> dict:
    """Independent runs per seed in ``out_dir/seed_<n>``; returns ``{seed: (metrics, error)}``."""
    jobs = [(cfg, int(s), Path(out_dir) / f"seed_{int(s)}") for s in seeds]
    if workers <= 1:
        done = [_run_seed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_seed, jobs))
    return {seed: (metrics, err) for seed, metrics, err in done}


# ---------------------------------------------------------------------------
# replay


ERROR_COLUMNS = ("e_vy_nom", "e_omega_nom", "e_vy_gp", "e_omega_gp")


def replay(log: StepLog, cfg: ExperimentConfig, dataset: gpmod.GpDataset | None = None) -> dict:
    """Model-error table for a recorded log against an arbitrary dictionary snapshot.

    GP columns are omitted when the dictionary is missing or empty.
    """
    vehicle, tires = cfg.vehicle()
    model = None
    if dataset is not None and len(dataset):
        model = gpmod.fit(dataset, cfg.gp.hyperparams)
    stats = model_error_stats(log, model, vehicle, tires, cfg.controller.dt)
    table = {}
    for name in ERROR_COLUMNS:
        v = getattr(stats, name)
        if v is not None:
            table[name + "_mean"], table[name + "_std"] = v
    return table


# ---------------------------------------------------------------------------
# export


def accelerations(log: StepLog, dt: float) -> np.ndarray:
    """Body-frame ``(a_x, a_y)`` in g from each step's velocity change."""
    vx, vy, om = log.column("vx"), log.column("vy"), log.column("omega")
    nxt = log.next_velocities()
    ax = (nxt[:, 0] - vx) / dt - vy * om
    ay = (nxt[:, 1] - vy) / dt + vx * om
    return np.column_stack([ax, ay]) / G_ACC


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) for v in r])
    return buf.getvalue()


def export_tables(log: StepLog, cfg: ExperimentConfig, n_boundary: int = 400) -> dict[str, str]:
    vehicle, tires = cfg.vehicle()
    a = accelerations(log, cfg.controller.dt)
    lap = log.column("lap")
    speed = np.hypot(log.column("vx"), log.column("vy"))
    bnd = gpmod.valid_region_boundary(vehicle, tires, cfg.controller.limits, n=n_boundary, seed=cfg.protocol.seed)
    return {
        "velocity.csv": _table(("lap", "theta", "vx", "speed"),
                               np.column_stack([lap, log.column("theta"), log.column("vx"), speed])),
        "gg.csv": _table(("lap", "a_x", "a_y"), np.column_stack([lap, a])),
        "xy.csv": _table(("lap", "X", "Y", "e_c"),
                         np.column_stack([lap, log.column("X"), log.column("Y"), log.column("e_c")])),
        "features.csv": _table(("alpha_f", "alpha_r", "T", "inserted"),
                               np.column_stack([log.column(c) for c in ("alpha_f", "alpha_r", "z_T", "inserted")])),
        "boundary.csv": _table(("alpha_f", "alpha_r", "T"), bnd),
    }


def export(log: StepLog, cfg: ExperimentConfig, out_dir, n_boundary: int = 400) -> list[Path]:
    out = Path(out_dir)
    paths = []
    for name, text in export_tables(log, cfg, n_boundary).items():
        atomic_write_text(out / name, text)
        paths.append(out / name)
    return paths


def lap_time_reduction(metrics) -> float:
    return (metrics[0].lap_time - metrics[-1].lap_time) / metrics[0].lap_time


def with_degenerate_plant(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same experiment against a plant that is exactly the nominal model."""
    plant = replace(cfg.plant, tire_peak_scale=1.0, stiffness_scale=1.0, drag_scale=1.0, load_transfer=0.0,
                    combined_slip=0.0, tau_T=0.0, tau_delta=0.0, noise_std=(0.0, 0.0, 0.0),
                    substep=cfg.controller.dt)
    return replace(cfg, plant=plant)
