"""Artifact writing: manifests, delimited outputs, and long-form plot data.

All CSV files use RFC-4180 quoting, '.' decimal separator, and LF line
endings; float cells use shortest round-trip repr so re-runs with the same
seed are byte-identical.  Wall-clock timestamps appear only in the manifest.
"""

from __future__ import annotations

import csv
import datetime
import json
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ConvergenceReport
from .config import RunConfig, config_hash, serialize_config
from .flory import FloryTrajectory
from .simulator import SimTrajectory
from .states import measure_csv_header, measure_to_rows


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        for row in rows:
            writer.writerow([cell if isinstance(cell, str) else fmt(cell) for cell in row])
    return path


def write_json(path: Path, payload: dict) -> Path:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_manifest(out_dir: Path, cfg: RunConfig, threads: int) -> Path:
    """Written before any computation; the only artifact carrying a timestamp."""
    payload = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "threads": threads,
        "config_sha256": config_hash(cfg),
        "version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (out_dir / "config.ini").write_text(serialize_config(cfg))
    return write_json(out_dir / "manifest.json", payload)


# ---------------------------------------------------------------------------
# Long-form plot data (series, x, y).
# ---------------------------------------------------------------------------

def emit_plot_data(obj) -> tuple[list[str], list[list]]:
    """Tidy long-form rows for any external plotting tool; byte-stable."""
    header = ["series", "x", "y"]
    rows: list[list] = []
    if isinstance(obj, FloryTrajectory):
        for name, series in (("m0", obj.m0), ("m1", obj.m1), ("m2", obj.m2),
                             ("gel_mass", obj.gel_mass)):
            for t, v in zip(obj.times, series):
                rows.append([name, float(t), float(v)])
    elif isinstance(obj, ConvergenceReport):
        for row in obj.rows:
            rows.append([f"err@{row.time:g}", row.n, row.median])
    elif isinstance(obj, SimTrajectory):
        for name, values in obj.traces.items():
            for t, v in zip(obj.snapshot_times, values):
                rows.append([name, float(t), float(v)])
    else:
        raise TypeError(f"no plot-data emitter for {type(obj).__name__}")
    return header, rows


def write_plot_data(path: Path, obj) -> Path:
    header, rows = emit_plot_data(obj)
    return write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# Mode-specific artifact writers.
# ---------------------------------------------------------------------------

def write_snapshots_csv(path: Path, traj: SimTrajectory, integer_mass: bool) -> Path:
    dim = max((len(m.support[0].attributes) for m in traj.snapshots
               if m is not None and len(m.support)), default=0)
    rows: list[list[str]] = []
    for t, mu in zip(traj.snapshot_times, traj.snapshots):
        if mu is None:
            continue
        rows.extend(measure_to_rows(mu, t, integer_mass=integer_mass))
    return write_csv(path, measure_csv_header(dim), rows)


def write_events_csv(path: Path, traj: SimTrajectory, integer_mass: bool) -> Path:
    log = traj.events
    header = ["event_index", "time", "mass_x", "mass_y", "mass_child"]
    header += [f"child_attr_{i}" for i in range(log.dim)]
    rows = []
    for k in range(len(log)):
        def m(v):
            return str(int(v)) if integer_mass else repr(float(v))
        row = [str(log.index[k]), repr(float(log.time[k])), m(log.mass_x[k]),
               m(log.mass_y[k]), m(log.mass_child[k])]
        row += [repr(float(a)) for a in log.child_attrs[k]]
        rows.append(row)
    return write_csv(path, header, rows)


def write_observables_csv(path: Path, traj: SimTrajectory) -> Path:
    names = sorted(traj.traces)
    header = ["time"] + names + ["largest_fraction"]
    rows = []
    for k, t in enumerate(traj.snapshot_times):
        frac = traj.initial_largest_fraction
        if traj.event_times.size:
            idx = np.searchsorted(traj.event_times, t, side="right")
            if idx > 0:
                frac = float(traj.largest_fractions[idx - 1])
        rows.append([t] + [traj.traces[n][k] for n in names] + [frac])
    return write_csv(path, header, rows)


def write_audits_csv(path: Path, traj: SimTrajectory) -> Path:
    names = sorted({name for row in traj.audits for name in row.stats})
    header = ["time", "event_count", "cluster_count", "total_mass",
              "rate_cached", "rate_recomputed"]
    for n in names:
        header += [f"{n}_pair", f"{n}_single_max", f"{n}_flagged"]
    rows = []
    for row in traj.audits:
        out = [row.time, row.event_count, row.cluster_count, row.total_mass,
               "" if row.rate_cached is None else fmt(row.rate_cached),
               "" if row.rate_recomputed is None else fmt(row.rate_recomputed)]
        for n in names:
            st = row.stats.get(n)
            if st is None:
                out += ["", "", ""]
            else:
                single_max = float(np.max(st["singles"])) if len(st["singles"]) else 0.0
                out += [st["pair"], single_max,
                        st["single_increased"] or st["pair_increased"]]
        rows.append(out)
    return write_csv(path, header, rows)


def write_moments_csv(path: Path, traj: FloryTrajectory, flag: str = "") -> Path:
    header = ["time", "m0", "m1", "m2", "gel_mass", "overflow", "g_min", "flag"]
    rows = []
    for k, t in enumerate(traj.times):
        rows.append([t, traj.m0[k], traj.m1[k], traj.m2[k], traj.gel_mass[k],
                     traj.overflow[k], traj.g_min[k], ""])
    if flag:
        last = len(traj.times) - 1
        rows.append([traj.times[last], traj.m0[last], traj.m1[last], traj.m2[last],
                     traj.gel_mass[last], traj.overflow[last], traj.g_min[last], flag])
    return write_csv(path, header, rows)


def write_trajectory_csv(path: Path, traj: FloryTrajectory) -> Path:
    header = ["time", "state_id", "weight"]
    rows = []
    for k, t in enumerate(traj.times):
        w = traj.weights[k]
        for sid in range(traj.grid.size):
            if w[sid] != 0.0:
                rows.append([t, sid, w[sid]])
    return write_csv(path, header, rows)


def write_grid_json(path: Path, grid, include_tables: bool = False) -> Path:
    payload = {
        "size": grid.size,
        "states": [
            {"id": k, "mass": s.mass, "attributes": list(s.attributes), "label": s.label}
            for k, s in enumerate(grid.states)
        ],
    }
    if include_tables:
        payload["kbar_table"] = grid.kbar_table.tolist()
        payload["phi_table"] = grid.phi_table.tolist()
    return write_json(path, payload)


def write_convergence_csv(path: Path, report: ConvergenceReport) -> Path:
    header = ["n", "time", "median", "q25", "q75", "n_replicas"]
    rows = [[row.n, row.time, row.median, row.q25, row.q75, row.n_replicas]
            for row in report.rows]
    return write_csv(path, header, rows)
