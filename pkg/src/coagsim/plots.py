"""Figure rendering for report outputs. All figures go to PNG files (Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_moments_figure(traj, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(traj.times, traj.m0, label="m0")
    ax1.plot(traj.times, traj.m1, label="m1")
    ax1.plot(traj.times, traj.m2, label="m2")
    ax1.set_yscale("log")
    ax1.set_xlabel("t")
    ax1.set_title("moments")
    ax1.legend(fontsize=8)
    ax2.plot(traj.times, traj.gel_mass, label="gel mass")
    ax2.plot(traj.times, traj.overflow, "--", label="overflow flux (integrated)")
    ax2.set_xlabel("t")
    ax2.set_title("gel accounting")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_convergence_figure(report, path) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    times = sorted({row.time for row in report.rows})
    for t in times:
        pts = sorted((row.n, row.median) for row in report.rows if row.time == t)
        if pts:
            ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"t={t:g}")
    if report.slope is not None:
        ax.set_title(f"median error vs N (slope at T: {report.slope:.2f})")
    else:
        ax.set_title("median error vs N")
    ax.set_xlabel("N")
    ax.set_ylabel("median distance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_observables_figure(times, traces: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for name, values in traces.items():
        ax.plot(times, values, "o-", label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("observable")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_geltimes_figure(gel_times, path) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    finite = sorted(t for t in gel_times if t is not None)
    if finite:
        ecdf = np.arange(1, len(finite) + 1) / len(gel_times)
        ax.step(finite, ecdf, where="post")
    ax.set_xlabel("gel time")
    ax.set_ylabel("empirical cdf")
    ax.set_title(f"{len(finite)}/{len(gel_times)} replicas gelled")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ensemble_figure(rows, path) -> None:
    """rows: iterable of (n, replica, time, observable, value)."""
    by_key: dict[tuple[int, str], dict[float, list[float]]] = {}
    for n, _rep, t, obs, val in rows:
        by_key.setdefault((n, obs), {}).setdefault(t, []).append(val)
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for (n, obs), series in sorted(by_key.items()):
        ts = sorted(series)
        med = [float(np.median(series[t])) for t in ts]
        ax.plot(ts, med, "o-", label=f"N={n} {obs}")
    ax.set_xlabel("t")
    ax.set_ylabel("median observable")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
