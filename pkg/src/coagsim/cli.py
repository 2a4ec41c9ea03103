"""Command-line surface and run orchestration.

``coag <mode> --config <path> [--out <dir>] [--seed <int>] [--threads <n>]``

Exit codes: 0 success, 1 validation error (config or filesystem, before any
computation), 2 numerical abort (partial outputs flushed with a failure
marker), 3 acceptance-check failure in compare mode.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    EnsembleConfig,
    build_test_family,
    deterministic_gel_onset,
    lln_report,
    run_ensemble,
    stochastic_gel_time,
)
from .config import MODES, ConfigError, RunConfig, parse_config, with_overrides
from .flory import SolverAbort, SolverConfig, build_grid, solve
from .kernels import (
    ProductMajorant,
    classify_quantity,
    eventually_conservative_check,
    integer_mass_sampler,
    majorant_value,
)
from .reports import (
    write_audits_csv,
    write_convergence_csv,
    write_csv,
    write_events_csv,
    write_grid_json,
    write_json,
    write_manifest,
    write_moments_csv,
    write_observables_csv,
    write_plot_data,
    write_snapshots_csv,
    write_trajectory_csv,
)
from .simulator import (
    AuditPlan,
    SnapshotPlan,
    StopRules,
    derive_rng,
    init_counts,
    init_iid,
    run,
)

from .states import ClusterState

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_CHECK = 3


def _build_system(cfg: RunConfig, N: int, rng, kernel=None):
    kernel = kernel if kernel is not None else cfg.kernel()
    selection = cfg.get("run", "selection", "exact")
    majorant = None
    if selection == "rejection":
        majorant = cfg.majorant()
        if not isinstance(majorant, ProductMajorant):
            raise ConfigError("rejection selection needs a product majorant "
                              "(set [kernel] majorant or use selection = exact)")
    if cfg.init_is_deterministic():
        return init_counts(cfg.initial_counts(N), N, kernel, rng,
                           integer_mode=cfg.integer_mass, selection=selection,
                           majorant=majorant)
    return init_iid(cfg.initial_measure(), N, rng, kernel,
                    integer_mode=cfg.integer_mass, selection=selection,
                    majorant=majorant)


def _grid_u0(cfg: RunConfig, M: int, kernel, phi):
    grid = build_grid(M, kernel, phi)
    u0 = np.zeros(grid.size)
    mu = cfg.initial_measure()
    for state, w in zip(mu.support, mu.weights):
        m = state.mass
        if abs(m - round(m)) > 1e-9 or not 1 <= round(m) <= M:
            raise ConfigError(f"initial mass {m} is not an integer within the grid 1..{M}")
        u0[int(round(m)) - 1] += float(w)
    return grid, u0


def _snapshot_default(cfg: RunConfig, horizon: float) -> tuple[float, ...]:
    times = cfg.get_floats("run", "snapshot_times")
    if times:
        return times
    return (0.0,) if horizon == 0 else (0.0, horizon)


def _figures_enabled(cfg: RunConfig) -> bool:
    return cfg.get_bool("output", "figures", True)


# ---------------------------------------------------------------------------
# Mode handlers.
# ---------------------------------------------------------------------------

def _run_simulate(cfg: RunConfig, out: Path, threads: int) -> int:
    kernel = cfg.kernel()
    N = cfg.get_int("run", "n")
    horizon = cfg.get_float("run", "t")
    times = _snapshot_default(cfg, horizon)
    observables = build_test_family("counting")
    plan = SnapshotPlan(times=times, observables=observables, record_full_measure=True)
    stop = StopRules(max_events=cfg.get_int("run", "max_events"),
                     mass_fraction=cfg.get_float("run", "stop_mass_fraction"))
    audit = None
    if cfg.get_bool("run", "audit", False):
        phi = cfg.quantity()
        probes = cfg.initial_measure().support[:3]
        audit = AuditPlan(quantities=(("phi", phi),), probes=tuple(probes))
    system = _build_system(cfg, N, derive_rng(cfg.seed))
    traj = run(system, horizon, plan=plan, stop=stop, audit=audit)

    write_snapshots_csv(out / "snapshots.csv", traj, cfg.integer_mass)
    if cfg.get_bool("output", "write_events", True):
        write_events_csv(out / "events.csv", traj, cfg.integer_mass)
    write_observables_csv(out / "observables.csv", traj)
    if audit is not None:
        write_audits_csv(out / "audits.csv", traj)
    write_plot_data(out / "plotdata.csv", traj)
    write_json(out / "summary.json", {
        "n_events": len(traj.events),
        "stop_reason": traj.stop_reason,
        "absorbed": traj.absorbed,
        "final_clock": traj.final.clock,
        "final_clusters": traj.final.n,
    })
    if _figures_enabled(cfg):
        from .plots import save_observables_figure
        save_observables_figure(traj.snapshot_times, traj.traces, out / "observables.png")
    return EXIT_OK


def _run_solve(cfg: RunConfig, out: Path, threads: int) -> int:
    kernel = cfg.kernel()
    phi = cfg.quantity()
    M = cfg.get_int("run", "m")
    grid, u0 = _grid_u0(cfg, M, kernel, phi)
    record = cfg.get_floats("run", "snapshot_times") or None
    config = SolverConfig(dt=cfg.get_float("run", "dt"), t_end=cfg.get_float("run", "t"),
                          method=cfg.get("run", "method", "rk4_fixed"),
                          record_times=record)
    write_grid_json(out / "grid.json", grid,
                    include_tables=cfg.get_bool("output", "grid_tables", False))
    try:
        traj = solve(u0, grid, config)
    except SolverAbort as exc:
        if exc.partial is not None:
            write_moments_csv(out / "moments.csv", exc.partial, flag=f"abort:{exc.reason}")
            write_trajectory_csv(out / "trajectory.csv", exc.partial)
        write_json(out / "summary.json", {"aborted": True, "reason": exc.reason,
                                          "time": exc.time})
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    write_moments_csv(out / "moments.csv", traj)
    if cfg.get_bool("output", "write_snapshots", True):
        write_trajectory_csv(out / "trajectory.csv", traj)
    write_plot_data(out / "plotdata.csv", traj)
    onset = deterministic_gel_onset(traj, cfg.get_float("run", "m2_threshold", 1e3))
    write_json(out / "summary.json", {
        "aborted": False,
        "gel_onset": onset,
        "gel_mass_final": float(traj.gel_mass[-1]),
        "overflow_final": float(traj.overflow[-1]),
        "g_min": float(traj.g_min.min()),
        "clamped_steps": traj.clamped_steps,
    })
    if _figures_enabled(cfg):
        from .plots import save_moments_figure
        save_moments_figure(traj, out / "moments.png")
    return EXIT_OK


def _run_compare(cfg: RunConfig, out: Path, threads: int) -> int:
    kernel = cfg.kernel()
    phi = cfg.quantity()
    horizon = cfg.get_float("run", "t")
    times = _snapshot_default(cfg, horizon)
    times = tuple(t for t in times if t > 0) or (horizon,)
    M = cfg.get_int("run", "m")
    grid, u0 = _grid_u0(cfg, M, kernel, phi)
    config = SolverConfig(dt=cfg.get_float("run", "dt"), t_end=horizon, record_times=times)
    try:
        ftraj = solve(u0, grid, config)
    except SolverAbort as exc:
        write_json(out / "summary.json", {"aborted": True, "reason": exc.reason})
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    mu = cfg.initial_measure()
    fam = build_test_family(cfg.get("run", "test_family", "default"),
                            dim=len(mu.support[0].attributes))
    counts = None
    measure = None
    if cfg.init_is_deterministic():
        pairs = cfg.initial_counts(1)
        total = sum(c for _, c in pairs)
        counts = tuple((s, c / total) for s, c in pairs)
    else:
        measure = mu
    ecfg = EnsembleConfig(kernel=kernel, init_counts_per_n=counts, init_measure=measure,
                          n_values=cfg.get_ints("run", "n_values"),
                          replicas=cfg.get_int("run", "replicas"),
                          base_seed=cfg.seed, horizon=horizon, snapshot_times=times,
                          integer_mode=cfg.integer_mass, threads=threads)
    results = run_ensemble(ecfg)
    report = lln_report(results, ftraj, fam)
    write_convergence_csv(out / "convergence.csv", report)
    write_plot_data(out / "plotdata.csv", report)

    err_tol = cfg.get_float("run", "err_tol", 0.02)
    slope_min = cfg.get_float("run", "slope_min", -0.8)
    slope_max = cfg.get_float("run", "slope_max", -0.2)
    finals = report.medians_at_final()
    ns = sorted(finals)
    criteria = {}
    if ns:
        criteria["error_at_largest_n"] = finals[ns[-1]] <= err_tol
        criteria["error_decreases"] = finals[ns[0]] > finals[ns[-1]]
    if len(ns) >= 3 and report.slope is not None:
        criteria["slope_in_range"] = slope_min <= report.slope <= slope_max
    passed = bool(criteria) and all(criteria.values())
    errors = {f"{n}_{r}": rep.error for (n, r), rep in results.replicas.items()
              if rep.error is not None}
    write_json(out / "summary.json", {
        "slope": report.slope,
        "final_medians": {str(n): finals[n] for n in ns},
        "tolerances": {"err_tol": err_tol, "slope_min": slope_min, "slope_max": slope_max},
        "criteria": criteria,
        "pass": passed,
        "test_family": list(report.family),
        "replica_errors": errors,
    })
    if _figures_enabled(cfg):
        from .plots import save_convergence_figure
        save_convergence_figure(report, out / "convergence.png")
    return EXIT_OK if passed else EXIT_CHECK


def _run_check_kernel(cfg: RunConfig, out: Path, threads: int) -> int:
    kernel = cfg.kernel()
    phi = cfg.quantity()
    mmax = cfg.get_int("run", "check_masses", 10)
    n_samples = cfg.get_int("run", "classify_samples", 10_000)
    tol = cfg.get_float("run", "classify_tol", 0.0 if cfg.integer_mass else 1e-9)
    rng = derive_rng(cfg.seed, 1)
    sampler = integer_mass_sampler(mmax)
    report = classify_quantity(phi, kernel, sampler, n_samples, tol, rng)

    mu0 = cfg.initial_measure()
    grid_states = [ClusterState(mass=m) for m in range(1, mmax + 1)]
    ec = eventually_conservative_check(kernel, phi, mu0, grid_states,
                                       R=cfg.get_float("run", "r", 3.0),
                                       c_bound=cfg.get_float("run", "c_bound", 1.0))

    majorant = cfg.majorant()
    maj_section = {"name": None, "checked": 0, "violations": 0}
    if majorant is not None:
        viol = 0
        pairs = 2000
        for _ in range(pairs):
            x, y = sampler(rng), sampler(rng)
            if kernel.kbar(x, y) > majorant_value(majorant, x, y) * (1 + 1e-12):
                viol += 1
        maj_section = {"name": majorant.name, "checked": pairs, "violations": viol}

    def simplify(ces):
        return [{"x_mass": c.x.mass, "y_mass": c.y.mass, "q_mass": c.q.mass,
                 "z_mass": c.z.mass, "delta": c.delta} for c in ces]

    write_json(out / "classification.json", {
        **report.summary(),
        "counterexamples": {
            "eq_first": simplify(report.eq_first_violations),
            "sub_first": simplify(report.sub_first_violations),
            "eq_second": simplify(report.eq_second_violations),
            "sub_second": simplify(report.sub_second_violations),
        },
        "majorant": maj_section,
    })
    write_json(out / "eventually_conservative.json", {
        **ec.summary(),
        "bound_violations": [
            {"x_mass": ec.grid[i].mass, "y_mass": ec.grid[j].mass, "kbar": kb, "phi": ph}
            for i, j, kb, ph in ec.bound_violations],
        "outside_violations": [
            {"x_mass": ec.grid[i].mass, "y_mass": ec.grid[j].mass, "kbar": kb, "phi": ph}
            for i, j, kb, ph in ec.outside_violations],
    })
    write_csv(out / "d_values.csv", ["state_id", "mass", "d_value", "inside"],
              [[k, s.mass, float(ec.d_values[k]), bool(ec.inside[k])]
               for k, s in enumerate(ec.grid)])
    return EXIT_OK


def _run_gel_time(cfg: RunConfig, out: Path, threads: int) -> int:
    N = cfg.get_int("run", "n")
    horizon = cfg.get_float("run", "t")
    eps = cfg.get_float("run", "eps")
    replicas = cfg.get_int("run", "replicas", 20)
    stop = StopRules(max_events=cfg.get_int("run", "max_events"), mass_fraction=eps)
    kernel = cfg.kernel()
    rows = []
    gel_times = []
    for rep in range(replicas):
        system = _build_system(cfg, N, derive_rng(cfg.seed, N, rep), kernel=kernel)
        traj = run(system, horizon, stop=stop)
        g = stochastic_gel_time(traj, eps)
        gel_times.append(g)
        rows.append([rep, "" if g is None else repr(float(g)), len(traj.events),
                     traj.stop_reason])
    write_csv(out / "geltimes.csv", ["replica", "gel_time", "n_events", "stop_reason"], rows)
    finite = [g for g in gel_times if g is not None]
    write_json(out / "summary.json", {
        "eps": eps, "n": N, "replicas": replicas,
        "n_gelled": len(finite),
        "median_gel_time": float(np.median(finite)) if finite else None,
    })
    if _figures_enabled(cfg):
        from .plots import save_geltimes_figure
        save_geltimes_figure(gel_times, out / "geltimes.png")
    return EXIT_OK


def _run_ensemble(cfg: RunConfig, out: Path, threads: int) -> int:
    kernel = cfg.kernel()
    horizon = cfg.get_float("run", "t")
    times = _snapshot_default(cfg, horizon)
    mu = cfg.initial_measure()
    fam = build_test_family("counting")
    counts = None
    measure = None
    if cfg.init_is_deterministic():
        pairs = cfg.initial_counts(1)
        total = sum(c for _, c in pairs)
        counts = tuple((s, c / total) for s, c in pairs)
    else:
        measure = mu
    ecfg = EnsembleConfig(kernel=kernel, init_counts_per_n=counts, init_measure=measure,
                          n_values=cfg.get_ints("run", "n_values"),
                          replicas=cfg.get_int("run", "replicas"),
                          base_seed=cfg.seed, horizon=horizon, snapshot_times=times,
                          observables=fam, integer_mode=cfg.integer_mass,
                          record_full=False, threads=threads)
    results = run_ensemble(ecfg)
    rows = []
    long_rows = []
    for (n, rep), r in results.replicas.items():
        for name in sorted(r.traces):
            for t, v in zip(r.snapshot_times, r.traces[name]):
                rows.append([n, rep, t, name, v])
                long_rows.append((n, rep, t, name, v))
    write_csv(out / "traces.csv", ["n", "replica", "time", "observable", "value"], rows)
    errors = {f"{n}_{r}": rep.error for (n, r), rep in results.replicas.items()
              if rep.error is not None}
    write_json(out / "summary.json", {
        "n_values": list(ecfg.n_values), "replicas": ecfg.replicas,
        "replica_errors": errors,
    })
    if _figures_enabled(cfg):
        from .plots import save_ensemble_figure
        save_ensemble_figure(long_rows, out / "traces.png")
    return EXIT_OK


_HANDLERS = {
    "simulate": _run_simulate,
    "solve": _run_solve,
    "compare": _run_compare,
    "check-kernel": _run_check_kernel,
    "gel-time": _run_gel_time,
    "ensemble": _run_ensemble,
}


def execute(cfg: RunConfig, out_dir: Path, threads: int = 1) -> int:
    """Write the manifest, then run the mode handler; returns the exit code."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(out_dir, cfg, threads)
    except OSError as exc:
        print(f"cannot write to output directory {out_dir}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _HANDLERS[cfg.mode](cfg, out_dir, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _resolve_threads(args_threads: int | None, cfg: RunConfig) -> int:
    if args_threads is not None:
        return args_threads
    cfg_threads = cfg.get_int("run", "threads")
    if cfg_threads is not None:
        return cfg_threads
    env = os.environ.get("COAG_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="coag",
        description="Cluster coagulation simulator, limit-equation solver, and "
                    "verification harness.")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (fallback: COAG_THREADS)")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text, args.mode)
        cfg = with_overrides(cfg, seed=args.seed, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    threads = _resolve_threads(args.threads, cfg)
    out_dir = Path(args.out if args.out is not None else cfg.get("output", "dir", "out"))
    return execute(cfg, out_dir, threads)


if __name__ == "__main__":
    sys.exit(main())
