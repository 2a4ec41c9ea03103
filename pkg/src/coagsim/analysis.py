"""Ensemble orchestration and empirical verification reports.

Covers the law-of-large-numbers error measurement (simulated empirical
measures against the deterministic solver trajectory through a fixed family
of bounded test functions), gelation-time estimation on both sides, and the
discrepancy report between the gel-interacting and plain Smoluchowski solves.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from .flory import FloryTrajectory, GridSpec, SolverConfig, smoluchowski_variant, solve
from .kernels import ConservedQuantity, KernelSpec, MajorantSpec
from .simulator import (
    AuditPlan,
    ParticleSystem,
    SimTrajectory,
    SnapshotPlan,
    StopRules,
    derive_rng,
    init_counts,
    init_iid,
    run,
)
from .states import ClusterState, DiscreteMeasure, TestFunction, bl_distance


# ---------------------------------------------------------------------------
# Test-function families (fixed, declared by name, recorded in reports).
# ---------------------------------------------------------------------------

def _const_one(x: ClusterState) -> float:
    return 1.0


def _mass_capped(x: ClusterState, cap: float) -> float:
    return min(x.mass, cap)


def _mass_band(x: ClusterState, lo: float, hi: float, ramp: float) -> float:
    """Smoothed indicator of mass in [lo, hi]: linear ramps of width ``ramp``."""
    m = x.mass
    if m <= lo - ramp or m >= hi + ramp:
        return 0.0
    if m < lo:
        return (m - (lo - ramp)) / ramp
    if m > hi:
        return ((hi + ramp) - m) / ramp
    return 1.0


def _attr_gauss(x: ClusterState) -> float:
    return math.exp(-sum(a * a for a in x.attributes))


def build_test_family(name: str, dim: int = 0) -> tuple[TestFunction, ...]:
    """Named bounded families used by the convergence harness."""
    if name == "counting":
        return (TestFunction("one", _const_one, bound=1.0),)
    if name == "default":
        fams = [
            TestFunction("one", _const_one, bound=1.0),
            TestFunction("mass_cap_2", partial(_mass_capped, cap=2.0), bound=2.0),
            TestFunction("mass_cap_5", partial(_mass_capped, cap=5.0), bound=5.0),
            TestFunction("mass_cap_10", partial(_mass_capped, cap=10.0), bound=10.0),
            TestFunction("band_1_2", partial(_mass_band, lo=1.0, hi=2.0, ramp=1.0),
                         bound=1.0, support_radius=4.0),
            TestFunction("band_2_5", partial(_mass_band, lo=2.0, hi=5.0, ramp=1.0),
                         bound=1.0, support_radius=7.0),
        ]
        if dim > 0:
            fams.append(TestFunction("attr_gauss", _attr_gauss, bound=1.0))
        return tuple(fams)
    raise ValueError(f"unknown test family {name!r}")


# ---------------------------------------------------------------------------
# Ensembles.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleConfig:
    """Replicated simulation layout across a ladder of system sizes."""

    kernel: KernelSpec
    init_counts_per_n: tuple[tuple[ClusterState, float], ...] | None
    init_measure: DiscreteMeasure | None
    n_values: tuple[int, ...]
    replicas: int
    base_seed: int
    horizon: float
    snapshot_times: tuple[float, ...]
    observables: tuple[TestFunction, ...] = ()
    integer_mode: bool = False
    record_full: bool = True
    stop: StopRules | None = None
    selection: str = "exact"
    majorant: MajorantSpec | None = None
    threads: int = 1

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.n_values, self.n_values[1:])):
            raise ValueError("n_values must be strictly increasing")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if (self.init_counts_per_n is None) == (self.init_measure is None):
            raise ValueError("exactly one of init_counts_per_n / init_measure is required")


@dataclass
class ReplicaResult:
    n: int
    replica: int
    snapshot_times: list[float]
    snapshots: list[DiscreteMeasure | None]
    traces: dict[str, list[float]]
    n_events: int
    stop_reason: str
    absorbed: bool
    event_times: np.ndarray
    largest_fractions: np.ndarray
    initial_largest_fraction: float
    error: str | None = None


def build_replica_system(cfg: EnsembleConfig, n: int, replica: int) -> ParticleSystem:
    """Replica system with the deterministic seed split (base_seed, N, replica)."""
    rng = derive_rng(cfg.base_seed, n, replica)
    if cfg.init_measure is not None:
        return init_iid(cfg.init_measure, n, rng, cfg.kernel,
                        integer_mode=cfg.integer_mode, selection=cfg.selection,
                        majorant=cfg.majorant)
    counts = []
    for state, frac in cfg.init_counts_per_n:
        c = int(round(frac * n))
        if c > 0:
            counts.append((state, c))
    return init_counts(counts, n, cfg.kernel, rng,
                       integer_mode=cfg.integer_mode, selection=cfg.selection,
                       majorant=cfg.majorant)


def _run_replica(cfg: EnsembleConfig, n: int, replica: int) -> ReplicaResult:
    try:
        sys = build_replica_system(cfg, n, replica)
        frac0 = sys.largest_mass / sys.initial_total_mass
        plan = SnapshotPlan(times=cfg.snapshot_times, observables=cfg.observables,
                            record_full_measure=cfg.record_full)
        traj = run(sys, cfg.horizon, plan=plan, stop=cfg.stop)
        return ReplicaResult(n=n, replica=replica, snapshot_times=traj.snapshot_times,
                             snapshots=traj.snapshots, traces=traj.traces,
                             n_events=len(traj.events), stop_reason=traj.stop_reason,
                             absorbed=traj.absorbed, event_times=traj.event_times,
                             largest_fractions=traj.largest_fractions,
                             initial_largest_fraction=frac0)
    except Exception as exc:  # recorded per-replica; the ensemble continues
        return ReplicaResult(n=n, replica=replica, snapshot_times=[], snapshots=[],
                             traces={}, n_events=0, stop_reason="error", absorbed=False,
                             event_times=np.empty(0), largest_fractions=np.empty(0),
                             initial_largest_fraction=0.0, error=f"{type(exc).__name__}: {exc}")


@dataclass
class EnsembleResult:
    config: EnsembleConfig
    replicas: dict[tuple[int, int], ReplicaResult]

    def for_n(self, n: int) -> list[ReplicaResult]:
        return [self.replicas[(n, r)] for r in range(self.config.replicas)]


def run_ensemble(cfg: EnsembleConfig) -> EnsembleResult:
    """Execute all replicas; deterministic given the base seed, keyed (N, replica)."""
    keys = [(n, r) for n in cfg.n_values for r in range(cfg.replicas)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            futures = {key: pool.submit(_run_replica, cfg, key[0], key[1]) for key in keys}
            results = {key: fut.result() for key, fut in futures.items()}
    else:
        results = {key: _run_replica(cfg, key[0], key[1]) for key in keys}
    return EnsembleResult(config=cfg, replicas=dict(sorted(results.items())))


# ---------------------------------------------------------------------------
# Law-of-large-numbers report.
# ---------------------------------------------------------------------------

def fit_loglog_slope(ns: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(n)."""
    if len(ns) != len(errors) or len(ns) < 2:
        raise ValueError("need at least two (n, error) pairs")
    if any(e <= 0 for e in errors) or any(n <= 0 for n in ns):
        raise ValueError("slope fit requires positive sizes and errors")
    x = [math.log(float(n)) for n in ns]
    y = [math.log(float(e)) for e in errors]
    xbar = sum(x) / len(x)
    ybar = sum(y) / len(y)
    sxx = sum((xi - xbar) ** 2 for xi in x)
    sxy = sum((xi - xbar) * (yi - ybar) for xi, yi in zip(x, y))
    return sxy / sxx


@dataclass
class ConvergenceRow:
    n: int
    time: float
    median: float
    q25: float
    q75: float
    n_replicas: int


@dataclass
class ConvergenceReport:
    """Per-(N, time) distance statistics and the fitted log-log slope."""

    rows: list[ConvergenceRow]
    final_time: float
    slope: float | None
    family: tuple[str, ...]

    def median_at(self, n: int, time: float) -> float:
        for row in self.rows:
            if row.n == n and abs(row.time - time) <= 1e-12:
                return row.median
        raise KeyError(f"no row for N={n}, t={time}")

    def medians_at_final(self) -> dict[int, float]:
        return {row.n: row.median for row in self.rows if abs(row.time - self.final_time) <= 1e-12}


def lln_report(results: EnsembleResult, flory: FloryTrajectory,
               fs: Sequence[TestFunction]) -> ConvergenceReport:
    """Distance of empirical snapshots to the solver trajectory, by size and time.

    Medians (not means) are used against heavy-tailed replica errors near
    gelation; the slope is fitted on the medians at the final snapshot time.
    """
    cfg = results.config
    times = cfg.snapshot_times
    reference = {t: flory.measure_at(t) for t in times}
    rows: list[ConvergenceRow] = []
    for n in cfg.n_values:
        per_time: dict[float, list[float]] = {t: [] for t in times}
        for rep in results.for_n(n):
            if rep.error is not None:
                continue
            for t, mu in zip(rep.snapshot_times, rep.snapshots):
                if mu is None or t not in per_time:
                    continue
                per_time[t].append(bl_distance(mu, reference[t], fs))
        for t in times:
            d = sorted(per_time[t])
            if not d:
                continue
            arr = np.asarray(d)
            rows.append(ConvergenceRow(n=n, time=t, median=float(np.median(arr)),
                                       q25=float(np.quantile(arr, 0.25)),
                                       q75=float(np.quantile(arr, 0.75)),
                                       n_replicas=len(d)))
    final_time = times[-1] if times else 0.0
    finals = [(row.n, row.median) for row in rows if abs(row.time - final_time) <= 1e-12]
    slope = None
    if len(finals) >= 2 and all(m > 0 for _, m in finals):
        slope = fit_loglog_slope([n for n, _ in finals], [m for _, m in finals])
    return ConvergenceReport(rows=rows, final_time=final_time, slope=slope,
                             family=tuple(f.name for f in fs))


# ---------------------------------------------------------------------------
# Gelation estimation.
# ---------------------------------------------------------------------------

def stochastic_gel_time(traj: SimTrajectory | ReplicaResult, eps: float) -> float | None:
    """First event time at which the largest cluster holds an eps-fraction of the mass."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if traj.initial_largest_fraction >= eps:
        return 0.0
    idx = np.nonzero(traj.largest_fractions >= eps)[0]
    if idx.size == 0:
        return None
    return float(traj.event_times[int(idx[0])])


def deterministic_gel_onset(traj: FloryTrajectory, m2_threshold: float,
                            gel_fraction: float = 1e-6) -> float | None:
    """Earlier of gel-mass appearance and second-moment threshold crossing.

    Both triggers are used because truncation converts the moment blow-up
    into overflow flux; either signal alone can lag the onset.
    """
    if m2_threshold <= 0:
        raise ValueError("threshold must be positive")
    initial_mass = traj.m1[0] if len(traj.m1) else 0.0
    gel_hit = np.nonzero(traj.gel_mass > gel_fraction * initial_mass)[0]
    m2_hit = np.nonzero(traj.m2 > m2_threshold)[0]
    candidates = []
    if gel_hit.size:
        candidates.append(float(traj.times[int(gel_hit[0])]))
    if m2_hit.size:
        candidates.append(float(traj.times[int(m2_hit[0])]))
    return min(candidates) if candidates else None


# ---------------------------------------------------------------------------
# Gel-interaction vs plain Smoluchowski discrepancy.
# ---------------------------------------------------------------------------

@dataclass
class DiscrepancyReport:
    times: np.ndarray
    d_m0: np.ndarray
    d_m1: np.ndarray
    d_weights_sup: np.ndarray
    onset: float | None
    flory: FloryTrajectory
    smoluchowski: FloryTrajectory

    def max_diff(self, metric: str, t_lo: float, t_hi: float) -> float:
        data = {"m0": self.d_m0, "m1": self.d_m1, "weights": self.d_weights_sup}[metric]
        mask = (self.times >= t_lo - 1e-12) & (self.times <= t_hi + 1e-12)
        return float(data[mask].max()) if mask.any() else 0.0

    def pre_post(self, metric: str, split: float) -> tuple[float, float]:
        return (self.max_diff(metric, self.times[0], split),
                self.max_diff(metric, split, self.times[-1]))


def flory_vs_smoluchowski(grid: GridSpec, u0_weights: np.ndarray, config: SolverConfig,
                          m2_threshold: float = 1e3) -> DiscrepancyReport:
    """Solve with the given pair function and with it zeroed; report differences.

    The two trajectories share the record grid, so differences are exact
    pointwise comparisons, split at the detected gel onset of the
    gel-interacting run.
    """
    traj_f = solve(u0_weights, grid, config)
    traj_s = solve(u0_weights, smoluchowski_variant(grid), config)
    if not np.array_equal(traj_f.times, traj_s.times):
        raise RuntimeError("record grids diverged between the two solves")
    d_w = np.abs(traj_f.weights - traj_s.weights).max(axis=1)
    report = DiscrepancyReport(
        times=traj_f.times,
        d_m0=np.abs(traj_f.m0 - traj_s.m0),
        d_m1=np.abs(traj_f.m1 - traj_s.m1),
        d_weights_sup=d_w,
        onset=deterministic_gel_onset(traj_f, m2_threshold),
        flory=traj_f,
        smoluchowski=traj_s,
    )
    return report


def sol_mass_below(mu: DiscreteMeasure, mass_cut: float) -> float:
    """``<m 1{m < cut}, mu>``: sol mass carried by clusters below the cut."""
    acc = 0.0
    for state, w in zip(mu.support, mu.weights):
        if state.mass < mass_cut:
            acc += float(w) * state.mass
    return acc
