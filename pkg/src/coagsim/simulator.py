"""Exact stochastic simulation of the normalised cluster coagulation process.

The population is kept struct-of-arrays (masses, attributes, labels) so merge
rates of one cluster against the whole population evaluate as vectorised rows.
Pair selection uses cached per-cluster row sums ``S_i = sum_{j != i}
kbar(x_i, x_j)``: pick ``i`` proportional to ``S_i``, then ``j`` proportional
to ``kbar(x_i, x_j)``, which selects unordered pairs with probability
``kbar / sum_pairs kbar``.  The clock runs on the rescaled convention: the
pair ``{i, j}`` fires at rate ``kbar(x_i, x_j) / N``, so waiting times are
exponential with the normalised total rate ``sum_i S_i / (2 N)``.

Events cost O(n) kernel evaluations (three population rows); initialisation
costs O(n^2).  An optional thinning strategy driven by a product majorant is
available for kernels whose rate rows are expensive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import ConservedQuantity, KernelSpec, MajorantSpec, ProductMajorant
from .states import ClusterState, DiscreteMeasure, TestFunction, integrate


class _Sentinel:
    def __init__(self, name: str):
        self._name = name

    def __repr__(self):
        return self._name


#: Returned by :func:`step` when fewer than two clusters remain or the total
#: rate vanishes; the clock is left untouched.
ABSORBED = _Sentinel("ABSORBED")
#: Returned by :func:`step` when the next event would land beyond ``t_max``;
#: the clock is advanced to ``t_max`` and no event is applied.
HORIZON = _Sentinel("HORIZON")


@dataclass(frozen=True)
class EventRecord:
    index: int
    time: float
    idx_x: int
    idx_y: int
    mass_x: float
    mass_y: float
    child: ClusterState


@dataclass(frozen=True)
class SnapshotPlan:
    """Observation times, named observables, and whether to keep full measures."""

    times: tuple[float, ...] = ()
    observables: tuple[TestFunction, ...] = ()
    record_full_measure: bool = True

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if any(t < 0 for t in times):
            raise ValueError("snapshot times must be non-negative")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot times must be strictly increasing")
        object.__setattr__(self, "times", times)


@dataclass(frozen=True)
class StopRules:
    max_events: int | None = None
    mass_fraction: float | None = None  # stop once largest mass / total mass >= this


@dataclass(frozen=True)
class AuditPlan:
    """Conservation-audit schedule for a run.

    ``quantities`` maps names to pair functions (conserved quantities or
    majorants) whose single-argument and pair statistics are recorded at every
    audit.  ``cadence=None`` audits every ``max(1, expected_events / 100)``
    events; audits also fire at every snapshot time and at the end of the run.
    """

    quantities: tuple[tuple[str, object], ...] = ()
    probes: tuple[ClusterState, ...] = ()
    cadence: int | None = None
    rate_check_every: int = 1000
    mass_check_every_event: bool = False


@dataclass
class AuditRow:
    time: float
    event_count: int
    cluster_count: int
    total_mass: float
    stats: dict
    rate_cached: float | None = None
    rate_recomputed: float | None = None


class ParticleSystem:
    """Mutable N-particle state with rate caches and a rescaled clock.

    Confined to a single worker; parallel replicas each own an independent
    system seeded through a deterministic splitting rule.
    """

    def __init__(self, kernel: KernelSpec, masses: np.ndarray,
                 attrs: np.ndarray | None, labels: np.ndarray | None,
                 n_scale: int, rng: np.random.Generator,
                 integer_mode: bool = False,
                 selection: str = "exact",
                 majorant: MajorantSpec | None = None):
        if n_scale <= 0:
            raise ValueError("normalisation parameter N must be positive")
        if selection not in ("exact", "rejection"):
            raise ValueError(f"unknown selection strategy {selection!r}")
        n0 = masses.shape[0]
        if n0 == 0:
            raise ValueError("cannot build an empty particle system")
        self.kernel = kernel
        self.n_scale = int(n_scale)
        self.rng = rng
        self.integer_mode = bool(integer_mode)
        self.selection = selection
        self.clock = 0.0
        self.event_count = 0
        self.n = n0
        self.initial_count = n0

        self.masses = np.array(masses, dtype=float)
        self.imasses = None
        if integer_mode:
            im = np.asarray(masses)
            if not np.all(im == np.floor(im)):
                raise ValueError("integer-mass mode requires integer masses")
            self.imasses = np.array(im, dtype=np.int64)
        self.attrs = np.array(attrs, dtype=float) if attrs is not None else None
        self.labels = np.array(labels, dtype=np.int64) if labels is not None else None

        self.row_sums = np.zeros(n0, dtype=float)
        self.total_rate_cache = 0.0
        self.majorant = majorant
        self._xi = None
        if selection == "rejection":
            if not isinstance(majorant, ProductMajorant):
                raise ValueError("rejection selection requires a product majorant")
            self._xi = np.zeros(n0, dtype=float)
            self._xi[:n0] = majorant.xi_values(self.masses[:n0])
        else:
            self._build_row_sums()
        self.total_rate_cache = self.total_rate()

        self.initial_total_mass = self._total_mass_now()
        self.initial_imass = int(self.imasses[:n0].sum()) if self.imasses is not None else None
        self.largest_mass = float(self.masses[:n0].max())
        self.audit_baselines: dict[str, tuple[object, tuple[ClusterState, ...], np.ndarray, float]] = {}

    # -- array plumbing -----------------------------------------------------

    def _build_row_sums(self):
        n = self.n
        for i in range(n):
            row = self._row(self.masses[i], self._attr(i), self._label(i), n)
            row[i] = 0.0
            self.row_sums[i] = row.sum()

    def _attr(self, i: int):
        return self.attrs[i] if self.attrs is not None else None

    def _label(self, i: int):
        if self.labels is None:
            return None
        v = int(self.labels[i])
        return None if v < 0 else v

    def _row(self, mass, attr, label, upto: int) -> np.ndarray:
        a2 = self.attrs[:upto] if self.attrs is not None else None
        l2 = self.labels[:upto] if self.labels is not None else None
        row = self.kernel.kbar_arrays(mass, attr, label, self.masses[:upto], a2, l2)
        return np.asarray(row, dtype=float)

    def _swap_remove(self, i: int):
        last = self.n - 1
        if i != last:
            self.masses[i] = self.masses[last]
            if self.imasses is not None:
                self.imasses[i] = self.imasses[last]
            if self.attrs is not None:
                self.attrs[i] = self.attrs[last]
            if self.labels is not None:
                self.labels[i] = self.labels[last]
            self.row_sums[i] = self.row_sums[last]
            if self._xi is not None:
                self._xi[i] = self._xi[last]
        self.n = last

    def _append(self, mass, imass, attr, label):
        k = self.n
        self.masses[k] = mass
        if self.imasses is not None:
            self.imasses[k] = imass
        if self.attrs is not None:
            self.attrs[k] = attr
        if self.labels is not None:
            self.labels[k] = -1 if label is None else int(label)
        self.n = k + 1
        return k

    def _total_mass_now(self) -> float:
        if self.imasses is not None:
            return float(self.imasses[:self.n].sum())
        return float(self.masses[:self.n].sum())

    # -- public views ---------------------------------------------------------

    def states(self) -> list[ClusterState]:
        out = []
        for i in range(self.n):
            attrs = tuple(float(v) for v in self.attrs[i]) if self.attrs is not None else ()
            mass = int(self.imasses[i]) if self.imasses is not None else float(self.masses[i])
            out.append(ClusterState(mass=mass, attributes=attrs, label=self._label(i)))
        return out

    def total_rate(self) -> float:
        """Normalised total event rate ``sum_{unordered pairs} kbar / N``."""
        if self.n < 2:
            return 0.0
        if self.selection == "rejection":
            pair = self.kernel.pair_rate_sum(self.masses[:self.n],
                                             self.attrs[:self.n] if self.attrs is not None else None,
                                             self.labels[:self.n] if self.labels is not None else None)
            return 0.5 * pair / self.n_scale
        return 0.5 * float(self.row_sums[:self.n].sum()) / self.n_scale

    def recomputed_total_rate(self) -> float:
        """From-scratch total rate, independent of the row-sum cache."""
        if self.n < 2:
            return 0.0
        pair = self.kernel.pair_rate_sum(self.masses[:self.n],
                                         self.attrs[:self.n] if self.attrs is not None else None,
                                         self.labels[:self.n] if self.labels is not None else None)
        return 0.5 * pair / self.n_scale

    def snapshot_measure(self) -> DiscreteMeasure:
        """Empirical measure normalised by N, identical states grouped."""
        groups: dict[tuple, int] = {}
        order: list[tuple] = []
        for i in range(self.n):
            if self.imasses is not None:
                mass = int(self.imasses[i])
            else:
                mass = float(self.masses[i])
            attrs = tuple(float(v) for v in self.attrs[i]) if self.attrs is not None else ()
            key = (mass, attrs, self._label(i))
            if key not in groups:
                groups[key] = 0
                order.append(key)
            groups[key] += 1
        order.sort(key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2]))
        support = [ClusterState(mass=k[0], attributes=k[1], label=k[2]) for k in order]
        weights = [groups[k] / self.n_scale for k in order]
        return DiscreteMeasure(support, weights)

    def clone(self, rng: np.random.Generator | None = None) -> "ParticleSystem":
        """Copy of the current state with an independent generator.

        Rate caches are copied, not rebuilt, so cloning a freshly initialised
        system is O(n); used to fan replicas out of one expensive init.
        """
        twin = object.__new__(ParticleSystem)
        twin.__dict__.update(self.__dict__)
        twin.rng = rng if rng is not None else self.rng
        twin.masses = self.masses.copy()
        twin.imasses = self.imasses.copy() if self.imasses is not None else None
        twin.attrs = self.attrs.copy() if self.attrs is not None else None
        twin.labels = self.labels.copy() if self.labels is not None else None
        twin.row_sums = self.row_sums.copy()
        twin._xi = self._xi.copy() if self._xi is not None else None
        twin.audit_baselines = dict(self.audit_baselines)
        return twin

    # -- audit baselines ------------------------------------------------------

    def register_conserved(self, name: str, phi, probes: Sequence[ClusterState]):
        singles, pair = conservation_stats(self, phi, probes)
        self.audit_baselines[name] = (phi, tuple(probes), singles, pair)


def _uniform_arrays(states: Sequence[ClusterState]):
    dims = {len(s.attributes) for s in states}
    if len(dims) != 1:
        raise ValueError("all clusters must share one attribute dimension")
    d = dims.pop()
    masses = np.array([s.mass for s in states], dtype=float)
    attrs = np.array([s.attributes for s in states], dtype=float) if d else None
    has_labels = any(s.label is not None for s in states)
    labels = (np.array([-1 if s.label is None else s.label for s in states], dtype=np.int64)
              if has_labels else None)
    return masses, attrs, labels


def derive_rng(base_seed: int, *key: int) -> np.random.Generator:
    """Deterministic splitting rule: replica generator from a base seed and index key."""
    return np.random.default_rng(np.random.SeedSequence(entropy=base_seed, spawn_key=tuple(key)))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return derive_rng(int(seed))


def init_iid(mu: DiscreteMeasure, N: int, seed, kernel: KernelSpec, *,
             integer_mode: bool = False, selection: str = "exact",
             majorant: MajorantSpec | None = None) -> ParticleSystem:
    """N clusters drawn i.i.d. from the probability measure ``mu``."""
    if N <= 0:
        raise ValueError("N must be positive")
    if not mu.is_probability(tol=1e-12):
        raise ValueError(f"initial measure must be a probability measure, |mu| = {mu.total_weight()!r}")
    rng = _as_rng(seed)
    probs = np.asarray(mu.weights, dtype=float)
    probs = probs / probs.sum()
    idx = rng.choice(len(mu.support), size=N, p=probs)
    states = [mu.support[int(k)] for k in idx]
    masses, attrs, labels = _uniform_arrays(states)
    return ParticleSystem(kernel, masses, attrs, labels, n_scale=N, rng=rng,
                          integer_mode=integer_mode, selection=selection, majorant=majorant)


def init_counts(counts: Sequence[tuple[ClusterState, int]], N: int, kernel: KernelSpec,
                seed=0, *, integer_mode: bool = False, selection: str = "exact",
                majorant: MajorantSpec | None = None) -> ParticleSystem:
    """Deterministic initial configuration ``sum_i c_i delta_i / N``."""
    if not counts:
        raise ValueError("counts must be non-empty")
    states: list[ClusterState] = []
    for state, c in counts:
        if int(c) != c or c <= 0:
            raise ValueError(f"multiplicity must be a positive integer, got {c!r}")
        states.extend([state] * int(c))
    masses, attrs, labels = _uniform_arrays(states)
    rng = _as_rng(seed)
    return ParticleSystem(kernel, masses, attrs, labels, n_scale=N, rng=rng,
                          integer_mode=integer_mode, selection=selection, majorant=majorant)


def total_rate(sys: ParticleSystem) -> float:
    return sys.total_rate()


def _pick_index(rng: np.random.Generator, weights: np.ndarray) -> int:
    cum = np.cumsum(weights)
    total = cum[-1]
    u = rng.random() * total
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, weights.shape[0] - 1)


def _apply_merge(sys: ParticleSystem, i: int, j: int, t_new: float) -> EventRecord:
    """Replace clusters i and j by their offspring; O(n) row updates."""
    mi, mj = float(sys.masses[i]), float(sys.masses[j])
    ai, aj = sys._attr(i), sys._attr(j)
    li, lj = sys._label(i), sys._label(j)
    mass_c, attrs_c, label_c = sys.kernel.offspring_raw(sys.rng, mi, ai, li, mj, aj, lj)
    imass_c = None
    if sys.imasses is not None:
        imass_c = int(sys.imasses[i]) + int(sys.imasses[j])
        mass_c = float(imass_c)

    n = sys.n
    if sys.selection == "exact":
        r_i = sys._row(mi, ai, li, n)
        r_i[i] = 0.0
        r_j = sys._row(mj, aj, lj, n)
        r_j[j] = 0.0
        S = sys.row_sums[:n]
        S -= r_i
        S -= r_j

    hi, lo = (i, j) if i > j else (j, i)
    sys._swap_remove(hi)
    sys._swap_remove(lo)

    attr_arr = np.asarray(attrs_c, dtype=float) if sys.attrs is not None else None
    m = sys.n
    if sys.selection == "exact":
        r_z = sys._row(mass_c, attr_arr, label_c, m)
        sys.row_sums[:m] += r_z
        k = sys._append(mass_c, imass_c, attr_arr, label_c)
        sys.row_sums[k] = float(r_z.sum())
    else:
        k = sys._append(mass_c, imass_c, attr_arr, label_c)
        sys._xi[k] = float(np.asarray(sys.majorant.xi_values(np.asarray([mass_c])))[0])

    sys.clock = t_new
    sys.event_count += 1
    sys.largest_mass = max(sys.largest_mass, mass_c)
    child_mass = imass_c if imass_c is not None else mass_c
    child = ClusterState(mass=child_mass, attributes=tuple(float(v) for v in attrs_c),
                         label=label_c)
    return EventRecord(index=sys.event_count, time=t_new, idx_x=i, idx_y=j,
                       mass_x=mi, mass_y=mj, child=child)


def _step_exact(sys: ParticleSystem, t_max: float | None):
    n = sys.n
    S = sys.row_sums[:n]
    total_pair = float(S.sum())
    if total_pair <= 0.0:
        return ABSORBED
    rate = 0.5 * total_pair / sys.n_scale
    sys.total_rate_cache = rate
    wait = sys.rng.exponential(1.0 / rate)
    t_new = sys.clock + wait
    if t_max is not None and t_new > t_max:
        sys.clock = t_max
        return HORIZON
    i = _pick_index(sys.rng, S)
    r_i = sys._row(sys.masses[i], sys._attr(i), sys._label(i), n)
    r_i[i] = 0.0
    row_total = float(r_i.sum())
    if row_total <= 0.0:
        # cached S_i drifted onto a zero row; fall back to the heaviest row
        return ABSORBED
    j = _pick_index(sys.rng, r_i)
    return _apply_merge(sys, i, j, t_new)


def _step_rejection(sys: ParticleSystem, t_max: float | None):
    n = sys.n
    xi = sys._xi[:n]
    s1 = float(xi.sum())
    s2 = float((xi * xi).sum())
    if s1 * s1 - s2 <= 0.0:
        return ABSORBED
    proposal_rate = 0.5 * s1 * s1 / sys.n_scale
    t = sys.clock
    while True:
        t += sys.rng.exponential(1.0 / proposal_rate)
        if t_max is not None and t > t_max:
            sys.clock = t_max
            return HORIZON
        i = _pick_index(sys.rng, xi)
        j = _pick_index(sys.rng, xi)
        if i == j:
            continue
        kb = float(np.asarray(sys.kernel.kbar_arrays(
            sys.masses[i], sys._attr(i), sys._label(i),
            sys.masses[j], sys._attr(j), sys._label(j))))
        bound = float(xi[i] * xi[j])
        if kb > bound * (1.0 + 1e-12):
            raise RuntimeError(
                f"majorant violated: kbar={kb} > {bound} for masses "
                f"({sys.masses[i]}, {sys.masses[j]})")
        if sys.rng.random() * bound <= kb:
            return _apply_merge(sys, i, j, t)


def step(sys: ParticleSystem, t_max: float | None = None):
    """Advance by one merge event.

    Returns an :class:`EventRecord`, or :data:`ABSORBED` when fewer than two
    clusters remain / the total rate is zero (clock frozen), or
    :data:`HORIZON` when ``t_max`` is given and the next event would fall
    beyond it (clock advanced to ``t_max``, no event applied).
    """
    if sys.n < 2:
        return ABSORBED
    if sys.selection == "rejection":
        return _step_rejection(sys, t_max)
    return _step_exact(sys, t_max)


# ---------------------------------------------------------------------------
# Conservation statistics and audits.
# ---------------------------------------------------------------------------

def conservation_stats(sys: ParticleSystem, phi, probes: Sequence[ClusterState]):
    """Single-argument statistics ``sum_i phi(x_i, q) / N`` per probe, and the
    pair statistic ``sum_{i != j} phi(x_i, x_j) / N^2``."""
    n = sys.n
    masses = sys.masses[:n]
    attrs = sys.attrs[:n] if sys.attrs is not None else None
    labels = sys.labels[:n] if sys.labels is not None else None
    N = sys.n_scale
    singles = np.array([phi.single_sum(masses, attrs, labels, q) / N for q in probes])
    pair = phi.pair_sum(masses, attrs, labels) / (N * N)
    return singles, pair


@dataclass
class ConservationAuditReport:
    name: str
    time: float
    singles: np.ndarray
    pair: float
    initial_singles: np.ndarray | None
    initial_pair: float | None
    tol: float
    single_increased: bool = False
    pair_increased: bool = False

    @property
    def ok(self) -> bool:
        return not (self.single_increased or self.pair_increased)


def conservation_audit(sys: ParticleSystem, phi, probes: Sequence[ClusterState] = (),
                       name: str = "", tol: float = 1e-9) -> ConservationAuditReport:
    """Compare the current conservation statistics against stored baselines.

    If the quantity was registered via ``register_conserved`` its stored
    initial statistics are used; any increase beyond ``tol`` (relative,
    floored at ``tol`` absolute) is flagged.
    """
    base = sys.audit_baselines.get(name)
    if base is not None:
        phi, probes, singles0, pair0 = base
    else:
        singles0, pair0 = (None, None)
    singles, pair = conservation_stats(sys, phi, probes)
    report = ConservationAuditReport(name=name, time=sys.clock, singles=singles, pair=pair,
                                     initial_singles=singles0, initial_pair=pair0, tol=tol)
    if singles0 is not None and singles.size:
        slack = tol * np.maximum(np.abs(singles0), 1.0)
        report.single_increased = bool(np.any(singles > singles0 + slack))
    if pair0 is not None:
        report.pair_increased = pair > pair0 + tol * max(abs(pair0), 1.0)
    return report


# ---------------------------------------------------------------------------
# Trajectories.
# ---------------------------------------------------------------------------

class EventLog:
    """Columnar merge-event log."""

    def __init__(self, dim: int):
        self.dim = dim
        self.index: list[int] = []
        self.time: list[float] = []
        self.mass_x: list[float] = []
        self.mass_y: list[float] = []
        self.mass_child: list[float] = []
        self.child_attrs: list[tuple[float, ...]] = []

    def append(self, rec: EventRecord):
        self.index.append(rec.index)
        self.time.append(rec.time)
        self.mass_x.append(rec.mass_x)
        self.mass_y.append(rec.mass_y)
        self.mass_child.append(rec.child.mass)
        self.child_attrs.append(rec.child.attributes)

    def __len__(self):
        return len(self.index)


@dataclass
class SimTrajectory:
    """Output of :func:`run`: snapshots, observable traces, logs, audits."""

    snapshot_times: list[float]
    snapshots: list[DiscreteMeasure | None]
    traces: dict[str, list[float]]
    events: EventLog
    audits: list[AuditRow]
    final: ParticleSystem
    absorbed: bool
    stop_reason: str
    event_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    largest_fractions: np.ndarray = field(default_factory=lambda: np.empty(0))
    initial_largest_fraction: float = 0.0

    def snapshot_at(self, t: float) -> DiscreteMeasure:
        for time, m in zip(self.snapshot_times, self.snapshots):
            if m is not None and abs(time - t) <= 1e-12:
                return m
        raise KeyError(f"no snapshot recorded at t={t}")


def run(sys: ParticleSystem, horizon: float, plan: SnapshotPlan | None = None,
        stop: StopRules | None = None, audit: AuditPlan | None = None) -> SimTrajectory:
    """Simulate until the horizon or a stop rule fires.

    Snapshots record the state holding at each plan time: each step is bounded
    by the next pending plan time, so a jump can never skip an observation
    point (re-drawing the waiting time at the boundary is exact by
    memorylessness of the exponential clock).  If the run is absorbed early,
    the frozen state fills the remaining plan times; if a stop rule fires,
    later plan times are left unrecorded.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    plan = plan if plan is not None else SnapshotPlan()
    stop = stop if stop is not None else StopRules()

    expected_events = stop.max_events if stop.max_events is not None else max(sys.n - 1, 1)
    cadence = (audit.cadence if audit is not None and audit.cadence is not None
               else max(1, expected_events // 100))
    rate_every = audit.rate_check_every if audit is not None else 0

    if audit is not None:
        for name, phi in audit.quantities:
            sys.register_conserved(name, phi, audit.probes)

    dim = sys.attrs.shape[1] if sys.attrs is not None else 0
    events = EventLog(dim)
    audits: list[AuditRow] = []
    ev_times: list[float] = []
    ev_fracs: list[float] = []
    total_mass0 = sys.initial_total_mass
    frac0 = sys.largest_mass / total_mass0 if total_mass0 > 0 else 0.0

    pending = [t for t in plan.times if t <= horizon + 1e-15]
    snapshot_times: list[float] = []
    snapshots: list[DiscreteMeasure | None] = []
    traces: dict[str, list[float]] = {f.name: [] for f in plan.observables}

    def take_snapshot(t: float):
        mu = sys.snapshot_measure()
        snapshot_times.append(t)
        snapshots.append(mu if plan.record_full_measure else None)
        for f in plan.observables:
            traces[f.name].append(integrate(f, mu))

    def take_audit(check_rate: bool):
        row = AuditRow(time=sys.clock, event_count=sys.event_count,
                       cluster_count=sys.n, total_mass=sys._total_mass_now(), stats={})
        for name in sys.audit_baselines:
            rep = conservation_audit(sys, None, name=name)
            row.stats[name] = {"singles": rep.singles.copy(), "pair": rep.pair,
                               "single_increased": rep.single_increased,
                               "pair_increased": rep.pair_increased}
        if check_rate:
            row.rate_cached = sys.total_rate()
            row.rate_recomputed = sys.recomputed_total_rate()
        audits.append(row)

    if audit is not None:
        take_audit(check_rate=bool(rate_every))

    absorbed = False
    reason = "horizon"
    while True:
        if stop.max_events is not None and sys.event_count >= stop.max_events:
            reason = "max_events"
            break
        if (stop.mass_fraction is not None and total_mass0 > 0
                and sys.largest_mass / total_mass0 >= stop.mass_fraction):
            reason = "mass_fraction"
            break
        if sys.clock >= horizon:
            reason = "horizon"
            break
        bound = pending[0] if pending else horizon
        outcome = step(sys, t_max=bound)
        if outcome is ABSORBED:
            absorbed = True
            reason = "absorbed"
            break
        if outcome is HORIZON:
            # reached the step bound without an event: flush plan times due now
            while pending and pending[0] <= sys.clock + 1e-15:
                take_snapshot(pending.pop(0))
            if sys.clock >= horizon:
                reason = "horizon"
                break
            continue
        rec: EventRecord = outcome
        events.append(rec)
        ev_times.append(rec.time)
        ev_fracs.append(sys.largest_mass / total_mass0 if total_mass0 > 0 else 0.0)
        if audit is not None and sys.event_count % cadence == 0:
            take_audit(check_rate=bool(rate_every) and sys.event_count % rate_every == 0)
        elif audit is not None and rate_every and sys.event_count % rate_every == 0:
            take_audit(check_rate=True)
        elif audit is not None and audit.mass_check_every_event:
            audits.append(AuditRow(time=sys.clock, event_count=sys.event_count,
                                   cluster_count=sys.n, total_mass=sys._total_mass_now(),
                                   stats={}))
        while pending and pending[0] < sys.clock - 1e-15:
            # unreachable under step bounding; kept as a guard
            take_snapshot(pending.pop(0))

    if absorbed:
        # constant tail: the frozen state holds at every remaining plan time
        while pending:
            take_snapshot(pending.pop(0))
    else:
        while pending and pending[0] <= sys.clock + 1e-15:
            take_snapshot(pending.pop(0))
    if audit is not None:
        take_audit(check_rate=bool(rate_every))

    return SimTrajectory(snapshot_times=snapshot_times, snapshots=snapshots,
                         traces=traces, events=events, audits=audits, final=sys,
                         absorbed=absorbed, stop_reason=reason,
                         event_times=np.asarray(ev_times),
                         largest_fractions=np.asarray(ev_fracs),
                         initial_largest_fraction=frac0)
