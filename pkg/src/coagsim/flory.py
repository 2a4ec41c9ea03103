"""Deterministic finite-grid solver for the coagulation limit equation.

The measure-valued equation is discretised on a finite list of cluster states
(by default integer masses ``1..M``).  The evolution of the weight vector is

    du_i/dt = 1/2 sum_{j,k : child(j,k) = i} kbar_jk u_j u_k
              - u_i sum_j kbar_ij u_j - g_i u_i,

where ``g_i = sum_j phi(x_j, x_i) (u0_j - u_j)`` is the gel-interaction term
driven by the deficit of the conserved pair function relative to time zero.
With ``phi = 0`` the equation reduces to the classical Smoluchowski form.
Merge products that would leave the grid are routed to a gel/overflow
accumulator (policy ``to_gel``) or abort the run (policy ``reflect_error``).

Time marching is classic fixed-step RK4, chosen for bitwise reproducibility;
``rk4_halving`` additionally recomputes each step at dt/2 and aborts when the
two results disagree beyond a per-component threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import ConservedQuantity, DeltaOffspring, KernelSpec, MixtureOffspring, ZeroForm
from .states import ClusterState, DiscreteMeasure

#: child_index value marking a merge product that leaves the grid.
OVERFLOW = -1


class SolverAbort(RuntimeError):
    """Numerical abort; carries the failure time and the partial trajectory."""

    def __init__(self, reason: str, time: float, partial: "FloryTrajectory | None" = None):
        super().__init__(f"{reason} at t={time:g}")
        self.reason = reason
        self.time = time
        self.partial = partial


@dataclass(frozen=True)
class GridSpec:
    """Truncated state space with precomputed rate/pair-function tables."""

    states: tuple[ClusterState, ...]
    masses: np.ndarray
    kbar_table: np.ndarray
    phi_table: np.ndarray
    children: tuple[tuple[float, np.ndarray], ...]  # (probability, child index matrix)

    def __post_init__(self):
        n = len(self.states)
        if self.kbar_table.shape != (n, n) or self.phi_table.shape != (n, n):
            raise ValueError("table shapes must match the state count")
        if not np.all(np.isfinite(self.kbar_table)) or not np.all(np.isfinite(self.phi_table)):
            raise ValueError("non-finite table entry")
        if not np.array_equal(self.kbar_table, self.kbar_table.T):
            raise ValueError("rate table must be symmetric")
        if self.kbar_table.min() < 0:
            raise ValueError("rate table must be non-negative")

    @property
    def size(self) -> int:
        return len(self.states)

    def child_index(self, i: int, j: int) -> int:
        """Deterministic child index for pair (i, j); OVERFLOW if off-grid.

        For mixture offspring laws this is the index of the first component,
        which is well-defined only for delta laws; use ``children`` directly
        for mixtures.
        """
        return int(self.children[0][1][i, j])

    def phi_symmetric(self, tol: float = 0.0) -> bool:
        return float(np.abs(self.phi_table - self.phi_table.T).max()) <= tol


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    t_end: float
    method: str = "rk4_fixed"
    positivity_clamp: float = 1e-14
    overflow_policy: str = "to_gel"
    record_times: tuple[float, ...] | None = None
    record_every: int | None = None
    halving_tol: float = 1e-8

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")
        if self.method not in ("rk4_fixed", "rk4_halving"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.overflow_policy not in ("to_gel", "reflect_error"):
            raise ValueError(f"unknown overflow policy {self.overflow_policy!r}")


@dataclass(frozen=True)
class FloryState:
    """Solution snapshot: weights, time, gel mass, and the gel-term vector."""

    weights: np.ndarray
    time: float
    gel_mass: float
    g_vec: np.ndarray


@dataclass
class FloryTrajectory:
    grid: GridSpec
    times: np.ndarray
    weights: np.ndarray          # (n_times, n_states)
    gel_mass: np.ndarray         # <m, u0> - <m, u_t>
    overflow: np.ndarray         # integral of mass flux through off-grid children
    m0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    g_min: np.ndarray
    clamped_steps: int = 0
    aborted: bool = False
    abort_reason: str | None = None

    def weights_at(self, t: float) -> np.ndarray:
        self._check_range(t)
        out = np.empty(self.grid.size)
        for k in range(self.grid.size):
            out[k] = np.interp(t, self.times, self.weights[:, k])
        return out

    def measure_at(self, t: float) -> DiscreteMeasure:
        w = np.clip(self.weights_at(t), 0.0, None)
        return DiscreteMeasure(self.grid.states, w)

    def state_at(self, t: float, u0: np.ndarray | None = None) -> FloryState:
        w = self.weights_at(t)
        u0 = u0 if u0 is not None else self.weights[0]
        g = self.grid.phi_table.T @ (u0 - w)
        return FloryState(weights=w, time=t, gel_mass=float(np.interp(t, self.times, self.gel_mass)),
                          g_vec=g)

    def _check_range(self, t: float):
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise ValueError(f"t={t} outside trajectory range [{self.times[0]}, {self.times[-1]}]")


def build_grid(max_mass: int, kernel: KernelSpec, phi: ConservedQuantity,
               attribute_points: Sequence[tuple[float, ...]] | None = None,
               order: Sequence[int] | None = None) -> GridSpec:
    """Integer-mass grid 1..M (crossed with optional attribute points).

    The child map applies the kernel's offspring placement to every state
    pair; children heavier than ``max_mass`` map to OVERFLOW, children whose
    attributes miss the grid raise (the placement must be grid-closed).
    ``order`` permutes the state list; the dynamics are invariant under it.
    """
    if max_mass < 1:
        raise ValueError("max_mass must be >= 1")
    pts = [tuple(float(v) for v in p) for p in (attribute_points or [()])]
    states = [ClusterState(mass=m, attributes=p)
              for m in range(1, max_mass + 1) for p in pts]
    if order is not None:
        order = list(order)
        if sorted(order) != list(range(len(states))):
            raise ValueError("order must be a permutation of range(n_states)")
        states = [states[k] for k in order]

    n = len(states)
    masses = np.array([s.mass for s in states], dtype=float)
    dim = len(pts[0])
    attrs = np.array([s.attributes for s in states], dtype=float) if dim else None

    a_col = attrs[:, None, :] if attrs is not None else None
    a_row = attrs[None, :, :] if attrs is not None else None
    kb = np.asarray(kernel.kbar_arrays(masses[:, None], a_col, None,
                                       masses[None, :], a_row, None), dtype=float)
    kb = np.broadcast_to(kb, (n, n)).copy()
    ph = np.asarray(phi.form.value(masses[:, None], a_col, None,
                                   masses[None, :], a_row, None), dtype=float)
    ph = np.broadcast_to(ph, (n, n)).copy()

    if isinstance(kernel.offspring, DeltaOffspring):
        components = [(1.0, kernel.offspring.placement)]
    elif isinstance(kernel.offspring, MixtureOffspring):
        components = [(p, pl) for pl, p in kernel.offspring.components]
    else:
        raise ValueError("grid solving requires a delta or finite-mixture offspring law")

    key_to_index = {(s.mass, s.attributes): k for k, s in enumerate(states)}
    children = []
    for prob, placement in components:
        idx = np.full((n, n), OVERFLOW, dtype=np.int64)
        if dim == 0:
            # mass-only fast path: child state is the summed mass
            msum = (masses[:, None] + masses[None, :]).astype(np.int64)
            lookup = np.full(2 * max_mass + 1, OVERFLOW, dtype=np.int64)
            for k, s in enumerate(states):
                lookup[int(s.mass)] = k
            idx = np.where(msum <= max_mass, lookup[np.minimum(msum, max_mass)], OVERFLOW)
        else:
            for i, si in enumerate(states):
                ai = np.asarray(si.attributes, dtype=float)
                for j, sj in enumerate(states):
                    child_attrs, _ = placement.child_parts(
                        si.mass, ai, None, sj.mass, np.asarray(sj.attributes, dtype=float), None)
                    cm = si.mass + sj.mass
                    if cm > max_mass:
                        continue
                    key = (cm, tuple(round(v, 12) for v in child_attrs))
                    if key not in key_to_index:
                        raise ValueError(
                            f"offspring of states {i}, {j} leaves the attribute grid: {key}")
                    idx[i, j] = key_to_index[key]
        children.append((float(prob), idx))

    return GridSpec(states=tuple(states), masses=masses, kbar_table=kb,
                    phi_table=ph, children=tuple(children))


class _Rhs:
    """Precomputed right-hand side evaluator (shared by all RK stages)."""

    def __init__(self, grid: GridSpec, u0: np.ndarray):
        self.grid = grid
        self.n = grid.size
        self.kb = grid.kbar_table
        self.phi_is_zero = not grid.phi_table.any()
        self.phi_t = np.ascontiguousarray(grid.phi_table.T)
        self.phi_t_u0 = self.phi_t @ u0
        self.components = []
        child_mass = grid.masses[:, None] + grid.masses[None, :]
        for prob, idx in grid.children:
            flat = idx.ravel().copy()
            ovf_pos = np.nonzero(flat == OVERFLOW)[0]
            flat_safe = np.where(flat == OVERFLOW, self.n, flat)
            self.components.append((prob, flat_safe, ovf_pos,
                                    child_mass.ravel()[ovf_pos].copy()))
        self._W = np.empty((self.n, self.n))

    def __call__(self, u: np.ndarray):
        """Returns (du, overflow mass rate, g vector)."""
        W = np.multiply(self.kb, u[:, None], out=self._W)
        W *= u[None, :]
        wflat = W.ravel()
        gain = np.zeros(self.n)
        ovf_mass_rate = 0.0
        for prob, flat_safe, ovf_pos, ovf_mass in self.components:
            counts = np.bincount(flat_safe, weights=wflat, minlength=self.n + 1)
            gain += (0.5 * prob) * counts[:self.n]
            if ovf_pos.size:
                ovf_mass_rate += (0.5 * prob) * float(wflat[ovf_pos] @ ovf_mass)
        loss = u * (self.kb @ u)
        if self.phi_is_zero:
            g = np.zeros(self.n)
            du = gain - loss
        else:
            g = self.phi_t_u0 - self.phi_t @ u
            du = gain - loss - g * u
        return du, ovf_mass_rate, g


def rhs(weights: np.ndarray, u0_weights: np.ndarray, grid: GridSpec):
    """Single right-hand side evaluation: (du, overflow mass rate, g vector)."""
    return _Rhs(grid, np.asarray(u0_weights, dtype=float))(np.asarray(weights, dtype=float))


def _rk4_step(f: _Rhs, u: np.ndarray, dt: float):
    k1, o1, _ = f(u)
    k2, o2, _ = f(u + 0.5 * dt * k1)
    k3, o3, _ = f(u + 0.5 * dt * k2)
    k4, o4, _ = f(u + dt * k3)
    du = (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    dovf = (dt / 6.0) * (o1 + 2.0 * o2 + 2.0 * o3 + o4)
    return u + du, dovf


def solve(u0_weights: Sequence[float], grid: GridSpec, config: SolverConfig) -> FloryTrajectory:
    """March the truncated equation with fixed-step RK4.

    Raises :class:`SolverAbort` (carrying the partial trajectory) on NaN/Inf
    states, on negative weights beyond the positivity clamp, on overflow under
    the ``reflect_error`` policy, and on a failed dt/2 halving check.
    """
    u = np.asarray(u0_weights, dtype=float).copy()
    if u.shape != (grid.size,):
        raise ValueError("u0 length must match the grid")
    if u.min() < 0:
        raise ValueError("initial weights must be non-negative")
    if not math.isfinite(float(grid.masses @ u)):
        raise ValueError("initial mass must be finite")
    u0 = u.copy()
    f = _Rhs(grid, u0)

    n_steps = int(round(config.t_end / config.dt)) if config.t_end > 0 else 0
    if config.t_end > 0 and abs(n_steps * config.dt - config.t_end) > 1e-9 * max(config.t_end, 1.0):
        n_steps = int(math.ceil(config.t_end / config.dt))

    record_steps = _record_steps(config, n_steps)

    times, weights_out, ovf_out, gmin_out = [], [], [], []
    clamped = 0
    ovf_acc = 0.0

    def record(step_idx: int):
        t = step_idx * config.dt
        if times and abs(times[-1] - t) < 1e-15:
            return
        _, _, g = f(u)
        times.append(t)
        weights_out.append(u.copy())
        ovf_out.append(ovf_acc)
        gmin_out.append(float(g.min()) if g.size else 0.0)

    def build(aborted=False, reason=None):
        tarr = np.asarray(times)
        warr = np.asarray(weights_out)
        m0 = warr.sum(axis=1)
        m1 = warr @ grid.masses
        m2 = warr @ (grid.masses * grid.masses)
        gel = (m1[0] - m1) if len(m1) else np.empty(0)
        return FloryTrajectory(grid=grid, times=tarr, weights=warr, gel_mass=gel,
                               overflow=np.asarray(ovf_out), m0=m0, m1=m1, m2=m2,
                               g_min=np.asarray(gmin_out), clamped_steps=clamped,
                               aborted=aborted, abort_reason=reason)

    record(0)
    for s in range(1, n_steps + 1):
        u_new, dovf = _rk4_step(f, u, config.dt)
        if config.method == "rk4_halving":
            u_half, dovf_a = _rk4_step(f, u, 0.5 * config.dt)
            u_half, dovf_b = _rk4_step(f, u_half, 0.5 * config.dt)
            if not np.all(np.abs(u_new - u_half) < config.halving_tol):
                record(s - 1)
                traj = build(aborted=True, reason="halving_check")
                raise SolverAbort("step-size halving check failed", s * config.dt, traj)
        if not np.all(np.isfinite(u_new)):
            record(s - 1)
            traj = build(aborted=True, reason="non_finite")
            raise SolverAbort("non-finite state", s * config.dt, traj)
        low = float(u_new.min()) if u_new.size else 0.0
        if low < -config.positivity_clamp:
            record(s - 1)
            traj = build(aborted=True, reason="negative_weights")
            raise SolverAbort(f"negative weight {low:g} beyond clamp", s * config.dt, traj)
        if low < 0.0:
            np.clip(u_new, 0.0, None, out=u_new)
            clamped += 1
        if config.overflow_policy == "reflect_error" and dovf > 0.0:
            record(s - 1)
            traj = build(aborted=True, reason="overflow")
            raise SolverAbort("mass left the grid under reflect_error", s * config.dt, traj)
        u = u_new
        ovf_acc += dovf
        if s in record_steps:
            record(s)

    return build()


def _record_steps(config: SolverConfig, n_steps: int) -> set[int]:
    if config.record_times is not None:
        steps = set()
        for t in config.record_times:
            k = int(round(t / config.dt))
            if abs(k * config.dt - t) > 1e-9 * max(1.0, abs(t)):
                raise ValueError(f"record time {t} does not align with the dt grid")
            if 0 <= k <= n_steps:
                steps.add(k)
        steps.add(n_steps)
        return steps
    every = config.record_every if config.record_every is not None else max(1, n_steps // 200)
    steps = set(range(0, n_steps + 1, every))
    steps.add(n_steps)
    return steps


def gel_mass_at(traj: FloryTrajectory, t: float) -> float:
    """Mass deficit ``<m, u0> - <m, u_t>`` linearly interpolated between records.

    The deficit already contains the accumulated overflow flux (overflow
    removes weight from the grid directly); the per-time split is available
    as ``traj.overflow``.
    """
    traj._check_range(t)
    return float(np.interp(t, traj.times, traj.gel_mass))


def smoluchowski_variant(grid: GridSpec) -> GridSpec:
    """The same grid with the gel term switched off (zero pair function)."""
    return GridSpec(states=grid.states, masses=grid.masses, kbar_table=grid.kbar_table,
                    phi_table=np.zeros_like(grid.phi_table), children=grid.children)
