"""Cluster states, finite discrete measures, and test-function pairings.

A cluster is a positive mass together with a fixed-length vector of real
attributes (e.g. a spatial position) and an optional small integer label.
Populations are encoded as finite measures with non-negative weights on a
finite support of clusters; observables are evaluated through the pairing
``<f, mu> = sum_i w_i f(x_i)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# Relative tolerance for state equality in float-mass mode; integer-mass
# runs compare exactly.
STATE_REL_TOL = 1e-12


@dataclass(frozen=True)
class ClusterState:
    """One point of the cluster space: mass, attribute vector, optional label."""

    mass: float
    attributes: tuple[float, ...] = ()
    label: int | None = None

    def __post_init__(self):
        if not (self.mass > 0) or not math.isfinite(self.mass):
            raise ValueError(f"cluster mass must be positive and finite, got {self.mass!r}")
        attrs = tuple(float(a) for a in self.attributes)
        if any(not math.isfinite(a) for a in attrs):
            raise ValueError(f"non-finite attribute in {attrs!r}")
        object.__setattr__(self, "attributes", attrs)
        if self.label is not None and (self.label < 0 or int(self.label) != self.label):
            raise ValueError(f"label must be a non-negative integer, got {self.label!r}")

    @property
    def dim(self) -> int:
        return len(self.attributes)


def states_equal(a: ClusterState, b: ClusterState, *, integer_mass: bool = False,
                 rel_tol: float = STATE_REL_TOL) -> bool:
    """State equality: exact in integer-mass mode, within ``rel_tol`` otherwise."""
    if a.label != b.label or len(a.attributes) != len(b.attributes):
        return False
    if integer_mass:
        return a.mass == b.mass and a.attributes == b.attributes
    if not math.isclose(a.mass, b.mass, rel_tol=rel_tol, abs_tol=0.0):
        return False
    return all(
        math.isclose(p, q, rel_tol=rel_tol, abs_tol=rel_tol)
        for p, q in zip(a.attributes, b.attributes)
    )


class DiscreteMeasure:
    """Finite positive measure with distinct support points.

    Weights are stored as a read-only float array aligned with ``support``.
    Instances are immutable after construction and safe to share across
    parallel workers.
    """

    __slots__ = ("support", "weights")

    def __init__(self, support: Sequence[ClusterState], weights: Sequence[float]):
        support = tuple(support)
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or len(support) != w.shape[0]:
            raise ValueError("support and weights must have equal length")
        if w.size and (not np.all(np.isfinite(w)) or w.min() < 0.0):
            raise ValueError("weights must be finite and non-negative")
        seen = set()
        for s in support:
            key = (s.mass, s.attributes, s.label)
            if key in seen:
                raise ValueError(f"duplicate support state {s!r}")
            seen.add(key)
        w.setflags(write=False)
        self.support = support
        self.weights = w

    @classmethod
    def empty(cls) -> "DiscreteMeasure":
        return cls((), ())

    @classmethod
    def delta(cls, state: ClusterState, weight: float = 1.0) -> "DiscreteMeasure":
        return cls((state,), (weight,))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[ClusterState, float]]) -> "DiscreteMeasure":
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    def total_weight(self) -> float:
        """Total variation ``|mu|``, summed in support order."""
        acc = 0.0
        for w in self.weights:
            acc += float(w)
        return acc

    def is_probability(self, tol: float = 1e-12) -> bool:
        return abs(self.total_weight() - 1.0) <= tol

    def scaled(self, factor: float) -> "DiscreteMeasure":
        if factor < 0:
            raise ValueError("scale factor must be non-negative")
        return DiscreteMeasure(self.support, self.weights * factor)

    def __len__(self) -> int:
        return len(self.support)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return self.support == other.support and np.array_equal(self.weights, other.weights)

    def __repr__(self) -> str:
        return f"DiscreteMeasure({len(self.support)} states, |mu|={self.total_weight():g})"


@dataclass(frozen=True)
class TestFunction:
    """Bounded observable on the cluster space.

    ``bound`` is a declared upper bound on ``|evaluator|``; it is checked by
    sampling in the test-suite, not at call time.  ``support_radius``, when
    set, promises ``evaluator(x) = 0`` whenever the state norm
    ``sqrt(mass^2 + |attributes|^2)`` exceeds it.
    """

    name: str
    evaluator: Callable[[ClusterState], float] = field(compare=False)
    bound: float = 1.0
    lipschitz: float | None = None
    support_radius: float | None = None

    __test__ = False  # not a pytest collection target

    def __call__(self, x: ClusterState) -> float:
        return float(self.evaluator(x))


def state_norm(x: ClusterState) -> float:
    return math.sqrt(x.mass * x.mass + sum(a * a for a in x.attributes))


def integrate(f: TestFunction | Callable[[ClusterState], float], mu: DiscreteMeasure) -> float:
    """Pairing ``<f, mu>`` as a plain left-to-right sum over the support.

    The summation order is fixed (ascending support index, no tree
    reduction) so repeated evaluations are bitwise reproducible.

    Raises
    ------
    ValueError
        If the evaluator returns a non-finite value; the offending state is
        named in the message.
    """
    ev = f.evaluator if isinstance(f, TestFunction) else f
    acc = 0.0
    for state, w in zip(mu.support, mu.weights):
        v = float(ev(state))
        if not math.isfinite(v):
            raise ValueError(f"test function returned non-finite value {v!r} at state {state!r}")
        acc += float(w) * v
    return acc


def total_mass(mu: DiscreteMeasure) -> float:
    """Mass functional ``<m, mu>`` with the same fixed summation order."""
    acc = 0.0
    for state, w in zip(mu.support, mu.weights):
        acc += float(w) * state.mass
    return acc


def bl_distance(mu: DiscreteMeasure, nu: DiscreteMeasure,
                fs: Sequence[TestFunction]) -> float:
    """Finite-family surrogate for the weak-convergence distance.

    Returns ``max_f |<f, mu> - <f, nu>|`` over the given family.  For a fixed
    family this is a pseudometric: symmetric, non-negative, and satisfies the
    triangle inequality exactly.
    """
    if len(fs) == 0:
        raise ValueError("test-function family must be non-empty")
    return max(abs(integrate(f, mu) - integrate(f, nu)) for f in fs)


# ---------------------------------------------------------------------------
# Serialization: CSV rows (time, mass, label, attr_0.., weight) and JSON.
# ---------------------------------------------------------------------------

def measure_csv_header(dim: int) -> list[str]:
    return ["time", "mass", "label"] + [f"attr_{i}" for i in range(dim)] + ["weight"]


def _format_mass(mass: float, integer_mass: bool) -> str:
    if integer_mass:
        return str(int(mass))
    return repr(float(mass))


def measure_to_rows(mu: DiscreteMeasure, time: float, *, integer_mass: bool = False) -> list[list[str]]:
    """Rows for the snapshot CSV; round-trips exactly in integer-mass mode."""
    rows = []
    for state, w in zip(mu.support, mu.weights):
        row = [repr(float(time)), _format_mass(state.mass, integer_mass),
               "" if state.label is None else str(state.label)]
        row.extend(repr(a) for a in state.attributes)
        row.append(repr(float(w)))
        rows.append(row)
    return rows


def measure_from_rows(rows: Sequence[Sequence[str]], dim: int,
                      *, integer_mass: bool = False) -> tuple[float, DiscreteMeasure]:
    """Inverse of :func:`measure_to_rows` for rows sharing one time stamp."""
    if not rows:
        raise ValueError("no rows to parse")
    time = float(rows[0][0])
    support, weights = [], []
    for row in rows:
        mass = int(row[1]) if integer_mass else float(row[1])
        label = None if row[2] == "" else int(row[2])
        attrs = tuple(float(v) for v in row[3:3 + dim])
        support.append(ClusterState(mass=mass, attributes=attrs, label=label))
        weights.append(float(row[3 + dim]))
    return time, DiscreteMeasure(support, weights)


def measure_to_json(mu: DiscreteMeasure, time: float, *, integer_mass: bool = False) -> str:
    entries = []
    for state, w in zip(mu.support, mu.weights):
        entries.append({
            "mass": int(state.mass) if integer_mass else float(state.mass),
            "label": state.label,
            "attributes": list(state.attributes),
            "weight": float(w),
        })
    return json.dumps({"time": float(time), "states": entries}, sort_keys=True)


def measure_from_json(text: str) -> tuple[float, DiscreteMeasure]:
    doc = json.loads(text)
    support = [ClusterState(mass=e["mass"], attributes=tuple(e["attributes"]), label=e["label"])
               for e in doc["states"]]
    weights = [e["weight"] for e in doc["states"]]
    return float(doc["time"]), DiscreteMeasure(support, weights)
