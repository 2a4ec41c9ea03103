"""Coagulation kernels and conserved quantities.

A kernel is a symmetric non-negative total merge rate ``kbar(x, y)`` plus an
offspring law producing the merged cluster ``z`` with ``m(z) = m(x) + m(y)``.
This module also provides rejection majorants dominating ``kbar``, pair
functions ``phi(x, y)`` with (sub-)conservativity classification, and the
eventually-conservative predicate used to decide the uniqueness regime of the
limit equation.

All rate and pair-function evaluations accept numpy arrays and broadcast, so
the simulator can evaluate one-cluster-against-population rows in O(n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .states import ClusterState, DiscreteMeasure


def _as_f(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# Scalar maps xi: [0, inf) -> [0, inf) used by product majorants.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerSumMap:
    """Sub-additive scalar map ``xi(s) = sum_k c_k s^(p_k)`` with c_k >= 0, p_k in [0, 1]."""

    terms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for c, p in self.terms:
            if c < 0 or not 0.0 <= p <= 1.0:
                raise ValueError(f"term (c={c}, p={p}) breaks sub-additivity")

    def __call__(self, s) -> np.ndarray:
        s = _as_f(s)
        out = np.zeros_like(s)
        for c, p in self.terms:
            if p == 0.0:
                out = out + c
            elif p == 1.0:
                out = out + c * s
            else:
                out = out + c * np.power(s, p)
        return out

    @property
    def name(self) -> str:
        return "+".join(f"{c:g}*s^{p:g}" for c, p in self.terms)


IDENTITY_MAP = PowerSumMap(((1.0, 1.0),))
SQRT_MAP = PowerSumMap(((1.0, 0.5),))


def const_map(c: float) -> PowerSumMap:
    return PowerSumMap(((float(c), 0.0),))


# ---------------------------------------------------------------------------
# Rate forms.
# ---------------------------------------------------------------------------

class RateForm:
    """Total-rate function; subclasses implement a vectorised ``value``."""

    name: str = "rate"

    def value(self, m1, a1, l1, m2, a2, l2) -> np.ndarray:
        raise NotImplementedError

    def pair_sum(self, masses, attrs, labels) -> float | None:
        """Fast ``sum_{i != j} rate(x_i, x_j)`` when structure permits, else None."""
        return None


@dataclass(frozen=True)
class ConstantRate(RateForm):
    c: float = 1.0
    name: str = field(default="constant", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(m1) * 0.0 + _as_f(m2) * 0.0 + self.c

    def pair_sum(self, masses, attrs, labels):
        n = masses.shape[0]
        return self.c * n * (n - 1)


@dataclass(frozen=True)
class AdditiveRate(RateForm):
    name: str = field(default="additive", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(m1) + _as_f(m2)

    def pair_sum(self, masses, attrs, labels):
        n = masses.shape[0]
        return 2.0 * (n - 1) * float(masses.sum())


@dataclass(frozen=True)
class MultiplicativeRate(RateForm):
    name: str = field(default="multiplicative", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(m1) * _as_f(m2)

    def pair_sum(self, masses, attrs, labels):
        s = float(masses.sum())
        return s * s - float((masses * masses).sum())


@dataclass(frozen=True)
class HomogeneousRate(RateForm):
    """Rate homogeneous of degree gamma: scaling both masses by c scales it by c^gamma."""

    gamma: float
    base: str = "product"  # (m m')^(gamma/2) or (m + m')^gamma
    name: str = field(default="homogeneous", init=False)

    def __post_init__(self):
        if self.base not in ("product", "sum"):
            raise ValueError(f"unknown homogeneous base {self.base!r}")

    def value(self, m1, a1, l1, m2, a2, l2):
        m1, m2 = _as_f(m1), _as_f(m2)
        if self.base == "product":
            return np.power(m1 * m2, 0.5 * self.gamma)
        return np.power(m1 + m2, self.gamma)

    def pair_sum(self, masses, attrs, labels):
        if self.base != "product":
            return None
        f = np.power(masses, 0.5 * self.gamma)
        s = float(f.sum())
        return s * s - float((f * f).sum())


@dataclass(frozen=True)
class BilinearRate(RateForm):
    """``kbar(x, y) = a_x^T A a_y`` on attribute vectors, A symmetric non-negative."""

    matrix: tuple[tuple[float, ...], ...]
    name: str = field(default="bilinear", init=False)

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("bilinear matrix must be square")
        if not np.array_equal(a, a.T):
            raise ValueError("bilinear matrix must be symmetric")
        if a.min() < 0:
            raise ValueError("bilinear matrix entries must be non-negative")
        object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in row) for row in a))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=float)

    def value(self, m1, a1, l1, m2, a2, l2):
        if a1 is None or a2 is None:
            raise ValueError("bilinear rate requires attribute vectors")
        a1, a2 = _as_f(a1), _as_f(a2)
        # symmetrised evaluation so kbar(x, y) == kbar(y, x) bitwise
        fwd = np.einsum("...i,ij,...j->...", a1, self.array, a2)
        bwd = np.einsum("...i,ij,...j->...", a2, self.array, a1)
        return 0.5 * (fwd + bwd)

    def pair_sum(self, masses, attrs, labels):
        s = attrs.sum(axis=0)
        total = float(s @ self.array @ s)
        diag = float(np.einsum("ni,ij,nj->", attrs, self.array, attrs))
        return total - diag


@dataclass(frozen=True)
class MinLogRate(RateForm):
    """``(m ^ m') * log(m ^ m')^(3 + eps)``, clamped to 0 where the log is negative.

    The clamp keeps the rate non-negative for masses below e; the large-mass
    tail, which drives gelation, is unchanged.
    """

    epsilon: float = 0.1
    name: str = field(default="min_log", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        s = np.minimum(_as_f(m1), _as_f(m2))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.zeros_like(s)
        mask = s > 1.0
        if mask.any():
            ls = np.log(s[mask])
            out[mask] = s[mask] * np.power(ls, 3.0 + self.epsilon)
        return out.reshape(np.shape(np.minimum(_as_f(m1), _as_f(m2))))

    def pair_sum(self, masses, attrs, labels):
        def f(s):
            return self.value(s, None, None, s, None, None)
        return pair_sum_of_min(f, masses)


@dataclass(frozen=True)
class SpatialToyRate(RateForm):
    """Spatial rate ``m_x ell(y) + m_y ell(x)`` with ``ell(x) = m_x^alpha / (1 + |a_x|^2)``.

    Dividing by the first mass and letting it diverge leaves ``ell`` of the
    other cluster, independently of the diverging cluster's position; the
    simulator tests check this limit numerically.
    """

    alpha: float = 0.5
    name: str = field(default="spatial_toy", init=False)

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")

    def ell(self, m, a) -> np.ndarray:
        m = _as_f(m)
        if a is None:
            raise ValueError("spatial rate requires attribute vectors")
        a = _as_f(a)
        return np.power(m, self.alpha) / (1.0 + (a * a).sum(axis=-1))

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(m1) * self.ell(m2, a2) + _as_f(m2) * self.ell(m1, a1)

    def pair_sum(self, masses, attrs, labels):
        ell = self.ell(masses, attrs)
        return 2.0 * (float(masses.sum()) * float(ell.sum()) - float((masses * ell).sum()))


@dataclass(frozen=True)
class CustomRate(RateForm):
    fn: Callable = field(compare=False)
    name: str = "custom"

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(self.fn(m1, a1, l1, m2, a2, l2))


def pair_sum_of_min(f: Callable[[np.ndarray], np.ndarray], masses: np.ndarray) -> float:
    """``sum_{i != j} f(min(m_i, m_j))`` via sorting, for any scalar map f."""
    n = masses.shape[0]
    if n < 2:
        return 0.0
    srt = np.sort(masses)
    counts = np.arange(n - 1, -1, -1, dtype=float)  # pairs where srt[k] is the min
    return 2.0 * float((np.asarray(f(srt), dtype=float) * counts).sum())


def pair_sum_generic(value_fn, masses, attrs, labels, block: int = 1024) -> float:
    """Blocked ``sum_{i != j} value(x_i, x_j)`` fallback for unstructured forms."""
    n = masses.shape[0]
    total = 0.0
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        m1 = masses[lo:hi, None]
        a1 = attrs[lo:hi, None, :] if attrs is not None else None
        l1 = labels[lo:hi, None] if labels is not None else None
        a2 = attrs[None, :, :] if attrs is not None else None
        l2 = labels[None, :] if labels is not None else None
        total += float(np.asarray(value_fn(m1, a1, l1, masses[None, :], a2, l2)).sum())
    diag = float(np.asarray(value_fn(masses, attrs, labels, masses, attrs, labels)).sum())
    return total - diag


# ---------------------------------------------------------------------------
# Offspring laws (deterministic placements and finite mixtures).
# ---------------------------------------------------------------------------

class Placement:
    """Deterministic child attribute/label rule; child mass is always m_x + m_y."""

    name: str = "placement"

    def child_parts(self, mx, ax, lx, my, ay, ly):
        raise NotImplementedError


def _common_label(lx, ly):
    return lx if lx == ly else None


@dataclass(frozen=True)
class DropAttributes(Placement):
    """Mass-only child: empty attribute vector."""

    name: str = field(default="drop", init=False)

    def child_parts(self, mx, ax, lx, my, ay, ly):
        return (), _common_label(lx, ly)


@dataclass(frozen=True)
class MassWeightedMean(Placement):
    """Child placed at the mass-weighted average of the parent attribute vectors."""

    name: str = field(default="mass_weighted_mean", init=False)

    def child_parts(self, mx, ax, lx, my, ay, ly):
        ax, ay = _as_f(ax), _as_f(ay)
        attrs = (mx * ax + my * ay) / (mx + my)
        return tuple(float(v) for v in attrs), _common_label(lx, ly)


@dataclass(frozen=True)
class VectorSum(Placement):
    """Child attribute vector is the component-wise sum (bilinear process)."""

    name: str = field(default="vector_sum", init=False)

    def child_parts(self, mx, ax, lx, my, ay, ly):
        attrs = _as_f(ax) + _as_f(ay)
        return tuple(float(v) for v in attrs), _common_label(lx, ly)


@dataclass(frozen=True)
class Midpoint(Placement):
    """Child placed at the plain average of the parent attribute vectors."""

    name: str = field(default="midpoint", init=False)

    def child_parts(self, mx, ax, lx, my, ay, ly):
        attrs = 0.5 * (_as_f(ax) + _as_f(ay))
        return tuple(float(v) for v in attrs), _common_label(lx, ly)


class OffspringLaw:
    """Law of the merged cluster given the parents.

    Placements must be symmetric in the parents: the event engine treats
    pairs as unordered, and the kernel axioms require the offspring measure
    to be invariant under swapping x and y.
    """

    deterministic: bool = True

    def draw(self, rng, mx, ax, lx, my, ay, ly):
        raise NotImplementedError


@dataclass(frozen=True)
class DeltaOffspring(OffspringLaw):
    """Point offspring law: the child is a deterministic function of the parents."""

    placement: Placement
    deterministic: bool = field(default=True, init=False)

    def draw(self, rng, mx, ax, lx, my, ay, ly):
        return self.placement.child_parts(mx, ax, lx, my, ay, ly)


@dataclass(frozen=True)
class MixtureOffspring(OffspringLaw):
    """Finite mixture of placements with fixed probabilities."""

    components: tuple[tuple[Placement, float], ...]
    deterministic: bool = field(default=False, init=False)

    def __post_init__(self):
        probs = [p for _, p in self.components]
        if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("mixture probabilities must be non-negative and sum to 1")

    def draw(self, rng, mx, ax, lx, my, ay, ly):
        u = rng.random()
        acc = 0.0
        for placement, p in self.components:
            acc += p
            if u <= acc:
                return placement.child_parts(mx, ax, lx, my, ay, ly)
        return self.components[-1][0].child_parts(mx, ax, lx, my, ay, ly)


# ---------------------------------------------------------------------------
# Kernel = rate + offspring.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    rate: RateForm
    offspring: OffspringLaw

    @property
    def name(self) -> str:
        return self.rate.name

    def kbar(self, x: ClusterState, y: ClusterState) -> float:
        """Total merge rate; symmetric, finite, deterministic."""
        v = float(np.asarray(self.kbar_arrays(
            x.mass, np.asarray(x.attributes) if x.attributes else None, x.label,
            y.mass, np.asarray(y.attributes) if y.attributes else None, y.label)))
        if not math.isfinite(v):
            raise ValueError(f"rate overflow for pair ({x!r}, {y!r})")
        if v < 0:
            raise ValueError(f"negative rate for pair ({x!r}, {y!r})")
        return v

    def kbar_arrays(self, m1, a1, l1, m2, a2, l2) -> np.ndarray:
        return self.rate.value(m1, a1, l1, m2, a2, l2)

    def offspring_raw(self, rng, mx, ax, lx, my, ay, ly):
        """Hot-path offspring: returns (mass, attrs tuple, label)."""
        attrs, label = self.offspring.draw(rng, mx, ax, lx, my, ay, ly)
        return mx + my, attrs, label

    def sample_offspring(self, x: ClusterState, y: ClusterState,
                         rng: np.random.Generator) -> ClusterState:
        """Draw the merged cluster; requires a positive rate for the pair."""
        if self.kbar(x, y) <= 0.0:
            raise ValueError(f"offspring law undefined at zero rate for ({x!r}, {y!r})")
        mass, attrs, label = self.offspring_raw(
            rng, x.mass, np.asarray(x.attributes, dtype=float), x.label,
            y.mass, np.asarray(y.attributes, dtype=float), y.label)
        return ClusterState(mass=mass, attributes=attrs, label=label)

    def pair_rate_sum(self, masses, attrs, labels) -> float:
        """``sum_{i != j} kbar`` over a population (fast path or blocked fallback)."""
        fast = self.rate.pair_sum(masses, attrs, labels)
        if fast is not None:
            return fast
        return pair_sum_generic(self.rate.value, masses, attrs, labels)


def kbar(kernel: KernelSpec, x: ClusterState, y: ClusterState) -> float:
    return kernel.kbar(x, y)


def sample_offspring(kernel: KernelSpec, x: ClusterState, y: ClusterState,
                     rng: np.random.Generator) -> ClusterState:
    return kernel.sample_offspring(x, y, rng)


# ---------------------------------------------------------------------------
# Majorants.
# ---------------------------------------------------------------------------

class MajorantSpec:
    """Doubly sub-conservative pair function dominating a kernel's rate."""

    name: str = "majorant"

    def value(self, m1, a1, l1, m2, a2, l2) -> np.ndarray:
        raise NotImplementedError

    def pair_sum(self, masses, attrs, labels) -> float:
        return pair_sum_generic(self.value, masses, attrs, labels)

    def single_sum(self, masses, attrs, labels, probe: ClusterState) -> float:
        """``sum_i value(x_i, probe)`` for one probe state."""
        pa = np.asarray(probe.attributes, dtype=float) if probe.attributes else None
        return float(np.asarray(self.value(
            masses, attrs, labels, probe.mass, pa, probe.label)).sum())


@dataclass(frozen=True)
class ProductMajorant(MajorantSpec):
    """``xi(m_x) xi(m_y)`` with xi continuous and sub-additive."""

    xi: PowerSumMap

    @property
    def name(self) -> str:
        return f"product[{self.xi.name}]"

    def value(self, m1, a1, l1, m2, a2, l2):
        return self.xi(_as_f(m1)) * self.xi(_as_f(m2))

    def xi_values(self, masses) -> np.ndarray:
        return self.xi(masses)

    def pair_sum(self, masses, attrs, labels):
        f = self.xi(masses)
        s = float(f.sum())
        return s * s - float((f * f).sum())


@dataclass(frozen=True)
class MinMassMajorant(MajorantSpec):
    name: str = field(default="min_mass", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        return np.minimum(_as_f(m1), _as_f(m2))

    def pair_sum(self, masses, attrs, labels):
        return pair_sum_of_min(lambda s: s, masses)


@dataclass(frozen=True)
class ExplicitMajorant(MajorantSpec):
    fn: Callable = field(compare=False)
    name: str = "explicit"

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(self.fn(m1, a1, l1, m2, a2, l2))


def majorant_value(mj: MajorantSpec, x: ClusterState, y: ClusterState) -> float:
    xa = np.asarray(x.attributes, dtype=float) if x.attributes else None
    ya = np.asarray(y.attributes, dtype=float) if y.attributes else None
    return float(np.asarray(mj.value(x.mass, xa, x.label, y.mass, ya, y.label)))


def default_majorant(kernel: KernelSpec) -> MajorantSpec | None:
    """Shipped dominating majorant for each built-in rate form, where one exists."""
    r = kernel.rate
    if isinstance(r, ConstantRate):
        return ProductMajorant(const_map(math.sqrt(r.c)))
    if isinstance(r, MultiplicativeRate):
        return ProductMajorant(IDENTITY_MAP)
    if isinstance(r, AdditiveRate):
        return ProductMajorant(PowerSumMap(((1.0, 0.0), (1.0, 1.0))))  # (1 + m)(1 + m')
    if isinstance(r, HomogeneousRate) and r.base == "product" and r.gamma <= 2.0:
        return ProductMajorant(PowerSumMap(((1.0, 0.5 * r.gamma),)))
    if isinstance(r, SpatialToyRate):
        return ProductMajorant(PowerSumMap(((1.0, 1.0), (1.0, r.alpha))))
    if isinstance(r, BilinearRate):
        # a_x^T A a_y <= c |a_x|_1 |a_y|_1 <= c (m d_scale)^2 only under a mass/attr
        # coupling; no generic product majorant is shipped for bilinear rates.
        return None
    return None


# ---------------------------------------------------------------------------
# Conserved quantities.
# ---------------------------------------------------------------------------

class StateMap:
    """Scalar function of a single cluster, vectorised over populations."""

    name: str = "state_map"

    def __call__(self, masses, attrs, labels) -> np.ndarray:
        raise NotImplementedError

    def at(self, x: ClusterState) -> float:
        xa = np.asarray(x.attributes, dtype=float) if x.attributes else None
        return float(np.asarray(self(x.mass, xa, x.label)))


@dataclass(frozen=True)
class OneMap(StateMap):
    name: str = field(default="one", init=False)

    def __call__(self, masses, attrs, labels):
        return _as_f(masses) * 0.0 + 1.0


@dataclass(frozen=True)
class InverseMassMap(StateMap):
    """Bounded map ``1 / (1 + m)``."""

    name: str = field(default="inverse_mass", init=False)

    def __call__(self, masses, attrs, labels):
        return 1.0 / (1.0 + _as_f(masses))


@dataclass(frozen=True)
class AttrGaussMap(StateMap):
    """Bounded attribute function ``exp(-|a|^2)`` (1 when there are no attributes)."""

    name: str = field(default="attr_gauss", init=False)

    def __call__(self, masses, attrs, labels):
        if attrs is None:
            return _as_f(masses) * 0.0 + 1.0
        a = _as_f(attrs)
        return np.exp(-(a * a).sum(axis=-1))


class QuantityForm:
    name: str = "quantity"

    def value(self, m1, a1, l1, m2, a2, l2) -> np.ndarray:
        raise NotImplementedError

    def pair_sum(self, masses, attrs, labels) -> float | None:
        return None

    def single_sum(self, masses, attrs, labels, probe: ClusterState) -> float | None:
        return None


@dataclass(frozen=True)
class ZeroForm(QuantityForm):
    name: str = field(default="zero", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(m1) * 0.0 + _as_f(m2) * 0.0

    def pair_sum(self, masses, attrs, labels):
        return 0.0

    def single_sum(self, masses, attrs, labels, probe):
        return 0.0


@dataclass(frozen=True)
class MassTimesEll(QuantityForm):
    """``phi(x, y) = m(x) ell(y)``: conservative in the first argument."""

    ell: StateMap

    @property
    def name(self) -> str:
        return f"mass_times_ell[{self.ell.name}]"

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(m1) * self.ell(m2, a2, l2)

    def pair_sum(self, masses, attrs, labels):
        ell = np.asarray(self.ell(masses, attrs, labels), dtype=float)
        return float(masses.sum()) * float(ell.sum()) - float((masses * ell).sum())

    def single_sum(self, masses, attrs, labels, probe):
        return float(masses.sum()) * self.ell.at(probe)


@dataclass(frozen=True)
class MassProduct(QuantityForm):
    name: str = field(default="mass_product", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(m1) * _as_f(m2)

    def pair_sum(self, masses, attrs, labels):
        s = float(masses.sum())
        return s * s - float((masses * masses).sum())

    def single_sum(self, masses, attrs, labels, probe):
        return float(masses.sum()) * probe.mass


@dataclass(frozen=True)
class BilinearForm(QuantityForm):
    """``phi(x, y) = a_x^T M a_y`` for a (not necessarily symmetric) matrix M."""

    matrix: tuple[tuple[float, ...], ...]
    name: str = field(default="bilinear", init=False)

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("bilinear matrix must be square")
        object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in row) for row in a))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=float)

    def value(self, m1, a1, l1, m2, a2, l2):
        if a1 is None or a2 is None:
            raise ValueError("bilinear quantity requires attribute vectors")
        return np.einsum("...i,ij,...j->...", _as_f(a1), self.array, _as_f(a2))

    def pair_sum(self, masses, attrs, labels):
        s = attrs.sum(axis=0)
        return float(s @ self.array @ s) - float(np.einsum("ni,ij,nj->", attrs, self.array, attrs))

    def single_sum(self, masses, attrs, labels, probe):
        s = attrs.sum(axis=0)
        return float(s @ self.array @ np.asarray(probe.attributes, dtype=float))


@dataclass(frozen=True)
class MinMassForm(QuantityForm):
    name: str = field(default="min_mass", init=False)

    def value(self, m1, a1, l1, m2, a2, l2):
        return np.minimum(_as_f(m1), _as_f(m2))

    def pair_sum(self, masses, attrs, labels):
        return pair_sum_of_min(lambda s: s, masses)

    def single_sum(self, masses, attrs, labels, probe):
        return float(np.minimum(masses, probe.mass).sum())


@dataclass(frozen=True)
class CustomForm(QuantityForm):
    fn: Callable = field(compare=False)
    name: str = "custom"

    def value(self, m1, a1, l1, m2, a2, l2):
        return _as_f(self.fn(m1, a1, l1, m2, a2, l2))


@dataclass(frozen=True)
class ConservedQuantity:
    """Pair function with classification flags set only by a classifier run."""

    form: QuantityForm
    is_conservative: bool | None = None
    is_sub_conservative: bool | None = None
    is_doubly_conservative: bool | None = None

    @property
    def name(self) -> str:
        return self.form.name

    def value(self, x: ClusterState, y: ClusterState) -> float:
        xa = np.asarray(x.attributes, dtype=float) if x.attributes else None
        ya = np.asarray(y.attributes, dtype=float) if y.attributes else None
        v = float(np.asarray(self.form.value(x.mass, xa, x.label, y.mass, ya, y.label)))
        if not math.isfinite(v):
            raise ValueError(f"pair function not finite at ({x!r}, {y!r})")
        return v

    def pair_sum(self, masses, attrs, labels) -> float:
        fast = self.form.pair_sum(masses, attrs, labels)
        if fast is not None:
            return fast
        return pair_sum_generic(self.form.value, masses, attrs, labels)

    def single_sum(self, masses, attrs, labels, probe: ClusterState) -> float:
        fast = self.form.single_sum(masses, attrs, labels, probe)
        if fast is not None:
            return fast
        pa = np.asarray(probe.attributes, dtype=float) if probe.attributes else None
        return float(np.asarray(self.form.value(
            masses, attrs, labels, probe.mass, pa, probe.label)).sum())

    def with_flags_from(self, report: "ClassificationReport") -> "ConservedQuantity":
        return replace(
            self,
            is_conservative=report.conservative,
            is_sub_conservative=report.sub_conservative,
            is_doubly_conservative=report.doubly_conservative,
        )


def phi_value(q: ConservedQuantity, x: ClusterState, y: ClusterState) -> float:
    return q.value(x, y)


# ---------------------------------------------------------------------------
# Classification (sampling falsifier) and the eventually-conservative check.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Counterexample:
    x: ClusterState
    y: ClusterState
    q: ClusterState
    z: ClusterState
    delta: float


@dataclass
class ClassificationReport:
    """Outcome of a sampling run checking (sub-)conservativity conditions.

    The booleans mean "no counterexample found at this sample size": the
    conditions quantify over the whole space, so this is a falsifier, not a
    prover.
    """

    n_samples: int
    n_checked: int
    n_zero_rate: int
    tol: float
    eq_first_violations: list[Counterexample]
    sub_first_violations: list[Counterexample]
    eq_second_violations: list[Counterexample]
    sub_second_violations: list[Counterexample]
    eq_first_passes: int = 0
    sub_first_passes: int = 0
    eq_second_passes: int = 0
    sub_second_passes: int = 0

    @property
    def conservative(self) -> bool:
        return self.n_checked > 0 and not self.eq_first_violations

    @property
    def sub_conservative(self) -> bool:
        return self.n_checked > 0 and not self.sub_first_violations

    @property
    def doubly_conservative(self) -> bool:
        return self.conservative and not self.eq_second_violations

    @property
    def doubly_sub_conservative(self) -> bool:
        return self.sub_conservative and not self.sub_second_violations

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_checked": self.n_checked,
            "n_zero_rate": self.n_zero_rate,
            "conservative": self.conservative,
            "sub_conservative": self.sub_conservative,
            "doubly_conservative": self.doubly_conservative,
            "doubly_sub_conservative": self.doubly_sub_conservative,
            "violations": {
                "eq_first": len(self.eq_first_violations),
                "sub_first": len(self.sub_first_violations),
                "eq_second": len(self.eq_second_violations),
                "sub_second": len(self.sub_second_violations),
            },
        }


def classify_quantity(q: ConservedQuantity, kernel: KernelSpec,
                      sampler: Callable[[np.random.Generator], ClusterState],
                      n_samples: int, tol: float,
                      rng: np.random.Generator | None = None,
                      max_counterexamples: int = 10) -> ClassificationReport:
    """Sample triples (x, y, probe) and offspring z, checking additivity of the pair function.

    For each triple the first-argument conditions compare ``phi(z, q)``
    against ``phi(x, q) + phi(y, q)`` (equality within ``tol`` for
    conservative, ``<=`` for sub-conservative); the second-argument
    conditions mirror them.  Pairs with zero merge rate are vacuous (the
    offspring law conditions there on a null measure) and are counted
    separately.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = ClassificationReport(
        n_samples=n_samples, n_checked=0, n_zero_rate=0, tol=tol,
        eq_first_violations=[], sub_first_violations=[],
        eq_second_violations=[], sub_second_violations=[])

    def record(lst, x, y, probe, z, delta):
        if len(lst) < max_counterexamples:
            lst.append(Counterexample(x, y, probe, z, delta))

    for _ in range(n_samples):
        x, y, probe = sampler(rng), sampler(rng), sampler(rng)
        if not isinstance(x, ClusterState):
            raise ValueError(f"sampler produced invalid state {x!r}")
        if kernel.kbar(x, y) <= 0.0:
            report.n_zero_rate += 1
            continue
        z = kernel.sample_offspring(x, y, rng)
        report.n_checked += 1
        d1 = q.value(z, probe) - q.value(x, probe) - q.value(y, probe)
        d2 = q.value(probe, z) - q.value(probe, x) - q.value(probe, y)
        if abs(d1) <= tol:
            report.eq_first_passes += 1
        else:
            record(report.eq_first_violations, x, y, probe, z, d1)
        if d1 <= tol:
            report.sub_first_passes += 1
        else:
            record(report.sub_first_violations, x, y, probe, z, d1)
        if abs(d2) <= tol:
            report.eq_second_passes += 1
        else:
            record(report.eq_second_violations, x, y, probe, z, d2)
        if d2 <= tol:
            report.sub_second_passes += 1
        else:
            record(report.sub_second_violations, x, y, probe, z, d2)
    return report


def measure_sampler(mu: DiscreteMeasure) -> Callable[[np.random.Generator], ClusterState]:
    """Sampler drawing i.i.d. states from a probability measure's support."""
    weights = mu.weights / mu.total_weight()

    def draw(rng: np.random.Generator) -> ClusterState:
        idx = rng.choice(len(mu.support), p=weights)
        return mu.support[int(idx)]

    return draw


def integer_mass_sampler(max_mass: int) -> Callable[[np.random.Generator], ClusterState]:
    def draw(rng: np.random.Generator) -> ClusterState:
        return ClusterState(mass=int(rng.integers(1, max_mass + 1)))

    return draw


@dataclass
class EventuallyConservativeReport:
    """Check of the uniqueness-regime hypotheses on a finite state grid.

    ``d_values[i]`` integrates the pair function in its second argument
    against the initial measure; ``inside[i]`` marks the sub-level set at
    threshold R.  Condition (a): ``kbar <= c_bound * phi`` on all grid pairs.
    Condition (b): ``kbar == phi`` on pairs outside the sub-level square.
    """

    grid: tuple[ClusterState, ...]
    R: float
    c_bound: float
    d_values: np.ndarray
    inside: np.ndarray
    bound_holds: bool
    equal_outside_holds: bool
    bound_violations: list[tuple[int, int, float, float]]
    outside_violations: list[tuple[int, int, float, float]]
    phi_symmetric: bool
    max_asymmetry: float

    @property
    def passes(self) -> bool:
        return self.bound_holds and self.equal_outside_holds

    def summary(self) -> dict:
        return {
            "R": self.R,
            "c_bound": self.c_bound,
            "inside_count": int(self.inside.sum()),
            "bound_holds": self.bound_holds,
            "equal_outside_holds": self.equal_outside_holds,
            "bound_violations": len(self.bound_violations),
            "outside_violations": len(self.outside_violations),
            "phi_symmetric": self.phi_symmetric,
            "passes": self.passes,
        }


def eventually_conservative_check(kernel: KernelSpec, q: ConservedQuantity,
                                  mu0: DiscreteMeasure, grid: Sequence[ClusterState],
                                  R: float, c_bound: float, tol: float = 1e-9,
                                  max_violations: int = 20) -> EventuallyConservativeReport:
    if len(grid) == 0:
        raise ValueError("grid must be non-empty")
    grid = tuple(grid)
    n = len(grid)
    d_values = np.array([
        sum(float(w) * q.value(x, y) for y, w in zip(mu0.support, mu0.weights))
        for x in grid
    ])
    inside = d_values <= R

    kb = np.empty((n, n))
    ph = np.empty((n, n))
    for i, x in enumerate(grid):
        for j, y in enumerate(grid):
            kb[i, j] = kernel.kbar(x, y)
            ph[i, j] = q.value(x, y)

    bound_viol: list[tuple[int, int, float, float]] = []
    outside_viol: list[tuple[int, int, float, float]] = []
    for i in range(n):
        for j in range(n):
            if kb[i, j] > c_bound * ph[i, j] + tol:
                if len(bound_viol) < max_violations:
                    bound_viol.append((i, j, kb[i, j], ph[i, j]))
            if not (inside[i] and inside[j]):
                if abs(kb[i, j] - ph[i, j]) > tol:
                    if len(outside_viol) < max_violations:
                        outside_viol.append((i, j, kb[i, j], ph[i, j]))

    max_asym = float(np.abs(ph - ph.T).max()) if n else 0.0
    bound_holds = bool(np.all(kb <= c_bound * ph + tol))
    out_mask = ~(inside[:, None] & inside[None, :])
    equal_outside = bool(np.all(np.abs(kb - ph)[out_mask] <= tol)) if out_mask.any() else True

    return EventuallyConservativeReport(
        grid=grid, R=R, c_bound=c_bound, d_values=d_values, inside=inside,
        bound_holds=bound_holds, equal_outside_holds=equal_outside,
        bound_violations=bound_viol, outside_violations=outside_viol,
        phi_symmetric=max_asym <= tol, max_asymmetry=max_asym)


# ---------------------------------------------------------------------------
# Named builders used by the CLI config layer.
# ---------------------------------------------------------------------------

_STATE_MAPS = {
    "one": OneMap(),
    "inverse_mass": InverseMassMap(),
    "attr_gauss": AttrGaussMap(),
}


def state_map_by_name(name: str) -> StateMap:
    try:
        return _STATE_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown state map {name!r} (choices: {sorted(_STATE_MAPS)})")


def build_kernel(name: str, params: dict) -> KernelSpec:
    """Construct a built-in kernel by name with its default offspring law."""
    if name == "constant":
        return KernelSpec(ConstantRate(float(params.get("c", 1.0))), DeltaOffspring(DropAttributes()))
    if name == "additive":
        return KernelSpec(AdditiveRate(), DeltaOffspring(DropAttributes()))
    if name == "multiplicative":
        return KernelSpec(MultiplicativeRate(), DeltaOffspring(DropAttributes()))
    if name == "homogeneous":
        rate = HomogeneousRate(gamma=float(params["gamma"]), base=str(params.get("base", "product")))
        return KernelSpec(rate, DeltaOffspring(DropAttributes()))
    if name == "min_log":
        return KernelSpec(MinLogRate(epsilon=float(params.get("epsilon", 0.1))),
                          DeltaOffspring(DropAttributes()))
    if name == "bilinear":
        return KernelSpec(BilinearRate(matrix=params["matrix"]), DeltaOffspring(VectorSum()))
    if name == "spatial_toy":
        return KernelSpec(SpatialToyRate(alpha=float(params.get("alpha", 0.5))),
                          DeltaOffspring(MassWeightedMean()))
    raise ValueError(f"unknown kernel name {name!r}")


def build_quantity(name: str, params: dict) -> ConservedQuantity:
    if name == "zero":
        return ConservedQuantity(ZeroForm())
    if name == "mass_times_ell":
        return ConservedQuantity(MassTimesEll(state_map_by_name(params.get("ell", "one"))))
    if name == "mass_product":
        return ConservedQuantity(MassProduct())
    if name == "bilinear":
        return ConservedQuantity(BilinearForm(matrix=params["matrix"]))
    if name == "min_mass":
        return ConservedQuantity(MinMassForm())
    raise ValueError(f"unknown conserved-quantity name {name!r}")


def build_majorant(name: str, kernel: KernelSpec, params: dict) -> MajorantSpec | None:
    if name == "none":
        return None
    if name == "auto":
        return default_majorant(kernel)
    if name == "min_mass":
        return MinMassMajorant()
    if name == "product":
        terms = params.get("xi_terms")
        if terms is None:
            raise ValueError("product majorant requires xi_terms")
        return ProductMajorant(PowerSumMap(tuple((float(c), float(p)) for c, p in terms)))
    raise ValueError(f"unknown majorant {name!r}")
