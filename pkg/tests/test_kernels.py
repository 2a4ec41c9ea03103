import itertools
import math

import numpy as np
import pytest

from coagsim.kernels import (
    MinMassForm,
    ConservedQuantity,
    CustomForm,
    KernelSpec,
    MassProduct,
    MassTimesEll,
    MinMassMajorant,
    OneMap,
    ProductMajorant,
    SQRT_MAP,
    ZeroForm,
    build_kernel,
    build_quantity,
    classify_quantity,
    default_majorant,
    eventually_conservative_check,
    integer_mass_sampler,
    kbar,
    majorant_value,
    phi_value,
    sample_offspring,
)
from coagsim.states import ClusterState, DiscreteMeasure

RNG = np.random.default_rng(2024)


def all_mass_kernels():
    return [
        build_kernel("constant", {"c": 1.0}),
        build_kernel("additive", {}),
        build_kernel("multiplicative", {}),
        build_kernel("homogeneous", {"gamma": 1.5}),
        build_kernel("min_log", {"epsilon": 0.1}),
    ]


def random_mass_state(rng):
    return ClusterState(mass=float(rng.uniform(0.2, 60.0)))


def random_spatial_state(rng):
    return ClusterState(mass=float(rng.uniform(0.2, 30.0)),
                        attributes=tuple(rng.uniform(-2, 2, size=2)))


def random_vector_state(rng):
    v = rng.uniform(0.0, 5.0, size=2)
    v[rng.integers(0, 2)] += 0.1  # keep the mass positive
    return ClusterState(mass=float(v.sum()), attributes=tuple(v))


class TestKbar:
    def test_multiplicative(self):
        k = build_kernel("multiplicative", {})
        assert kbar(k, ClusterState(mass=2), ClusterState(mass=3)) == 6.0

    def test_constant(self):
        k = build_kernel("constant", {"c": 1.0})
        assert kbar(k, ClusterState(mass=5), ClusterState(mass=0.5)) == 1.0

    def test_bilinear_orthogonal_vectors(self):
        k = build_kernel("bilinear", {"matrix": ((1.0, 0.0), (0.0, 1.0))})
        x = ClusterState(mass=1, attributes=(1.0, 0.0))
        y = ClusterState(mass=1, attributes=(0.0, 1.0))
        assert kbar(k, x, y) == 0.0

    def test_symmetry_on_random_pairs(self):
        kernels = all_mass_kernels()
        for _ in range(10_000):
            x, y = random_mass_state(RNG), random_mass_state(RNG)
            for k in kernels:
                assert k.kbar(x, y) == k.kbar(y, x)

    def test_symmetry_spatial_and_bilinear(self):
        spatial = build_kernel("spatial_toy", {"alpha": 0.5})
        bil = build_kernel("bilinear", {"matrix": ((1.0, 0.5), (0.5, 2.0))})
        for _ in range(10_000):
            xs, ys = random_spatial_state(RNG), random_spatial_state(RNG)
            assert spatial.kbar(xs, ys) == spatial.kbar(ys, xs)
            xv, yv = random_vector_state(RNG), random_vector_state(RNG)
            assert bil.kbar(xv, yv) == bil.kbar(yv, xv)

    def test_min_log_clamps_below_e(self):
        k = build_kernel("min_log", {"epsilon": 0.5})
        assert kbar(k, ClusterState(mass=1), ClusterState(mass=50)) == 0.0
        assert kbar(k, ClusterState(mass=0.3), ClusterState(mass=0.4)) == 0.0
        m = 10.0
        expected = m * math.log(m) ** 3.5
        assert kbar(k, ClusterState(mass=m), ClusterState(mass=20)) == pytest.approx(expected)

    @pytest.mark.parametrize("c", [2.0, 3.0, 10.0])
    @pytest.mark.parametrize("base", ["product", "sum"])
    def test_homogeneity(self, c, base):
        gamma = 1.3
        k = build_kernel("homogeneous", {"gamma": gamma, "base": base})
        for _ in range(200):
            x, y = random_mass_state(RNG), random_mass_state(RNG)
            cx = ClusterState(mass=c * x.mass)
            cy = ClusterState(mass=c * y.mass)
            assert k.kbar(cx, cy) == pytest.approx(c ** gamma * k.kbar(x, y), rel=1e-12)


class TestOffspring:
    def test_mass_only_child(self):
        k = build_kernel("constant", {})
        z = sample_offspring(k, ClusterState(mass=2), ClusterState(mass=3),
                             np.random.default_rng(0))
        assert z.mass == 5
        assert z.attributes == ()

    def test_mass_weighted_placement(self):
        k = build_kernel("spatial_toy", {})
        x = ClusterState(mass=1, attributes=(0.0, 2.0))
        y = ClusterState(mass=3, attributes=(4.0, -2.0))
        z = sample_offspring(k, x, y, np.random.default_rng(0))
        assert z.mass == 4
        assert z.attributes == (3.0, -1.0)  # (1*p + 3*q) / 4

    def test_bilinear_vector_sum(self):
        k = build_kernel("bilinear", {"matrix": ((0.0, 1.0), (1.0, 0.0))})
        x = ClusterState(mass=1, attributes=(1.0, 0.0))
        y = ClusterState(mass=1, attributes=(0.0, 1.0))
        z = sample_offspring(k, x, y, np.random.default_rng(0))
        assert z.attributes == (1.0, 1.0)
        assert z.mass == 2

    def test_zero_rate_pair_rejected(self):
        k = build_kernel("bilinear", {"matrix": ((1.0, 0.0), (0.0, 1.0))})
        x = ClusterState(mass=1, attributes=(1.0, 0.0))
        y = ClusterState(mass=1, attributes=(0.0, 1.0))
        with pytest.raises(ValueError, match="zero rate"):
            sample_offspring(k, x, y, np.random.default_rng(0))

    def test_mass_additivity_exact_integer(self):
        k = build_kernel("multiplicative", {})
        rng = np.random.default_rng(5)
        for _ in range(2000):
            mx, my = int(rng.integers(1, 1000)), int(rng.integers(1, 1000))
            z = sample_offspring(k, ClusterState(mass=mx), ClusterState(mass=my), rng)
            assert z.mass - mx - my == 0


class TestMajorants:
    def test_identity_product(self):
        mj = ProductMajorant(xi=__import__("coagsim.kernels", fromlist=["IDENTITY_MAP"]).IDENTITY_MAP)
        assert majorant_value(mj, ClusterState(mass=2), ClusterState(mass=3)) == 6.0

    def test_min_form(self):
        assert majorant_value(MinMassMajorant(), ClusterState(mass=2), ClusterState(mass=5)) == 2.0

    def test_sqrt_product(self):
        mj = ProductMajorant(xi=SQRT_MAP)
        assert majorant_value(mj, ClusterState(mass=4), ClusterState(mass=9)) == pytest.approx(6.0)

    def test_domination_for_shipped_pairings(self):
        for k in all_mass_kernels():
            mj = default_majorant(k)
            if mj is None:
                continue
            for _ in range(10_000):
                x, y = random_mass_state(RNG), random_mass_state(RNG)
                assert k.kbar(x, y) <= majorant_value(mj, x, y) * (1 + 1e-12)

    def test_spatial_domination(self):
        k = build_kernel("spatial_toy", {"alpha": 0.5})
        mj = default_majorant(k)
        for _ in range(10_000):
            x, y = random_spatial_state(RNG), random_spatial_state(RNG)
            assert k.kbar(x, y) <= majorant_value(mj, x, y) * (1 + 1e-12)

    def test_product_majorant_is_doubly_sub_conservative(self):
        mj = ProductMajorant(xi=SQRT_MAP)
        q = ConservedQuantity(CustomForm(fn=mj.value, name="sqrt_product"))
        k = build_kernel("constant", {})
        rep = classify_quantity(q, k, random_mass_state, 4000, tol=1e-12,
                                rng=np.random.default_rng(8))
        assert rep.doubly_sub_conservative
        assert not rep.conservative


class TestPhiValue:
    def test_mass_product(self):
        q = build_quantity("mass_product", {})
        assert phi_value(q, ClusterState(mass=2), ClusterState(mass=3)) == 6.0

    def test_zero(self):
        q = build_quantity("zero", {})
        assert phi_value(q, ClusterState(mass=9), ClusterState(mass=2)) == 0.0

    def test_mass_times_unit_ell(self):
        q = build_quantity("mass_times_ell", {"ell": "one"})
        assert phi_value(q, ClusterState(mass=7), ClusterState(mass=123)) == 7.0


def brute_force_min_mass_witness(max_mass=5):
    """Enumerate integer triples looking for strict sub-additivity of min-mass."""
    witnesses = []
    for mx, my, mq in itertools.product(range(1, max_mass + 1), repeat=3):
        lhs = min(mx + my, mq)
        rhs = min(mx, mq) + min(my, mq)
        assert lhs <= rhs  # sub-conservative everywhere
        if lhs < rhs:
            witnesses.append((mx, my, mq))
    return witnesses


class TestClassification:
    def test_mass_product_doubly_conservative(self):
        q = build_quantity("mass_product", {})
        k = build_kernel("multiplicative", {})
        rep = classify_quantity(q, k, integer_mass_sampler(50), 10_000, tol=0.0,
                                rng=np.random.default_rng(0))
        assert rep.doubly_conservative
        assert rep.n_checked == 10_000
        assert not rep.eq_first_violations and not rep.eq_second_violations

    def test_min_mass_sub_but_not_conservative(self):
        witnesses = brute_force_min_mass_witness()
        assert (1, 1, 1) in witnesses  # min(2,1)=1 < min(1,1)+min(1,1)=2
        q = build_quantity("min_mass", {})
        k = build_kernel("constant", {})
        rep = classify_quantity(q, k, integer_mass_sampler(5), 10_000, tol=0.0,
                                rng=np.random.default_rng(1))
        assert rep.sub_conservative
        assert not rep.conservative
        assert any(c.delta < 0 for c in rep.eq_first_violations)

    def test_mass_squared_not_sub_conservative(self):
        q = ConservedQuantity(CustomForm(fn=lambda m1, a1, l1, m2, a2, l2: np.asarray(m1, dtype=float) ** 2,
                                         name="mass_squared"))
        k = build_kernel("constant", {})
        rep = classify_quantity(q, k, integer_mass_sampler(5), 10_000, tol=0.0,
                                rng=np.random.default_rng(2))
        assert not rep.sub_conservative
        # the (1, 1) pair is the canonical witness: (1+1)^2 = 4 > 1 + 1
        x = y = ClusterState(mass=1)
        z = ClusterState(mass=2)
        assert q.value(z, x) - q.value(x, x) - q.value(y, x) == 2.0

    def test_mass_times_ell_first_argument_conservative(self):
        for k in all_mass_kernels():
            for ell in ("one", "inverse_mass"):
                q = build_quantity("mass_times_ell", {"ell": ell})
                rep = classify_quantity(q, k, integer_mass_sampler(20), 2000, tol=1e-12,
                                        rng=np.random.default_rng(3))
                assert rep.conservative, (k.name, ell)

    def test_flags_set_from_report(self):
        q = build_quantity("mass_product", {})
        k = build_kernel("multiplicative", {})
        rep = classify_quantity(q, k, integer_mass_sampler(10), 500, tol=0.0,
                                rng=np.random.default_rng(4))
        flagged = q.with_flags_from(rep)
        assert flagged.is_conservative and flagged.is_doubly_conservative
        assert q.is_conservative is None  # original untouched

    def test_requires_at_least_one_sample(self):
        q = build_quantity("zero", {})
        k = build_kernel("constant", {})
        with pytest.raises(ValueError):
            classify_quantity(q, k, integer_mass_sampler(5), 0, tol=0.0)


class TestEventuallyConservative:
    def test_multiplicative_kernel_with_mass_product(self):
        k = build_kernel("multiplicative", {})
        q = build_quantity("mass_product", {})
        mu0 = DiscreteMeasure.delta(ClusterState(mass=1))
        grid = [ClusterState(mass=m) for m in range(1, 11)]
        rep = eventually_conservative_check(k, q, mu0, grid, R=3.0, c_bound=1.0)
        assert rep.passes
        assert rep.bound_holds and rep.equal_outside_holds
        assert rep.phi_symmetric

    def test_constant_kernel_fails_outside_d3(self):
        k = build_kernel("constant", {"c": 1.0})
        q = build_quantity("mass_product", {})
        mu0 = DiscreteMeasure.delta(ClusterState(mass=1))
        grid = [ClusterState(mass=m) for m in range(1, 11)]
        rep = eventually_conservative_check(k, q, mu0, grid, R=3.0, c_bound=1.0)
        assert not rep.equal_outside_holds
        assert list(rep.d_values) == [float(m) for m in range(1, 11)]
        assert rep.inside.sum() == 3  # D_3 = masses {1, 2, 3}
        # oracle: direct enumeration over the 10x10 grid
        expected = {(i, j) for i in range(10) for j in range(10)
                    if not (i < 3 and j < 3) and abs(1.0 - (i + 1) * (j + 1)) > 1e-9}
        found = {(i, j) for i, j, _, _ in rep.outside_violations}
        assert found <= expected and len(found) > 0

    def test_bilinear_kernel_self_conservative(self):
        mat = ((1.0, 0.5), (0.5, 2.0))
        k = build_kernel("bilinear", {"matrix": mat})
        q = build_quantity("bilinear", {"matrix": mat})
        mu0 = DiscreteMeasure.delta(ClusterState(mass=1, attributes=(1.0, 0.0)))
        grid = [ClusterState(mass=float(a + b), attributes=(float(a), float(b)))
                for a in range(3) for b in range(3) if a + b > 0]
        rep = eventually_conservative_check(k, q, mu0, grid, R=2.0, c_bound=1.0)
        assert rep.equal_outside_holds
        assert rep.bound_holds

    def test_empty_grid_rejected(self):
        k = build_kernel("constant", {})
        q = build_quantity("zero", {})
        with pytest.raises(ValueError):
            eventually_conservative_check(k, q, DiscreteMeasure.empty(), [], 1.0, 1.0)


class TestSpatialLimitStructure:
    def test_rate_over_first_mass_converges_to_ell(self):
        """kbar((p, n), (s, o)) / n approaches ell(s, o), uniformly in p.

        The remainder is m(s,o) * ell(p, n) / n = O(n^(alpha-1)); the check
        verifies monotone decay at that rate across n in {1e2, 1e3, 1e4}.
        """
        alpha = 0.5
        k = build_kernel("spatial_toy", {"alpha": alpha})
        rate = k.rate
        target = ClusterState(mass=4.0, attributes=(0.5, -0.5))
        ell_target = float(rate.ell(np.asarray(target.mass), np.asarray(target.attributes)))
        errs = []
        for n in (1e2, 1e3, 1e4):
            worst = 0.0
            for p in ((0.0, 0.0), (3.0, -1.0), (-2.0, 2.0)):
                big = ClusterState(mass=n, attributes=p)
                worst = max(worst, abs(k.kbar(big, target) / n - ell_target))
            errs.append(worst)
        assert errs[0] > errs[1] > errs[2]
        decay = (1e4 / 1e2) ** (alpha - 1)
        assert errs[2] <= errs[0] * decay * 1.5
        # the limit does not depend on the position of the diverging cluster
        for n in (1e3, 1e4):
            vals = [k.kbar(ClusterState(mass=n, attributes=p), target) / n
                    for p in ((0.0, 0.0), (3.0, -1.0), (-2.0, 2.0))]
            assert max(vals) - min(vals) <= 4.0 * n ** (alpha - 1)


class TestPairSums:
    def _pop(self, rng, n=200, dim=0):
        masses = rng.uniform(0.5, 20, size=n)
        attrs = rng.uniform(-2, 2, size=(n, dim)) if dim else None
        return masses, attrs, None

    def test_fast_paths_match_bruteforce(self):
        rng = np.random.default_rng(11)
        masses, _, _ = self._pop(rng)
        brute = {}
        for k in all_mass_kernels():
            total = 0.0
            for i in range(len(masses)):
                for j in range(len(masses)):
                    if i != j:
                        total += float(k.kbar_arrays(masses[i], None, None, masses[j], None, None))
            assert k.pair_rate_sum(masses, None, None) == pytest.approx(total, rel=1e-10)

    def test_quantity_sums_match_bruteforce(self):
        rng = np.random.default_rng(12)
        masses, attrs, _ = self._pop(rng, n=120, dim=2)
        quantities = [
            build_quantity("mass_product", {}),
            build_quantity("min_mass", {}),
            build_quantity("mass_times_ell", {"ell": "inverse_mass"}),
            build_quantity("bilinear", {"matrix": ((1.0, 0.2), (0.3, 1.0))}),
        ]
        probe = ClusterState(mass=3.0, attributes=(0.5, 0.5))
        for q in quantities:
            pair = 0.0
            single = 0.0
            for i in range(len(masses)):
                xi = ClusterState(mass=masses[i], attributes=tuple(attrs[i]))
                single += q.value(xi, probe)
                for j in range(len(masses)):
                    if i != j:
                        xj = ClusterState(mass=masses[j], attributes=tuple(attrs[j]))
                        pair += q.value(xi, xj)
            assert q.pair_sum(masses, attrs, None) == pytest.approx(pair, rel=1e-9), q.name
            assert q.single_sum(masses, attrs, None, probe) == pytest.approx(single, rel=1e-9), q.name


class TestBuilders:
    def test_asymmetric_bilinear_matrix_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            build_kernel("bilinear", {"matrix": ((1.0, 2.0), (0.0, 1.0))})

    def test_unknown_names(self):
        with pytest.raises(ValueError):
            build_kernel("frobnicate", {})
        with pytest.raises(ValueError):
            build_quantity("frobnicate", {})
