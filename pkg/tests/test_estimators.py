import numpy as np
import pytest

import spillscale as ss
from spillscale import harness
from spillscale.design import (draw_treatments, extend_uniform_overlap,
                               incidence, scaling_clusters, singleton_partition)
from spillscale.estimators import (EstimatorUndefinedError, emp_cov, exposure,
                                   hajek, hajek_weights, ipw_ht, ols,
                                   ols_weights, saturation,
                                   saturation_indicators, shrinkage,
                                   variance_ci)
from spillscale.geometry import fit_interference_constant
from spillscale.oracle import enumerate_assignments, exact_expectation
from spillscale.outcomes import realize

from conftest import line_space


def saturated_outcome_sum(outcomes, space, partition, h, p):
    """The unbiased comparison sum: observed outcomes replaced by the pure
    potential outcomes inside the saturation indicators."""
    n = space.n
    y1 = realize(outcomes, np.ones(n, dtype=np.int8))
    y0 = realize(outcomes, np.zeros(n, dtype=np.int8))
    phi = incidence(space, partition, h).phi

    def fn(b):
        d = np.asarray(b)[partition.assignment]
        sat, dis = saturation_indicators(space, d, h)
        return float(np.sum(y1 * sat / p ** phi - y0 * dis / (1 - p) ** phi) / n)

    return fn


class TestIpwHt:
    def test_single_treated_unit(self):
        space = ss.build_space([[0.0]])
        part = singleton_partition(1)
        rep = ipw_ht(np.array([3.0]), np.array([1]), space, part, 1.0, 0.5)
        assert rep.estimate == pytest.approx(6.0)

    def test_single_cluster_all_treated(self):
        space = line_space(5)
        part = scaling_clusters(space, 100.0)
        Y = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        rep = ipw_ht(Y, np.ones(5, dtype=int), space, part, 2.0, 0.5)
        assert rep.estimate == pytest.approx(2.0 * Y.mean())

    def test_mixed_draw_drops_impure_units(self):
        space = line_space(2, spacing=5.0)
        part = singleton_partition(2)
        Y = np.array([10.0, -4.0])
        rep = ipw_ht(Y, np.array([1, 0]), space, part, 1.0, 0.5)
        # both units pure at h=1 (neighborhoods are singletons)
        assert rep.estimate == pytest.approx((10.0 / 0.5 + 4.0 / 0.5) / 2)

    def test_unbiased_for_saturated_sum(self, small_exact_instance):
        space, outcomes, _, part, g = small_exact_instance
        enum = enumerate_assignments(part, 0.5)
        fn = saturated_outcome_sum(outcomes, space, part, g, 0.5)
        res = exact_expectation(fn, enum)
        assert res.p_defined == pytest.approx(1.0, abs=1e-12)
        assert res.mean == pytest.approx(outcomes.theta, abs=1e-10)

    def test_exact_bias_bound(self, small_exact_instance):
        space, outcomes, _, part, g = small_exact_instance
        p = 0.5
        enum = enumerate_assignments(part, p)
        counts = incidence(space, part, g)

        def ht(b):
            d = np.asarray(b)[part.assignment]
            Y = realize(outcomes, d)
            return ipw_ht(Y, d, space, part, g, p).estimate

        mean = exact_expectation(ht, enum).mean
        k1 = fit_interference_constant(
            outcomes.A, space, 1.0, s_grid=sorted({g, 1.0, 2.0, 5.0, 10.0}))
        bound = 2 * k1 * g ** -1.0 / (p * (1 - p)) ** counts.phi_max
        assert abs(mean - outcomes.theta) <= bound


class TestHajek:
    def test_location_invariance_constant_outcomes(self):
        space = line_space(4, spacing=3.0)
        part = singleton_partition(4)
        rep = hajek(np.full(4, 7.7), np.array([1, 0, 1, 0]), space, part, 1.0, 0.5)
        assert rep.estimate == pytest.approx(0.0, abs=1e-12)

    def test_one_saturated_one_dissaturated(self):
        space = line_space(2, spacing=5.0)
        part = singleton_partition(2)
        Y = np.array([4.0, 1.5])
        rep = hajek(Y, np.array([1, 0]), space, part, 1.0, 0.5)
        assert rep.estimate == pytest.approx(4.0 - 1.5)

    def test_scale_equivariance(self):
        space = line_space(6, spacing=4.0)
        part = singleton_partition(6)
        d = np.array([1, 0, 1, 1, 0, 0])
        rng = np.random.default_rng(0)
        Y = rng.normal(size=6)
        base = hajek(Y, d, space, part, 1.0, 0.5).estimate
        scaled = hajek(3.5 * Y, d, space, part, 1.0, 0.5).estimate
        assert scaled == pytest.approx(3.5 * base)

    def test_undefined_when_one_group_empty(self):
        space = line_space(3, spacing=4.0)
        part = singleton_partition(3)
        with pytest.raises(EstimatorUndefinedError, match="dissaturated"):
            hajek(np.ones(3), np.ones(3, dtype=int), space, part, 1.0, 0.5)

    def test_weights_reproduce_estimate(self):
        space = line_space(6, spacing=4.0)
        part = singleton_partition(6)
        d = np.array([1, 0, 1, 1, 0, 0])
        Y = np.linspace(-2, 2, 6)
        w = hajek_weights(d, space, part, 1.0, 0.5)
        assert w @ Y == pytest.approx(hajek(Y, d, space, part, 1.0, 0.5).estimate)

    def test_smaller_bias_than_ht_in_simulation(self):
        space, outcomes, guess = harness.build_population(400, 7 + 400)
        h = ss.scaling_rule(400, 1.0)
        part = scaling_clusters(space, h)
        cell = harness.simulate_design(space, outcomes, guess, part, h, 0.5,
                                       2000, 7, ["ht", "hajek"])
        ht = cell.estimates["ht"]
        hj = cell.estimates["hajek"]
        bias_ht = abs(np.nanmean(ht) - outcomes.theta)
        bias_hj = abs(np.nanmean(hj) - outcomes.theta)
        assert bias_hj < bias_ht


class TestExposure:
    def _two_cluster_setup(self):
        space = ss.build_space(np.array([[0.0], [1.0], [10.0], [11.0]]))
        part = scaling_clusters(space, 1.0)
        ext = extend_uniform_overlap(space, part, 9.0)
        return space, part, ext

    def test_all_ones_and_all_zeros(self):
        _, part, ext = self._two_cluster_setup()
        assert np.all(exposure(part, ext, np.array([1, 1])).T == 1.0)
        assert np.all(exposure(part, ext, np.array([0, 0])).T == 0.0)

    def test_half_exposure(self):
        _, part, ext = self._two_cluster_setup()
        T = exposure(part, ext, np.array([1, 0]))
        assert np.all(T.T == 0.5)
        assert T.phi_used == 2

    def test_rejects_nonuniform_overlap(self):
        space = ss.build_space(np.array([[0.0], [1.0], [10.0], [11.0]]))
        part = scaling_clusters(space, 1.0)
        base = incidence(space, part, 9.0)
        fake = ss.ExtendedNeighborhoods(s=9.0, extra=[np.empty(0)] * 4,
                                        phi_target=2, incidence=base.incidence)
        with pytest.raises(ValueError, match="uniform overlap"):
            exposure(part, fake, np.array([1, 0]))


class TestOls:
    def test_exact_linear_fit(self):
        T = np.array([0.0, 0.5, 1.0, 0.5])
        assert ols(3.0 * T, T).estimate == pytest.approx(3.0, abs=1e-12)

    def test_constant_outcomes(self):
        T = np.array([0.0, 0.5, 1.0])
        assert ols(np.full(3, 9.9), T).estimate == pytest.approx(0.0, abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        T = rng.uniform(size=12)
        Y = rng.normal(size=12)
        assert ols(Y + 123.4, T).estimate == pytest.approx(
            ols(Y, T).estimate, abs=1e-9)

    def test_degenerate_exposure(self):
        with pytest.raises(EstimatorUndefinedError, match="variance"):
            ols(np.array([1.0, 2.0]), np.array([0.5, 0.5]))

    def test_weights_reproduce_estimate(self):
        rng = np.random.default_rng(4)
        T = rng.uniform(size=9)
        Y = rng.normal(size=9)
        assert ols_weights(T) @ Y == pytest.approx(ols(Y, T).estimate)


class TestShrinkage:
    def test_scaled_exposure_identity(self):
        # singleton clusters make A_hat = kappa * incidence/phi reproduce
        # exactly T_guess = kappa * T, so shrink = ols * strength / kappa
        space = line_space(6, spacing=4.0)
        part = singleton_partition(6)
        ext = extend_uniform_overlap(space, part, 1.0)
        draw = draw_treatments(part, 0.5, seed=3)
        T = exposure(part, ext, draw.b)
        kappa = 2.5
        A_hat = kappa * ext.incidence.astype(float) / ext.phi_target
        guess = ss.GuessMatrix(A_hat=A_hat, strength=abs(A_hat.sum()) / 6)
        rng = np.random.default_rng(5)
        Y = rng.normal(size=6)
        got = shrinkage(Y, T, draw.d, guess).estimate
        want = ols(Y, T).estimate * (A_hat.sum() / 6) / kappa
        assert got == pytest.approx(want, abs=1e-10)

    def test_weak_instrument_error(self):
        space = line_space(4, spacing=4.0)
        part = singleton_partition(4)
        ext = extend_uniform_overlap(space, part, 1.0)
        draw = draw_treatments(part, 0.5, seed=1)
        T = exposure(part, ext, draw.b)
        guess = ss.GuessMatrix(A_hat=np.zeros((4, 4)), strength=1.0)
        with pytest.raises(EstimatorUndefinedError, match="first stage"):
            shrinkage(np.ones(4), T, draw.d, guess)


class TestSaturation:
    def test_everyone_treated_hits_grid_top(self):
        space = line_space(5)
        prof = saturation(space, np.ones(5, dtype=int), [1.0, 2.0, 8.0])
        assert np.all(prof.s_tilde == 8.0)

    def test_untreated_neighbor_caps_the_size(self):
        # q=1: radius equals the size; unit 0's nearest neighbor sits at 3,
        # so the largest grid size excluding it is 2.5
        space = ss.build_space(np.array([[0.0], [3.0], [4.0]]))
        prof = saturation(space, np.array([1, 0, 1]), [2.5, 3.5])
        assert prof.s_tilde[0] == pytest.approx(2.5)
        # unit 2's untreated neighbor is at distance 1: only the floor is pure
        assert prof.s_tilde[2] == prof.grid[0]

    def test_single_cluster_always_pure(self):
        space = line_space(4)
        part = scaling_clusters(space, 100.0)
        for seed in range(3):
            d = draw_treatments(part, 0.5, seed).d
            prof = saturation(space, d, [1.0, 4.0, 9.0])
            assert np.all(prof.s_tilde == 9.0)

    def test_floor_is_always_defined(self):
        space = line_space(4, spacing=2.0)
        d = np.array([1, 0, 1, 0])
        prof = saturation(space, d, [10.0])
        assert prof.grid[0] > 0
        assert np.all(prof.s_tilde >= prof.grid[0])

    def test_refinement_never_decreases(self):
        rng = np.random.default_rng(8)
        space = ss.build_space(rng.uniform(0, 10, size=(20, 2)))
        d = (rng.uniform(size=20) < 0.5).astype(int)
        coarse = saturation(space, d, [2.0, 8.0])
        fine = saturation(space, d, [1.0, 2.0, 4.0, 8.0, 16.0])
        matched = np.searchsorted(fine.grid, coarse.s_tilde)
        assert np.all(fine.s_tilde >= coarse.s_tilde - 1e-12)
        assert matched.min() >= 0


class TestVarianceCi:
    def test_zero_outcomes_zero_variance(self):
        space = line_space(4, spacing=3.0)
        part = singleton_partition(4)
        Y = np.zeros(4)
        T = np.array([1.0, 0.0, 1.0, 0.0])
        res = variance_ci(Y, T.astype(int), T, 0.0, space, part, 1.0, 1.0, 0.5,
                          weights=np.full(4, 0.25))
        assert res.variance_hat == pytest.approx(0.0, abs=1e-15)
        assert res.ci[1] == res.ci[2] == 0.0

    def test_identity_graph_reduces_to_independent_sum(self):
        # singleton clusters spaced beyond the inflated radius: the
        # dependency graph is diagonal
        space = line_space(5, spacing=10.0)
        part = singleton_partition(5)
        rng = np.random.default_rng(2)
        Y = rng.normal(size=5)
        d = np.array([1, 0, 1, 0, 1])
        T = d.astype(float)
        w = np.full(5, 1.0 / 5)
        theta = 1.3
        res = variance_ci(Y, d, T, theta, space, part, 2.0, 1.0, 0.5, weights=w)
        e = w * (Y - Y.mean() - theta * (T - 0.5))
        assert res.variance_hat == pytest.approx(float(np.sum(e ** 2)), abs=1e-14)

    def test_ci_brackets_estimate(self):
        space, outcomes, _ = harness.build_population(80, 3)
        h = ss.scaling_rule(80, 1.0)
        part = scaling_clusters(space, h)
        draw = draw_treatments(part, 0.5, seed=2)
        Y = realize(outcomes, draw.d)
        rep = hajek(Y, draw.d, space, part, h, 0.5)
        counts = incidence(space, part, h)
        T = (counts.incidence @ draw.b) / counts.phi
        res = variance_ci(Y, draw.d, T, rep.estimate, space, part, h, 1.0, 0.5,
                          estimator="hajek")
        level, lo, hi = res.ci
        assert level == 0.95
        assert lo <= rep.estimate <= hi
        assert res.variance_hat >= 0.0

    def test_epsilon_window_enforced(self):
        space = line_space(4, spacing=3.0)
        part = singleton_partition(4)
        with pytest.raises(ValueError, match="epsilon"):
            variance_ci(np.ones(4), np.ones(4, dtype=int), np.ones(4), 0.0,
                        space, part, 1.0, 0.1, 0.5, weights=np.ones(4) / 4)

    def test_estimator_name_required_without_weights(self):
        space = line_space(4, spacing=3.0)
        part = singleton_partition(4)
        with pytest.raises(ValueError, match="weights or estimator"):
            variance_ci(np.ones(4), np.ones(4, dtype=int), np.ones(4), 0.0,
                        space, part, 1.0, 1.0, 0.5)


class TestEmpCov:
    def test_matches_numpy_population_covariance(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=50)
        y = rng.normal(size=50)
        assert emp_cov(x, y) == pytest.approx(float(np.cov(x, y, bias=True)[0, 1]))
