import numpy as np
import pytest

import crtstd as cs
from crtstd.core import CLUSTER_ATE, Contrast, EstimandSpec, WeightScheme
from crtstd.inference import (JackknifeError, delta_method_se, jackknife,
                              loo_sweep, t_interval)
from crtstd.models.base import Family, ModelSpec
from crtstd.randomization import constrained, simple

from conftest import cluster_means_trial, make_trial


class TestHandExample:
    """Three clusters, no model, pi = 0.5: every quantity hand-computable.

    Cluster means and arms: (2, treated), (4, treated), (1, control).
    Deletion estimates: (4,1), (2,1), (6,0); contrast deletions (3, 1, 6).
    """

    @pytest.fixture
    def result(self):
        data = cluster_means_trial([(2, 1, 3), (4, 1, 2), (1, 0, 4)])
        return jackknife(data, simple(0.5), ModelSpec(Family.NULL), CLUSTER_ATE)

    def test_loo_estimates(self, result):
        np.testing.assert_allclose(result.loo_estimates,
                                   [[4.0, 1.0], [2.0, 1.0], [6.0, 0.0]], atol=1e-12)

    def test_sigma_hat(self, result):
        expected = np.array([[16 / 3, -4 / 3], [-4 / 3, 4 / 9]])
        np.testing.assert_allclose(result.sigma_hat, expected, atol=1e-12)

    def test_contrast_se(self, result):
        np.testing.assert_allclose(result.contrast_loo, [3.0, 1.0, 6.0], atol=1e-12)
        assert result.se_contrast == pytest.approx(np.sqrt(76 / 9), abs=1e-12)
        assert result.df == 2


class TestDegenerateCases:
    def test_zero_variance_when_arms_are_constant(self):
        # arm-mean model with zero residuals: every deletion reproduces the
        # same standardized pair
        data = cluster_means_trial([(2, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 3)])
        res = jackknife(data, simple(0.5), ModelSpec(Family.CLUSTER_LM), CLUSTER_ATE)
        assert res.se_contrast == pytest.approx(0.0, abs=1e-13)
        np.testing.assert_allclose(res.sigma_hat, np.zeros((2, 2)), atol=1e-26)

    def test_too_few_clusters(self):
        data = cluster_means_trial([(2, 1, 3), (1, 0, 3)])
        with pytest.raises(ValueError, match="at least 3"):
            jackknife(data, simple(0.5), ModelSpec(Family.NULL), CLUSTER_ATE)

    def test_single_arm_deletion_fails_for_fitted_model(self):
        # only one control cluster: deleting it leaves a single-arm sample
        data = cluster_means_trial([(2, 1, 3), (4, 1, 2), (1, 0, 4)])
        with pytest.raises(JackknifeError, match="single-arm"):
            jackknife(data, simple(0.5), ModelSpec(Family.CLUSTER_LM), CLUSTER_ATE)

    def test_null_substitution_policy_records_failures(self):
        data = cluster_means_trial([(2, 1, 3), (4, 1, 2), (1, 0, 4)])
        res = jackknife(data, simple(0.5), ModelSpec(Family.CLUSTER_LM), CLUSTER_ATE,
                        refit_policy="null")
        assert res.refit_failures == ("c2",)


class TestOrderInvariance:
    def test_sigma_invariant_to_cluster_relabeling(self, rng):
        data = make_trial(rng, m=8)
        res1 = jackknife(data, simple(0.5), ModelSpec(Family.CLUSTER_LM, adjusted=True),
                         CLUSTER_ATE)
        perm = rng.permutation(8)
        res2 = jackknife(data.subset(perm), simple(0.5),
                         ModelSpec(Family.CLUSTER_LM, adjusted=True), CLUSTER_ATE)
        np.testing.assert_allclose(res1.sigma_hat, res2.sigma_hat, atol=1e-10)
        assert res1.se_contrast == pytest.approx(res2.se_contrast, abs=1e-10)

    def test_null_jackknife_ignores_model_spec(self, rng):
        data = make_trial(rng, m=6)
        r1 = jackknife(data, simple(0.5), ModelSpec(Family.NULL), CLUSTER_ATE)
        r2 = jackknife(data, simple(0.5), ModelSpec(Family.NULL, adjusted=True),
                       CLUSTER_ATE)
        np.testing.assert_array_equal(r1.loo_estimates, r2.loo_estimates)


class TestConstrainedDeletion:
    def test_reduced_scheme_matrix_equals_reused_probabilities(self, rng):
        data = make_trial(rng, m=4)
        t = np.array([[1, 1, 0, 0], [1, 0, 1, 0], [0, 1, 1, 0], [0, 0, 1, 1],
                      [1, 0, 0, 1], [0, 1, 0, 1]])
        probs = cs.assignment_probabilities(constrained(t), data)
        for g in range(4):
            keep = [i for i in range(4) if i != g]
            reduced = t[:, keep].sum(axis=0) / t.shape[0]
            np.testing.assert_array_equal(probs[keep], reduced)


class TestTInterval:
    def test_degenerate_se(self):
        assert t_interval(1.5, 0.0, 10, 0.95) == (1.5, 1.5)

    def test_large_m_matches_normal(self):
        lo, hi = t_interval(0.0, 1.0, 100000, 0.95)
        assert hi == pytest.approx(1.959964, rel=5e-3)

    def test_m10_quantile(self):
        lo, hi = t_interval(0.0, 1.0, 10, 0.95)
        assert hi == pytest.approx(2.2621571627, abs=1e-6)
        assert lo == pytest.approx(-2.2621571627, abs=1e-6)

    def test_m30_halfwidth(self):
        lo, hi = t_interval(0.0, 2.0, 30, 0.95)
        assert hi == pytest.approx(2.0452296421 * 2, abs=1e-6)


class TestDeltaMethod:
    def test_difference_identity_matrix(self):
        assert delta_method_se(np.eye(2), 0.5, 0.4, Contrast.DIFFERENCE) == \
            pytest.approx(np.sqrt(2.0), abs=1e-15)

    def test_difference_equals_direct_jackknife(self, rng):
        data = make_trial(rng, m=9)
        res = jackknife(data, simple(0.5), ModelSpec(Family.CLUSTER_LM, adjusted=True),
                        CLUSTER_ATE)
        dm = delta_method_se(res.sigma_hat, 0.0, 0.0, Contrast.DIFFERENCE)
        assert dm == pytest.approx(res.se_contrast, abs=1e-12)

    def test_log_odds_ratio_value(self):
        got = delta_method_se(np.diag([0.01, 0.01]), 0.6, 0.4, Contrast.LOG_ODDS_RATIO)
        assert got == pytest.approx(np.sqrt(2 * 0.01 / 0.24**2), abs=1e-12)
        assert got == pytest.approx(0.5893, abs=1e-4)


class TestJackknifeCalibration:
    def test_null_model_se_tracks_sampling_variance(self):
        # iid clusters, known sampling variance of the weighted difference
        rng = np.random.default_rng(99)
        m, reps = 200, 400
        theta1, theta0 = 2.0, 0.0
        est, jk_var = [], []
        for _ in range(reps):
            a = rng.integers(0, 2, m)
            ybar = np.where(a == 1, theta1, theta0) + rng.normal(0, 1, m)
            mu1 = np.mean((a == 1) * ybar / 0.5)
            mu0 = np.mean((a == 0) * ybar / 0.5)
            est.append(mu1 - mu0)
            # leave-one-out values of the contrast, computed directly
            s1 = ((a == 1) * ybar / 0.5).sum()
            s0 = ((a == 0) * ybar / 0.5).sum()
            d = ((s1 - (a == 1) * ybar / 0.5) - (s0 - (a == 0) * ybar / 0.5)) / (m - 1)
            jk_var.append((m - 1) / m * np.sum((d - d.mean()) ** 2))
        assert np.mean(jk_var) == pytest.approx(np.var(est, ddof=1), rel=0.10)

    def test_library_jackknife_matches_direct_loo_computation(self, rng):
        # the closed-form leave-one-out values above must agree with the
        # library sweep on a concrete dataset
        data = make_trial(rng, m=12)
        res = jackknife(data, simple(0.5), ModelSpec(Family.NULL), CLUSTER_ATE)
        a, ybar, m = data.treatment, data.ybar, data.m
        s1 = ((a == 1) * ybar / 0.5).sum()
        s0 = ((a == 0) * ybar / 0.5).sum()
        d = ((s1 - (a == 1) * ybar / 0.5) - (s0 - (a == 0) * ybar / 0.5)) / (m - 1)
        np.testing.assert_allclose(res.contrast_loo, d, atol=1e-12)


class TestSweepSharing:
    def test_one_sweep_serves_both_weighting_schemes(self, rng):
        data = make_trial(rng, m=8)
        oc, _ = cs.weights(data, EstimandSpec(WeightScheme.CLUSTER))
        oi, _ = cs.weights(data, EstimandSpec(WeightScheme.INDIVIDUAL))
        sweep = loo_sweep(data, simple(0.5), ModelSpec(Family.CLUSTER_LM, adjusted=True),
                          {"c": oc, "i": oi})
        jc = jackknife(data, simple(0.5), ModelSpec(Family.CLUSTER_LM, adjusted=True),
                       CLUSTER_ATE)
        ji = jackknife(data, simple(0.5), ModelSpec(Family.CLUSTER_LM, adjusted=True),
                       EstimandSpec(WeightScheme.INDIVIDUAL))
        np.testing.assert_array_equal(sweep.mu_pairs["c"], jc.loo_estimates)
        np.testing.assert_array_equal(sweep.mu_pairs["i"], ji.loo_estimates)
