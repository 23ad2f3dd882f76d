import numpy as np
import pytest

import crtstd as cs
from crtstd.core import (CLUSTER_ATE, Contrast, EstimandSpec, EstimationError,
                         WeightScheme)
from crtstd.models.base import Family, ModelSpec
from crtstd.standardize import StandardizedMeans, contrast, standardized_means

from conftest import cluster_means_trial, make_trial


def eq5_reference(data, omega, probs):
    """Unadjusted two-sample weighted estimator, written out independently."""
    w = omega / omega.sum()
    a = data.treatment
    mu1 = float(np.sum(w * (a == 1) * data.ybar / probs))
    mu0 = float(np.sum(w * (a == 0) * data.ybar / (1 - probs)))
    return mu1, mu0


class TestNullModelEqualsUnadjusted:
    def test_hand_example(self):
        # 4 clusters, pi = 0.5, cluster weights: treated means (3, 5), control (1, 3)
        data = cluster_means_trial([(3, 1, 2), (5, 1, 3), (1, 0, 2), (3, 0, 3)])
        probs = np.full(4, 0.5)
        model = cs.fit(ModelSpec(Family.NULL), data)
        omega, _ = cs.weights(data, CLUSTER_ATE)
        sm = standardized_means(data, omega, probs, model)
        assert sm.mu1 == pytest.approx(4.0, abs=1e-15)
        assert sm.mu0 == pytest.approx(2.0, abs=1e-15)
        assert contrast(sm, CLUSTER_ATE).estimate == pytest.approx(2.0, abs=1e-15)

    def test_hundred_random_datasets(self, rng):
        for _ in range(100):
            m = int(rng.integers(4, 12))
            data = make_trial(rng, m=m)
            pi = float(rng.uniform(0.2, 0.8))
            probs = np.full(m, pi)
            scheme = rng.choice([WeightScheme.CLUSTER, WeightScheme.INDIVIDUAL])
            omega, _ = cs.weights(data, EstimandSpec(scheme))
            model = cs.fit(ModelSpec(Family.NULL), data)
            sm = standardized_means(data, omega, probs, model)
            mu1, mu0 = eq5_reference(data, omega, probs)
            assert sm.mu1 == pytest.approx(mu1, abs=1e-14)
            assert sm.mu0 == pytest.approx(mu0, abs=1e-14)


class TestResidualCancellation:
    def test_unadjusted_cluster_lm_equals_arm_means(self, rng):
        # with a constant assignment probability, within-arm residuals cancel
        for _ in range(6):
            m = int(rng.integers(6, 14))
            data = make_trial(rng, m=m)
            pi = float(rng.uniform(0.2, 0.8))
            probs = np.full(m, pi)
            model = cs.fit(ModelSpec(Family.CLUSTER_LM), data)
            omega, _ = cs.weights(data, CLUSTER_ATE)
            sm = standardized_means(data, omega, probs, model)
            a = data.treatment
            assert sm.mu1 == pytest.approx(data.ybar[a == 1].mean(), abs=1e-10)
            assert sm.mu0 == pytest.approx(data.ybar[a == 0].mean(), abs=1e-10)


class TestWeightScheme:
    def test_scaling_invariance(self, rng):
        data = make_trial(rng, m=8)
        probs = np.full(8, 0.5)
        model = cs.fit(ModelSpec(Family.CLUSTER_LM, adjusted=True), data)
        omega = data.sizes.astype(float)
        s1 = standardized_means(data, omega, probs, model)
        s2 = standardized_means(data, 7.25 * omega, probs, model)
        assert s1.mu1 == pytest.approx(s2.mu1, abs=1e-14)
        assert s1.mu0 == pytest.approx(s2.mu0, abs=1e-14)

    def test_specialized_schemes_share_general_path(self, rng):
        # cluster / individual schemes are exactly the general path at
        # omega = 1 and omega = N
        data = make_trial(rng, m=6)
        probs = np.full(6, 0.5)
        model = cs.fit(ModelSpec(Family.LMM, adjusted=True), data)
        for scheme, raw in ((WeightScheme.CLUSTER, np.ones(6)),
                            (WeightScheme.INDIVIDUAL, data.sizes.astype(float))):
            omega, _ = cs.weights(data, EstimandSpec(scheme))
            a = standardized_means(data, omega, probs, model)
            b = standardized_means(data, raw, probs, model)
            assert (a.mu1, a.mu0) == (b.mu1, b.mu0)

    def test_equal_sizes_makes_schemes_identical(self, rng):
        # constant size cannot itself be a covariate (collinear with the intercept)
        data = make_trial(rng, m=6, sizes=np.full(6, 5))
        probs = np.full(6, 0.5)
        model = cs.fit(ModelSpec(Family.CLUSTER_LM, adjusted=True, include_size=False),
                       data)
        oc, _ = cs.weights(data, EstimandSpec(WeightScheme.CLUSTER))
        oi, _ = cs.weights(data, EstimandSpec(WeightScheme.INDIVIDUAL))
        mc = standardized_means(data, oc, probs, model)
        mi = standardized_means(data, oi, probs, model)
        assert mc.mu1 == mi.mu1 and mc.mu0 == mi.mu0


class TestContrastEvaluation:
    def test_log_odds_ratio(self):
        sm = StandardizedMeans(0.6, 0.4, np.empty(0), np.empty(0))
        got = contrast(sm, EstimandSpec(contrast=Contrast.LOG_ODDS_RATIO))
        assert got.estimate == pytest.approx(np.log(2.25), abs=1e-12)

    def test_domain_error_propagates(self):
        sm = StandardizedMeans(1.4, 0.4, np.empty(0), np.empty(0))
        with pytest.raises(EstimationError):
            contrast(sm, EstimandSpec(contrast=Contrast.LOG_ODDS_RATIO))

    def test_nonfinite_contribution_names_cluster(self, rng):
        data = make_trial(rng, m=4)
        model = cs.fit(ModelSpec(Family.NULL), data)
        omega, _ = cs.weights(data, CLUSTER_ATE)
        bad_pred = np.zeros(4)
        bad_pred[2] = np.inf
        with pytest.raises(EstimationError, match="c2"):
            standardized_means(data, omega, np.full(4, 0.5), model,
                               predictions=(bad_pred, np.zeros(4)))


class TestDoubleRobustnessOfForm:
    def test_arbitrary_fixed_predictions_leave_no_bias(self):
        # any fixed prediction function, however wrong, leaves the estimator
        # unbiased when the assignment probability is correct
        rng = np.random.default_rng(2468)
        truth = 2.0
        model = cs.fit(ModelSpec(Family.NULL),
                       cluster_means_trial([(0, 1, 2), (0, 0, 2), (1, 1, 2), (1, 0, 2)]))
        ests = []
        for _ in range(600):
            m = 24
            data = make_trial(rng, m=m, treat=rng.integers(0, 2, m))
            if len(set(data.treatment)) < 2:
                continue
            data_shift = data
            probs = np.full(m, 0.5)
            omega, _ = cs.weights(data_shift, CLUSTER_ATE)
            n = data_shift.sizes.astype(float)
            junk1 = 3.0 + np.cbrt(n) + 0.2 * data_shift.h_matrix[:, 0]
            junk0 = -1.0 + np.log(n)
            sm = standardized_means(data_shift, omega, probs, model,
                                    predictions=(junk1, junk0))
            # conftest outcomes carry a 0.5 treatment effect plus covariate terms
            ests.append(sm.mu1 - sm.mu0)
        se = np.std(ests, ddof=1) / np.sqrt(len(ests))
        assert np.mean(ests) == pytest.approx(0.5, abs=4 * se)


class TestNullFamily:
    def test_null_predictions_are_zero(self, rng):
        data = make_trial(rng, m=5)
        model = cs.fit(ModelSpec(Family.NULL), data)
        np.testing.assert_array_equal(cs.predict_cluster_means(model, data, 1),
                                      np.zeros(5))
        np.testing.assert_array_equal(cs.predict_cluster_means(model, data, 0),
                                      np.zeros(5))


class TestEstimatePipeline:
    def test_full_pipeline_runs(self, rng):
        data = make_trial(rng, m=10)
        res = cs.estimate(data, cs.simple(0.5),
                          ModelSpec(Family.LMM, adjusted=True), CLUSTER_ATE)
        assert res.ci[0] < res.estimate.estimate < res.ci[1]
        assert res.df == 9
        assert res.sigma_hat.shape == (2, 2)
        assert res.icc is not None

    def test_stage_annotation_on_error(self, rng):
        data = make_trial(rng, m=10, treat=np.ones(10, dtype=int))
        with pytest.raises(cs.ValidationError, match=r"\[validate\]"):
            cs.estimate(data, cs.simple(0.5), ModelSpec(Family.NULL), CLUSTER_ATE)
