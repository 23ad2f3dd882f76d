import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crtstd.core import (ClusterRecord, Contrast, EstimandSpec, EstimationError,
                         TrialData, WeightScheme, apply_contrast,
                         contrast_gradient, summarize, validate, weights)

from conftest import make_trial


def _cluster(cid, a, y, x=None, h=(), size=-1):
    y = np.asarray(y, dtype=float)
    x = np.zeros((len(y), 0)) if x is None else np.asarray(x, dtype=float)
    return ClusterRecord(cid, a, y, x, np.asarray(h, dtype=float), size=size)


class TestValidate:
    def test_well_formed_is_clean(self, rng):
        assert validate(make_trial(rng, m=4)) == []

    def test_single_arm_detected(self):
        data = TrialData([_cluster("a", 1, [1.0]), _cluster("b", 1, [2.0])])
        assert any("no control clusters" in v for v in validate(data))

    def test_row_count_mismatch(self):
        data = TrialData([_cluster("a", 1, [1.0, 2.0], size=3), _cluster("b", 0, [2.0])])
        assert any("row count mismatch" in v for v in validate(data))

    def test_missing_values_rejected(self):
        data = TrialData([_cluster("a", 1, [1.0, np.nan]), _cluster("b", 0, [2.0])])
        assert any("missing outcome" in v for v in validate(data))

    def test_covariate_dimension_mismatch(self):
        data = TrialData([
            _cluster("a", 1, [1.0], x=[[1.0, 2.0]]),
            _cluster("b", 0, [2.0], x=[[1.0]]),
        ])
        assert any("covariate dimension" in v for v in validate(data))

    def test_bad_treatment_code(self):
        data = TrialData([_cluster("a", 2, [1.0]), _cluster("b", 0, [2.0])])
        assert any("treatment" in v for v in validate(data))

    def test_never_mutates(self, rng):
        data = make_trial(rng, m=4)
        before = data.y.copy()
        validate(data)
        np.testing.assert_array_equal(data.y, before)


class TestSummarize:
    def test_simple_means(self):
        data = TrialData([_cluster("a", 1, [1, 2, 3]), _cluster("b", 0, [0, 0, 1, 1])])
        s = summarize(data)
        assert s[0].ybar == 2.0
        assert s[1].ybar == 0.5
        assert s[0].n == 3 and s[1].a == 0

    def test_matches_direct_recomputation(self, rng):
        data = make_trial(rng, m=3)
        for rec, summ in zip(data.clusters, summarize(data)):
            assert summ.ybar == pytest.approx(float(np.mean(rec.outcomes)), abs=1e-15)
            np.testing.assert_allclose(summ.xbar, rec.covariates.mean(axis=0))

    def test_order_preserved(self, rng):
        data = make_trial(rng, m=5)
        got = [s.n for s in summarize(data)]
        assert got == [c.n for c in data.clusters]

    def test_within_cluster_permutation_invariance(self, rng):
        data = make_trial(rng, m=4)
        perm_clusters = []
        for c in data.clusters:
            order = rng.permutation(c.n)
            perm_clusters.append(ClusterRecord(c.cluster_id, c.treatment,
                                               c.outcomes[order], c.covariates[order],
                                               c.cluster_covariates))
        for s1, s2 in zip(summarize(data), summarize(TrialData(perm_clusters))):
            assert s1.ybar == pytest.approx(s2.ybar, abs=1e-12)


class TestWeights:
    def test_cluster_scheme(self, rng):
        data = make_trial(rng, m=3)
        omega, total = weights(data, EstimandSpec(WeightScheme.CLUSTER))
        np.testing.assert_array_equal(omega, [1, 1, 1])
        assert total == 3

    def test_individual_scheme(self):
        data = TrialData([_cluster("a", 1, np.zeros(10)), _cluster("b", 0, np.zeros(20)),
                          _cluster("c", 1, np.zeros(30))])
        omega, total = weights(data, EstimandSpec(WeightScheme.INDIVIDUAL))
        np.testing.assert_array_equal(omega, [10, 20, 30])
        assert total == 60

    def test_subgroup_indicator(self):
        data = TrialData([_cluster("a", 1, [0.0], h=[1.0]), _cluster("b", 0, [0.0], h=[0.0]),
                          _cluster("c", 1, [0.0], h=[1.0])])
        omega, total = weights(data, EstimandSpec(WeightScheme.SUBGROUP,
                                                  subgroup_component=0))
        np.testing.assert_array_equal(omega, [1, 0, 1])
        assert total == 2

    def test_empty_subgroup_errors(self):
        data = TrialData([_cluster("a", 1, [0.0], h=[0.0]), _cluster("b", 0, [0.0], h=[0.0])])
        with pytest.raises(ValueError, match="empty weighted population"):
            weights(data, EstimandSpec(WeightScheme.SUBGROUP))

    def test_negative_custom_weight_errors(self, rng):
        data = make_trial(rng, m=3)
        spec = EstimandSpec(WeightScheme.CUSTOM, custom_weight=lambda n, h: -1.0)
        with pytest.raises(ValueError, match="negative custom weight"):
            weights(data, spec)

    def test_schemes_coincide_iff_equal_sizes(self, rng):
        equal = make_trial(rng, m=4, sizes=np.full(4, 6))
        wc, tc = weights(equal, EstimandSpec(WeightScheme.CLUSTER))
        wi, ti = weights(equal, EstimandSpec(WeightScheme.INDIVIDUAL))
        np.testing.assert_array_equal(wc / tc, wi / ti)
        unequal = make_trial(rng, m=4, sizes=np.array([2, 3, 4, 5]))
        wc, tc = weights(unequal, EstimandSpec(WeightScheme.CLUSTER))
        wi, ti = weights(unequal, EstimandSpec(WeightScheme.INDIVIDUAL))
        assert not np.allclose(wc / tc, wi / ti)


class TestContrasts:
    def test_difference(self):
        assert apply_contrast(Contrast.DIFFERENCE, 4.0, 2.0) == 2.0

    def test_log_odds_ratio_null(self):
        assert apply_contrast(Contrast.LOG_ODDS_RATIO, 0.5, 0.5) == 0.0

    def test_log_odds_ratio_value(self):
        got = apply_contrast(Contrast.LOG_ODDS_RATIO, 0.6, 0.4)
        assert got == pytest.approx(np.log(2.25), abs=1e-12)

    def test_domain_errors(self):
        with pytest.raises(EstimationError):
            apply_contrast(Contrast.LOG_ODDS_RATIO, 1.2, 0.4)
        with pytest.raises(EstimationError):
            apply_contrast(Contrast.RATIO, 1.0, 0.0)
        with pytest.raises(EstimationError):
            apply_contrast(Contrast.LOG_RATIO, -1.0, 1.0)

    @given(x=st.floats(0.01, 0.99))
    @settings(max_examples=50, deadline=None)
    def test_null_identities(self, x):
        assert apply_contrast(Contrast.DIFFERENCE, x, x) == 0.0
        assert apply_contrast(Contrast.LOG_RATIO, x, x) == 0.0
        assert apply_contrast(Contrast.LOG_ODDS_RATIO, x, x) == 0.0
        assert apply_contrast(Contrast.RATIO, x, x) == 1.0

    @given(x=st.floats(0.05, 0.95), y=st.floats(0.05, 0.95))
    @settings(max_examples=50, deadline=None)
    def test_gradients_match_finite_differences(self, x, y):
        eps = 1e-6
        for con in Contrast:
            g = contrast_gradient(con, x, y)
            fx = (apply_contrast(con, x + eps, y) - apply_contrast(con, x - eps, y)) / (2 * eps)
            fy = (apply_contrast(con, x, y + eps) - apply_contrast(con, x, y - eps)) / (2 * eps)
            np.testing.assert_allclose(g, [fx, fy], rtol=1e-4, atol=1e-7)
