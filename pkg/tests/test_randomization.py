import numpy as np
import pytest

from crtstd.randomization import (PositivityError, assignment_probabilities,
                                  balanced_constrained_check, constrained,
                                  load_scheme_matrix, pair_matched, simple,
                                  stratified)

from conftest import make_trial


class TestSimpleAndStratified:
    def test_simple_constant_vector(self, rng):
        data = make_trial(rng, m=4)
        np.testing.assert_array_equal(assignment_probabilities(simple(0.5), data),
                                      np.full(4, 0.5))

    def test_simple_probability_range_enforced(self):
        with pytest.raises(ValueError):
            simple(0.0)
        with pytest.raises(ValueError):
            simple(1.0)

    def test_pair_matched_is_half(self, rng):
        data = make_trial(rng, m=6)
        np.testing.assert_array_equal(assignment_probabilities(pair_matched(), data),
                                      np.full(6, 0.5))

    def test_stratified_lookup(self, rng):
        data = make_trial(rng, m=4, strata=["east", "west", "east", "west"])
        design = stratified({"east": 0.5, "west": 0.4})
        np.testing.assert_array_equal(assignment_probabilities(design, data),
                                      [0.5, 0.4, 0.5, 0.4])

    def test_unknown_stratum_errors(self, rng):
        data = make_trial(rng, m=4, strata=["east", "west", "east", "north"])
        with pytest.raises(ValueError, match="stratum"):
            assignment_probabilities(stratified({"east": 0.5, "west": 0.4}), data)


class TestConstrained:
    def test_symmetric_two_schemes(self, rng):
        data = make_trial(rng, m=2)
        design = constrained([[1, 0], [0, 1]])
        np.testing.assert_array_equal(assignment_probabilities(design, data), [0.5, 0.5])

    def test_column_means_and_positivity_error(self, rng):
        data = make_trial(rng, m=4)
        design = constrained([[1, 1, 0, 0], [1, 0, 1, 0], [0, 1, 1, 0]])
        with pytest.raises(PositivityError, match="c3"):
            assignment_probabilities(design, data)
        # first three columns are fine and exactly rational
        sub = constrained([[1, 1, 0], [1, 0, 1], [0, 1, 1]])
        probs = assignment_probabilities(sub, make_trial(rng, m=3))
        np.testing.assert_array_equal(probs, np.array([2, 2, 2]) / 3)

    def test_exact_rational_column_mean(self, rng):
        rng2 = np.random.default_rng(5)
        m, r = 12, 37
        t = rng2.integers(0, 2, size=(r, m))
        t[:, 0] = np.arange(r) % 2            # keep column 0 non-degenerate
        t = np.unique(t, axis=0)
        design = constrained(t)
        data = make_trial(rng, m=m)
        try:
            probs = assignment_probabilities(design, data)
        except PositivityError:
            pytest.skip("degenerate draw")
        np.testing.assert_array_equal(probs * t.shape[0],
                                      t.sum(axis=0).astype(float))

    def test_row_permutation_leaves_probabilities(self, rng):
        data = make_trial(rng, m=4)
        t = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0], [0, 1, 0, 1]])
        p1 = assignment_probabilities(constrained(t), data)
        p2 = assignment_probabilities(constrained(t[::-1]), data)
        np.testing.assert_array_equal(p1, p2)

    def test_duplicate_rows_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            constrained([[1, 0], [1, 0]])

    def test_balance_check(self):
        assert balanced_constrained_check(constrained([[1, 0], [0, 1]]))
        t = [[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0], [0, 1, 0, 1]]
        assert balanced_constrained_check(constrained(t))
        assert not balanced_constrained_check(constrained([[1, 1, 0], [1, 0, 1], [0, 1, 1]]))

    def test_column_count_must_match(self, rng):
        data = make_trial(rng, m=3)
        with pytest.raises(ValueError, match="columns"):
            assignment_probabilities(constrained([[1, 0], [0, 1]]), data)


class TestSchemeMatrixCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "schemes.csv"
        path.write_text("1,0,1\n0,1,1\n1,1,0\n")
        t = load_scheme_matrix(str(path))
        np.testing.assert_array_equal(t, [[1, 0, 1], [0, 1, 1], [1, 1, 0]])

    def test_header_flag(self, tmp_path):
        path = tmp_path / "schemes.csv"
        path.write_text("c1,c2\n1,0\n0,1\n")
        t = load_scheme_matrix(str(path), header=True)
        np.testing.assert_array_equal(t, [[1, 0], [0, 1]])

    def test_bad_entries_rejected(self, tmp_path):
        path = tmp_path / "schemes.csv"
        path.write_text("1,2\n0,1\n")
        with pytest.raises(ValueError, match="0 or 1"):
            load_scheme_matrix(str(path))
