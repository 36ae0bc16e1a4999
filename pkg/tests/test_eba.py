import math

import numpy as np
import pytest
from scipy import stats

from oracles import eba_loglik_direct, eba_prob_direct
from pibp.eba import (ChoiceData, EBALikelihood, EBAParams, advantage_matrix, choice_matrix,
                      choice_prob, collapse_columns, full_features, log_likelihood, mh_weight,
                      noisy_prob, predictive_loglik, weights_for_new_columns)


def _random_instance(rng, n=None, k=None):
    n = n or int(rng.integers(2, 7))
    k = int(rng.integers(0, 6)) if k is None else k
    z = rng.integers(0, 2, (n, k)).astype(np.int8)
    z_full = full_features(z)
    w = rng.gamma(1.0, 1.0, n + k)
    return z_full, w


class TestChoiceProb:
    def test_bradley_terry_reduction(self):
        z_full = full_features(np.zeros((3, 0), dtype=np.int8))
        w = np.array([2.0, 0.5, 1.5])
        assert choice_prob(z_full, w, 0, 1) == pytest.approx(2.0 / 2.5, abs=1e-15)
        assert choice_prob(z_full, w, 2, 1) == pytest.approx(1.5 / 2.0, abs=1e-15)

    def test_symmetric_objects(self):
        z_full = full_features(np.array([[1, 0], [1, 0], [0, 1]], dtype=np.int8))
        w = np.array([0.7, 0.7, 1.0, 3.0, 2.0])
        assert choice_prob(z_full, w, 0, 1) == 0.5

    def test_no_distinguishing_features(self):
        z_full = np.array([[1, 1], [1, 1]], dtype=np.int8)
        assert choice_prob(z_full, np.array([1.0, 2.0]), 0, 1) == 0.5

    def test_complement(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            z_full, w = _random_instance(rng)
            p = choice_matrix(z_full, w)
            off = ~np.eye(p.shape[0], dtype=bool)
            np.testing.assert_allclose((p + p.T)[off], 1.0, atol=1e-14)

    def test_against_extended_precision(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            z_full, w = _random_instance(rng)
            n = z_full.shape[0]
            for i in range(n):
                for j in range(n):
                    if i != j:
                        assert choice_prob(z_full, w, i, j) == pytest.approx(
                            float(eba_prob_direct(z_full, w, i, j)), abs=1e-14)

    def test_advantage_matrix(self):
        z_full = np.array([[1, 0, 1], [0, 1, 1]], dtype=np.int8)
        d = advantage_matrix(z_full, np.array([2.0, 3.0, 5.0]))
        np.testing.assert_allclose(d, [[0.0, 2.0], [3.0, 0.0]])

    def test_same_object_rejected(self):
        with pytest.raises(ValueError):
            choice_prob(np.eye(2, dtype=np.int8), np.ones(2), 1, 1)

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            z_full, w = _random_instance(rng)
            c = float(rng.uniform(1e-3, 1e3))
            np.testing.assert_allclose(choice_matrix(z_full, c * w), choice_matrix(z_full, w),
                                       atol=1e-12)


class TestNoisyProb:
    def test_examples(self):
        assert noisy_prob(0.3, 0.0) == 0.3
        assert noisy_prob(0.3, 1.0) == 0.5
        assert noisy_prob(0.9, 0.05) == pytest.approx(0.88, abs=1e-15)

    def test_range_and_monotone(self):
        p = np.linspace(0, 1, 101)
        for eps in (0.0, 0.05, 0.5):
            q = noisy_prob(p, eps)
            assert q.min() >= eps / 2 - 1e-15 and q.max() <= 1 - eps / 2 + 1e-15
            if eps < 1:
                assert np.all(np.diff(q) > 0)

    def test_antisymmetry(self):
        p = np.linspace(0, 1, 11)
        np.testing.assert_allclose(noisy_prob(p, 0.05) + noisy_prob(1 - p, 0.05), 1.0,
                                   atol=1e-15)


class TestLogLikelihood:
    def test_single_pair(self):
        data = ChoiceData(np.array([[0, 1], [0, 0]]))
        z_full = full_features(np.zeros((2, 0), dtype=np.int8))
        w = np.array([3.0, 1.0])
        want = math.log(noisy_prob(0.75, 0.05))
        assert log_likelihood(data, z_full, w, 0.05) == pytest.approx(want, abs=1e-15)

    def test_empty_data(self):
        data = ChoiceData(np.zeros((4, 4), dtype=int))
        z_full, w = _random_instance(np.random.default_rng(3), n=4)
        assert log_likelihood(data, z_full, w, 0.05) == 0.0

    def test_zero_prob_with_count(self):
        data = ChoiceData(np.array([[0, 0], [1, 0]]))
        z_full = np.array([[1], [0]], dtype=np.int8)
        assert log_likelihood(data, z_full, np.array([1.0]), 0.0) == -np.inf

    def test_extended_precision_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            z_full, w = _random_instance(rng)
            n = z_full.shape[0]
            x = rng.integers(0, 20, (n, n))
            np.fill_diagonal(x, 0)
            eps = float(rng.uniform(0.0, 0.2))
            got = log_likelihood(ChoiceData(x), z_full, w, eps)
            assert got == pytest.approx(eba_loglik_direct(x, z_full, w, eps), abs=1e-10)

    def test_peaks_at_empirical_rate(self):
        # with two objects and unique features only, p_12 = w1 / (w1 + w2)
        rng = np.random.default_rng(5)
        z_full = full_features(np.zeros((2, 0), dtype=np.int8))
        for _ in range(30):
            x12, x21 = (int(v) for v in rng.integers(1, 50, 2))
            data = ChoiceData(np.array([[0, x12], [x21, 0]]))
            rate = x12 / (x12 + x21)
            target = (rate - 0.025) / 0.95  # noisy prob hits the empirical rate
            if not 0.0 < target < 1.0:
                continue
            ll = lambda p: log_likelihood(data, z_full, np.array([p, 1 - p]), 0.05)
            best = ll(target)
            for d in (0.01, 0.05, 0.2):
                for p in (target - d, target + d):
                    if 0.0 < p < 1.0:
                        assert ll(p) < best


class TestChoiceData:
    @pytest.mark.parametrize("wins", [[[0, -1], [1, 0]], [[1, 0], [0, 0]], [[0, 1, 0], [1, 0, 0]]])
    def test_invalid(self, wins):
        with pytest.raises(ValueError):
            ChoiceData(np.array(wins))

    def test_trials_and_without_pair(self):
        d = ChoiceData(np.array([[0, 3, 1], [2, 0, 0], [4, 5, 0]]))
        assert d.trials()[0, 1] == 5
        held = d.without_pair(0, 2)
        assert held.wins[0, 2] == 0 and held.wins[2, 0] == 0
        assert held.wins[0, 1] == 3
        assert d.wins[2, 0] == 4

    def test_csv_round_trip(self):
        d = ChoiceData(np.array([[0, 3], [2, 0]]))
        np.testing.assert_array_equal(ChoiceData.from_csv(d.to_csv()).wins, d.wins)
        np.testing.assert_array_equal(ChoiceData.from_dict(d.to_dict()).wins, d.wins)


class TestMhWeight:
    def _flat(self, n=2):
        lik = EBALikelihood(ChoiceData(np.zeros((n, n), dtype=int)))
        return lik, EBAParams(np.ones(n), np.ones(1), 0.05)

    def test_flat_stationary_exponential(self):
        lik, params = self._flat()
        z = np.array([[1], [0]], dtype=np.int8)
        rng = np.random.default_rng(6)
        draws = []
        for it in range(100000):
            params = mh_weight(lik, z, params, 2, rng)
            if it % 20 == 0:
                draws.append(params.shared_weights[0])
        assert stats.kstest(draws, "expon").pvalue > 0.01

    def test_equal_proposal_kept(self):
        lik, params = self._flat()
        out = mh_weight(lik, np.zeros((2, 1), dtype=np.int8), params, 0, None, proposal=1.0)
        assert out.unique_weights[0] == 1.0

    def test_bradley_terry_concentration(self):
        data = ChoiceData(np.array([[0, 700], [300, 0]]))
        lik = EBALikelihood(data)
        params = EBAParams(np.ones(2), np.zeros(0), 0.05)
        z = np.zeros((2, 0), dtype=np.int8)
        rng = np.random.default_rng(7)
        ps = []
        for it in range(6000):
            params = lik.propose_params(z, params, rng)
            if it >= 1000:
                w = params.unique_weights
                ps.append(w[0] / w.sum())
        # the noisy rate's MLE is 0.7, putting p_12 near (0.7 - 0.025) / 0.95
        assert abs(np.mean(ps) - 0.7) < 0.05

    def test_other_weights_untouched(self):
        lik = EBALikelihood(ChoiceData(np.array([[0, 4], [1, 0]])))
        params = EBAParams(np.array([1.0, 2.0]), np.array([0.5]), 0.05)
        out = mh_weight(lik, np.array([[1], [0]], dtype=np.int8), params, 1,
                        np.random.default_rng(0), proposal=5.0)
        assert out.unique_weights[0] == 1.0 and out.shared_weights[0] == 0.5
        assert params.unique_weights[1] == 2.0


class TestWeightsForNewColumns:
    def test_empty(self):
        assert weights_for_new_columns(0, np.random.default_rng(0)).shape == (0,)

    def test_exponential(self):
        draws = weights_for_new_columns(100000, np.random.default_rng(1))
        assert stats.kstest(draws, "expon").pvalue > 0.01

    def test_deterministic(self):
        a = weights_for_new_columns(5, np.random.default_rng(2))
        b = weights_for_new_columns(5, np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)

    def test_negative(self):
        with pytest.raises(ValueError):
            weights_for_new_columns(-1, np.random.default_rng(0))


class TestCollapseColumns:
    def test_merge(self):
        z = np.array([[1, 1], [0, 0]], dtype=np.int8)
        zc, wc = collapse_columns(z, np.array([0.3, 0.4]))
        np.testing.assert_array_equal(zc, [[1], [0]])
        assert wc[0] == pytest.approx(0.7)

    def test_drop_light(self):
        z = np.array([[1, 0], [0, 1]], dtype=np.int8)
        zc, wc = collapse_columns(z, np.array([0.05, 0.5]))
        np.testing.assert_array_equal(zc, [[0], [1]])
        np.testing.assert_array_equal(wc, [0.5])

    def test_preserves_probabilities(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = int(rng.integers(2, 6))
            z = rng.integers(0, 2, (n, 8)).astype(np.int8)
            z[:, :3] = z[:, [0]]  # force duplicates
            z_full = full_features(z)
            w = rng.uniform(0.1, 2.0, n + 8)
            zc, wc = collapse_columns(z_full, w)
            np.testing.assert_allclose(choice_matrix(zc, wc), choice_matrix(z_full, w),
                                       atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            z = rng.integers(0, 2, (4, 10)).astype(np.int8)
            w = rng.gamma(1.0, 0.2, 10)
            zc, wc = collapse_columns(z, w)
            zc2, wc2 = collapse_columns(zc, wc)
            np.testing.assert_array_equal(zc, zc2)
            np.testing.assert_allclose(wc, wc2)

    def test_canonical_order(self):
        z = np.array([[0, 1, 1], [1, 0, 1]], dtype=np.int8)
        zc, _ = collapse_columns(z, np.ones(3))
        np.testing.assert_array_equal(zc, [[1, 1, 0], [1, 0, 1]])


class TestPredictiveLoglik:
    def test_hand_mean(self):
        assert predictive_loglik([0.2, 0.4], 1, 0) == pytest.approx(math.log(0.3), abs=1e-15)

    def test_single_and_identical(self):
        one = predictive_loglik([0.35], 3, 2)
        assert one == pytest.approx(math.log(10 * 0.35**3 * 0.65**2), abs=1e-13)
        assert predictive_loglik([0.35] * 7, 3, 2) == pytest.approx(one, abs=1e-13)

    def test_empty(self):
        with pytest.raises(ValueError):
            predictive_loglik([], 1, 0)
