import math

import numpy as np
import pytest
from scipy import stats

from oracles import (column_type_rates, digamma_recurrence, exact_two_object_posterior,
                     pattern_counts)
from pibp.eba import ChoiceData, EBALikelihood, full_features, log_likelihood
from pibp.experiments import figure2_tree
from pibp.fastchain import run_eba_chain
from pibp.inference import leaf_conditional
from pibp.prior import FeatureMatrix
from pibp.sampler import (FlatLikelihood, SamplerConfig, gibbs_z, ibp_collapsed_gibbs, init_state,
                          mh_pi, run_chain, sample_alpha, sample_new_columns, sample_record,
                          truncation_level)
from pibp.selftest import poisson_chisquare
from pibp.tree import parse_newick, star_tree


class FixedUniform:
    """Stand-in generator whose uniforms are a fixed value."""

    def __init__(self, u):
        self.u = u

    def random(self, *args):
        return self.u


class TiltLikelihood(FlatLikelihood):
    """log-lik = tilt * z[i, k] for one cell."""

    def __init__(self, i, k, tilt):
        self.i, self.k, self.tilt = i, k, tilt

    def log_lik(self, z, params):
        return self.tilt * float(z[self.i, self.k])


class NoBirthLikelihood(FlatLikelihood):
    """-inf whenever object 0 owns a column alone."""

    def log_lik(self, z, params):
        single = (z[0] == 1) & (z.sum(axis=0) == 1)
        return -np.inf if single.any() else 0.0


def _state(tree, bits, pi, alpha=1.0, seed=0, likelihood=None, **cfg):
    config = SamplerConfig(iterations=1, seed=seed, **cfg)
    fm = FeatureMatrix(np.array(bits, dtype=np.int8).reshape(tree.n_leaves, -1), np.array(pi))
    return init_state(tree, likelihood or FlatLikelihood(), config, features=fm, alpha=alpha)


class TestGibbsZ:
    def test_flat_acceptance_equals_leaf_conditional(self):
        tree = parse_newick("((a:0.2,b:0.2):0.8,(c:0.5,d:0.5):0.5);")
        bits = [[1], [0], [1], [0]]
        p1 = leaf_conditional(tree, [None, 0, 1, 0], 0.3, 0)
        for u, want in ((p1 - 1e-9, 1), (p1 + 1e-9, 0)):
            state = _state(tree, bits, [0.3])
            state.rng = FixedUniform(u)
            gibbs_z(state, FlatLikelihood(), 0, 0)
            got = int(state.features.bits[0, 0]) if state.n_columns else 0
            assert got == want

    def test_star_column_is_bernoulli(self):
        tree = star_tree(4)
        state = _state(tree, [[1], [0], [0], [0]], [0.35], seed=1)
        lik = FlatLikelihood()
        patterns = []
        for _ in range(20000):
            for i in (1, 2, 3):
                gibbs_z(state, lik, i, 0)
            z = state.features.bits[1:, 0]
            patterns.append(int(z[0]) * 4 + int(z[1]) * 2 + int(z[2]))
        obs = np.bincount(patterns, minlength=8)
        ones = np.array([bin(p).count("1") for p in range(8)])
        exp = 0.35 ** ones * 0.65 ** (3 - ones) * len(patterns)
        assert stats.chisquare(obs, exp).pvalue > 0.01

    def test_strong_likelihood(self):
        tree = star_tree(3)
        lik = TiltLikelihood(1, 0, 50.0)
        ones = 0
        for seed in range(2000):
            state = _state(tree, [[1], [0], [0]], [0.01], seed=seed)
            gibbs_z(state, lik, 1, 0)
            ones += int(state.features.bits[1, 0])
        assert ones / 2000 > 0.999

    def test_emptied_column_dropped(self):
        tree = star_tree(2)
        state = _state(tree, [[1, 1], [0, 1]], [0.5, 0.5])
        state.rng = FixedUniform(0.999999)
        gibbs_z(state, FlatLikelihood(), 0, 0)
        assert state.n_columns == 1
        assert len(state.caches) == 1
        state.check_caches()


class TestMhPi:
    def test_same_proposal_kept(self):
        state = _state(star_tree(3), [[1], [1], [0]], [0.4])
        mh_pi(state, 0, proposal=0.4)
        assert state.features.pi[0] == 0.4

    @pytest.mark.parametrize("prop", [-0.1, 1.2])
    def test_outside_rejected(self, prop):
        state = _state(star_tree(3), [[1], [1], [0]], [0.4])
        mh_pi(state, 0, proposal=prop)
        assert state.features.pi[0] == 0.4

    def test_star_posterior_is_beta(self):
        n, m = 6, 3
        bits = [[1]] * m + [[0]] * (n - m)
        state = _state(star_tree(n), bits, [0.5], seed=2)
        draws = []
        for it in range(60000):
            mh_pi(state, 0)
            if it % 20 == 0:
                draws.append(state.features.pi[0])
        assert stats.kstest(draws, stats.beta(m, n - m + 1).cdf).pvalue > 0.01

    def test_only_column_k_is_read(self):
        state = _state(star_tree(3), [[1, 0], [0, 1], [1, 1]], [0.4, 0.6], seed=3)
        other = state.features.bits[:, 1].copy()
        for _ in range(50):
            mh_pi(state, 0)
        np.testing.assert_array_equal(state.features.bits[:, 1], other)
        assert state.caches[0].pi == state.features.pi[0]


class TestSampleNewColumns:
    def test_flat_count_is_poisson(self):
        tree = figure2_tree(0.5)
        i = 4
        counts = []
        state = _state(tree, np.zeros((9, 0)), [], alpha=2.0, seed=4)
        for _ in range(20000):
            sample_new_columns(state, FlatLikelihood(), i)
            counts.append(state.n_columns)
        rate = 2.0 * state.rate_unit[i]
        # all other objects are present: pendant 0.5, rest 6 - 0.5
        assert rate == pytest.approx(2.0 * (digamma_recurrence(7.0) - digamma_recurrence(6.5)),
                                     abs=1e-10)
        assert poisson_chisquare(np.array(counts), rate) > 0.01

    def test_zero_pendant_never_births(self):
        tree = parse_newick("((a:0,b:0):1,c:1);")
        state = _state(tree, np.zeros((3, 0)), [], alpha=5.0)
        for _ in range(200):
            sample_new_columns(state, FlatLikelihood(), 0)
        assert state.n_columns == 0

    def test_minus_inf_likelihood_never_births(self):
        state = _state(star_tree(3), np.zeros((3, 0)), [], alpha=5.0)
        for _ in range(200):
            sample_new_columns(state, NoBirthLikelihood(), 0)
        assert state.n_columns == 0

    def test_truncation_level(self):
        assert truncation_level(0.0, 1e-10, 12) == 0
        assert truncation_level(1.0, 1e-10, 12) == 12
        assert truncation_level(0.01, 1e-10, 12) == 4


class TestSampleAlpha:
    def test_star_three_empty(self):
        state = _state(star_tree(3), np.zeros((3, 0)), [])
        assert state.alpha_rate == pytest.approx(17 / 6, abs=1e-12)
        draws = np.array([sample_alpha(state).alpha for _ in range(100000)])
        assert abs(draws.mean() - 6 / 17) < 3 * (6 / 17) / math.sqrt(draws.size)

    def test_shape_and_rate(self):
        tree = figure2_tree(0.1)
        bits = np.zeros((9, 5), dtype=np.int8)
        bits[0] = 1
        state = _state(tree, bits, [0.5] * 5, seed=5)
        rate = digamma_recurrence(4.6) - digamma_recurrence(1.0) + 1.0
        assert state.alpha_rate == pytest.approx(rate, abs=1e-10)
        draws = np.array([sample_alpha(state).alpha for _ in range(100000)])
        assert abs(draws.mean() - 6 / rate) < 3 * math.sqrt(6) / rate / math.sqrt(draws.size)


def _small_data():
    return ChoiceData(np.array([[0, 3, 1], [1, 0, 2], [2, 1, 0]]))


class TestRunChain:
    def test_reproducible(self):
        cfg = SamplerConfig(iterations=30, seed=7)
        lik = EBALikelihood(_small_data())
        tree = parse_newick("((a:0.3,b:0.3):0.7,c:1);")
        a = [sample_record(s, lik) for s in run_chain(tree, lik, cfg)]
        b = [sample_record(s, lik) for s in run_chain(tree, lik, cfg)]
        assert a == b

    def test_debug_mode_caches_and_no_empty_columns(self):
        cfg = SamplerConfig(iterations=40, seed=8, debug=True)
        lik = EBALikelihood(_small_data())
        samples = run_chain(parse_newick("((a:0.3,b:0.3):0.7,c:1);"), lik, cfg)
        for s in samples:
            assert np.all(s.features.bits.sum(axis=0) > 0)

    def test_thinning(self):
        cfg = SamplerConfig(iterations=50, burn_in=10, thin=5, seed=9)
        samples = run_chain(star_tree(3), FlatLikelihood(), cfg)
        assert [s.iteration for s in samples] == list(range(10, 50, 5))

    def test_matches_compiled_kernel(self):
        data = _small_data()
        tree = parse_newick("((a:0.3,b:0.3):0.7,c:1);")
        cfg = SamplerConfig(iterations=8000, burn_in=500, thin=10, seed=10)
        generic = run_chain(tree, EBALikelihood(data), cfg)
        fast = run_eba_chain(tree, data, SamplerConfig(iterations=8000, burn_in=500, thin=10,
                                                      seed=11))
        a = np.array([s.k_plus for s in generic])
        b = fast.k_plus
        assert stats.ks_2samp(a, b).pvalue > 0.01
        ga = np.array([s.alpha for s in generic])
        assert stats.ks_2samp(ga, fast.alpha).pvalue > 0.01


class TestIBPCollapsedGibbs:
    def test_flat_rows_poisson(self):
        cfg = SamplerConfig(iterations=20000, burn_in=100, thin=5, seed=12, alpha_init=2.0,
                            sample_alpha=False)
        samples = ibp_collapsed_gibbs(FlatLikelihood(), 4, cfg)
        rows = np.array([s.features.bits[0].sum() for s in samples])
        assert poisson_chisquare(rows, 2.0) > 0.01

    def test_matches_star_pibp(self):
        kw = dict(iterations=20000, burn_in=100, thin=10, alpha_init=1.5, sample_alpha=False)
        a = [s.k_plus for s in ibp_collapsed_gibbs(FlatLikelihood(), 4,
                                                   SamplerConfig(seed=13, **kw))]
        b = [s.k_plus for s in run_chain(star_tree(4), FlatLikelihood(),
                                         SamplerConfig(seed=14, **kw))]
        assert stats.ks_2samp(a, b).pvalue > 0.01

    def test_reproducible(self):
        cfg = SamplerConfig(iterations=20, seed=15)
        lik = EBALikelihood(_small_data())
        a = [sample_record(s, lik) for s in ibp_collapsed_gibbs(lik, 3, cfg)]
        b = [sample_record(s, lik) for s in ibp_collapsed_gibbs(lik, 3, cfg)]
        assert a == b


# --- detailed balance on an enumerable two-object problem ----------------------

TWO_WINS = np.array([[0, 5], [1, 0]])


def _unit_loglik(a, b, c):
    return log_likelihood(ChoiceData(TWO_WINS), full_features(_pattern_matrix(a, b, c)),
                          np.ones(2 + a + b + c), 0.05)


def _pattern_matrix(a, b, c):
    return np.array([[1] * a + [0] * b + [1] * c, [0] * a + [1] * b + [1] * c],
                    dtype=np.int8).reshape(2, -1)


def _empirical(tree, alpha, sweeps=10**6, blocks=10, size=16):
    counts = np.zeros((size, size, size))
    init = None
    per = sweeps // blocks
    for blk in range(blocks):
        cfg = SamplerConfig(iterations=per, thin=2, seed=100 + blk, sample_alpha=False,
                            alpha_init=alpha)
        res = run_eba_chain(tree, ChoiceData(TWO_WINS), cfg, init=init, record=True,
                            fixed_weight=1.0)
        init = res.final
        for z, _, _ in res.samples:
            a, b, c = pattern_counts(z)
            if max(a, b, c) < size:
                counts[a, b, c] += 1
    return counts / counts.sum()


class TestDetailedBalance:
    def test_ibp_two_objects(self):
        alpha = 1.5
        exact = exact_two_object_posterior(alpha / 2, alpha / 2, alpha / 2, _unit_loglik)
        emp = _empirical(None, alpha)
        assert 0.5 * np.abs(emp - exact).sum() < 0.02

    def test_pibp_two_objects(self):
        alpha, ell = 1.5, 0.5
        tree = parse_newick(f"((a:{ell},b:{ell}):{1 - ell});")
        stay = lambda p, t: (1 - p) ** t
        lam_a = column_type_rates(alpha, lambda p: stay(p, 1 - ell) * (1 - stay(p, ell))
                                  * stay(p, ell))
        lam_c = column_type_rates(alpha, lambda p: 1 - stay(p, 1 - ell)
                                  + stay(p, 1 - ell) * (1 - stay(p, ell)) ** 2)
        # every row carries Poisson(alpha) ones
        assert lam_a + lam_c == pytest.approx(alpha, abs=1e-12)
        exact = exact_two_object_posterior(lam_a, lam_a, lam_c, _unit_loglik)
        emp = _empirical(tree, alpha)
        assert 0.5 * np.abs(emp - exact).sum() < 0.02


class TestSamplerConfig:
    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(iterations=5, burn_in=5),
                                    dict(iterations=5, thin=0), dict(iterations=5, mh_c=0),
                                    dict(iterations=5, trunc_cap=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)

    def test_defaults(self):
        cfg = SamplerConfig(iterations=5)
        assert (cfg.mh_c, cfg.mh_delta, cfg.trunc_tol, cfg.trunc_cap) == (0.06, 0.08, 1e-10, 12)
