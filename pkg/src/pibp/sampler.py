"""Metropolis-within-Gibbs posterior sampling under the phylogenetic IBP.

The sampler is generic in the likelihood: anything implementing
:class:`LikelihoodHook` can be plugged in. Z holds only the non-zero
columns; each carries an explicit pi and a :class:`MessageCache`.

One sweep, in order: for each object i, a Gibbs update of z_ik for every
column some other object also owns (visited in random order), then a birth
move over the columns i owns alone; one MH step on each pi_k; the likelihood's own parameter
updates; a Gibbs draw of alpha.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
from scipy.special import digamma

from .inference import MessageCache, column_log_evidence, leaf_conditional
from .prior import (INNER_MH_STEPS, MH_C, MH_DELTA, FeatureMatrix, alpha_posterior_rate,
                    normal_logpdf, sample_generative, sample_new_pi)
from .tree import star_tree, total_edge_length


@dataclass
class SamplerConfig:
    iterations: int
    burn_in: int = 0
    thin: int = 1
    mh_c: float = MH_C
    mh_delta: float = MH_DELTA
    trunc_tol: float = 1e-10
    trunc_cap: int = 12
    seed: int = 0
    alpha_init: float = 1.0
    inner_mh_steps: int = INNER_MH_STEPS
    sample_alpha: bool = True
    debug: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be in [0, iterations)")
        if self.thin < 1:
            raise ValueError("thin must be positive")
        if self.mh_c <= 0 or self.mh_delta <= 0:
            raise ValueError("mh_c and mh_delta must be positive")
        if self.trunc_cap < 1:
            raise ValueError("trunc_cap must be at least 1")
        if self.alpha_init <= 0:
            raise ValueError("alpha_init must be positive")

    def keep(self, it):
        return it >= self.burn_in and (it - self.burn_in) % self.thin == 0


class LikelihoodHook(Protocol):
    """What the sampler needs from a data model.

    ``params`` is opaque to the sampler apart from the per-column
    bookkeeping calls, which keep it aligned with the columns of Z.
    """

    def log_lik(self, z: np.ndarray, params: Any) -> float: ...

    def init_params(self, n_columns: int, rng) -> Any: ...

    def params_for_new_columns(self, params: Any, k_new: int, rng) -> Any: ...

    def take_columns(self, params: Any, idx) -> Any:
        """Params of the columns ``idx`` (in that order)."""

    def propose_params(self, z: np.ndarray, params: Any, rng) -> Any: ...


class FlatLikelihood:
    """log p(X | Z) = 0; the sampler then targets the prior."""

    def log_lik(self, z, params):
        return 0.0

    def init_params(self, n_columns, rng):
        return None

    def params_for_new_columns(self, params, k_new, rng):
        return None

    def take_columns(self, params, idx):
        return None

    def propose_params(self, z, params, rng):
        return None


@dataclass
class SamplerState:
    tree: Any
    features: FeatureMatrix
    alpha: float
    params: Any
    rng: np.random.Generator
    config: SamplerConfig
    caches: list = field(default_factory=list)

    def __post_init__(self):
        tree = self.tree
        total = total_edge_length(tree)
        pendant = np.array(tree.length[: tree.n_leaves], dtype=float)
        self.pendant = pendant
        self.rest = total - pendant
        self.rate_unit = digamma(total + 1.0) - digamma(self.rest + 1.0)
        self.rate_unit[pendant == 0] = 0.0
        self.alpha_rate = alpha_posterior_rate(total)
        if not self.caches:
            self.caches = [MessageCache(tree, self.features.bits[:, k], self.features.pi[k])
                           for k in range(self.features.n_columns)]

    @property
    def n_columns(self):
        return self.features.n_columns

    def drop_column(self, likelihood, k):
        self.features.drop(k)
        del self.caches[k]
        keep = [c for c in range(self.features.n_columns + 1) if c != k]
        self.params = likelihood.take_columns(self.params, keep)

    def check_caches(self, tol=1e-10):
        """Compare every cached leaf conditional with a from-scratch pass."""
        self.features.check()
        for k, cache in enumerate(self.caches):
            if not np.array_equal(cache.bits, self.features.bits[:, k]):
                raise AssertionError(f"cache {k} bits out of sync")
            for i in range(self.tree.n_leaves):
                col = cache.bits.astype(int).tolist()
                col[i] = -1
                fresh = leaf_conditional(self.tree, col, cache.pi, i)
                if abs(fresh - cache.conditional(i)) > tol:
                    raise AssertionError(f"cache {k} stale at leaf {i}")


def init_state(tree, likelihood, config, features=None, params=None, alpha=None, rng=None):
    """Fresh state; Z is drawn from the prior with ``alpha_init`` unless given."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    alpha = config.alpha_init if alpha is None else alpha
    if features is None:
        features = sample_generative(tree, alpha, rng)
    else:
        features = features.copy()
    if params is None:
        params = likelihood.init_params(features.n_columns, rng)
    return SamplerState(tree, features, float(alpha), params, rng, config)


# --- individual updates ---------------------------------------------------


def _two_point(rng, log_p0, log_p1):
    """Sample a bit given unnormalised log probabilities of 0 and 1."""
    if log_p1 == -np.inf:
        return 0
    if log_p0 == -np.inf:
        return 1
    return int(rng.random() * (1.0 + math.exp(log_p0 - log_p1)) < 1.0)


def gibbs_z(state, likelihood, i, k):
    """Resample z_ik from its two-point conditional; drops the column if emptied."""
    cache = state.caches[k]
    p1 = cache.conditional(i)
    z = state.features.bits
    old = int(z[i, k])
    z[i, k] = 1
    ll1 = likelihood.log_lik(z, state.params)
    z[i, k] = 0
    ll0 = likelihood.log_lik(z, state.params)
    z[i, k] = old
    lp1 = (math.log(p1) if p1 > 0 else -np.inf) + ll1
    lp0 = (math.log1p(-p1) if p1 < 1 else -np.inf) + ll0
    new = _two_point(state.rng, lp0, lp1)
    if new != old:
        z[i, k] = new
        cache.flip(i, new)
        if new == 0 and not z[:, k].any():
            state.drop_column(likelihood, k)
    return state


def mh_pi(state, k, proposal=None):
    """One MH step on pi_k with the heteroscedastic Gaussian proposal.

    The anchor entry is the lowest-index one in column k. ``proposal`` fixes
    the proposed value (for testing).
    """
    cfg = state.config
    cache = state.caches[k]
    pi = cache.pi
    var = cfg.mh_c * pi * (1.0 - pi) + cfg.mh_delta
    prop = pi + math.sqrt(var) * state.rng.standard_normal() if proposal is None else proposal
    if not 0.0 < prop < 1.0:
        return state
    if prop == pi:
        return state
    tree = state.tree
    bits = cache.bits
    anchor = int(np.flatnonzero(bits)[0])
    assert bits[anchor] == 1
    m = tree.n_nodes
    scratch = (np.empty(m), np.empty(m), np.empty(m))
    args = (tree.postorder, tree.child_ptr, tree.child_idx, tree.length, tree.n_leaves,
            tree.root, bits)
    # p(z_(-i) | pi, z_i = 1) = p(z | pi) / pi
    target_old = column_log_evidence(*args, pi, *scratch) - math.log(pi)
    target_new = column_log_evidence(*args, prop, *scratch) - math.log(prop)
    var_back = cfg.mh_c * prop * (1.0 - prop) + cfg.mh_delta
    log_ratio = (target_new - target_old
                 + normal_logpdf(pi, prop, var_back) - normal_logpdf(prop, pi, var))
    if math.log(state.rng.random()) < log_ratio:
        cache.set_pi(prop)
        state.features.pi[k] = prop
    return state


def truncation_level(lam, tol, cap):
    """Smallest k with Poisson(lam) tail mass beyond k below ``tol``, capped."""
    k = 0
    pmf = math.exp(-lam)
    cdf = pmf
    while 1.0 - cdf >= tol and k < cap:
        k += 1
        pmf *= lam / k
        cdf += pmf
    return k


def _choose_count(rng, logw):
    """Index drawn with probability proportional to exp(logw)."""
    top = max(logw)
    weights = np.exp(np.asarray(logw) - top)
    cum = np.cumsum(weights)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def sample_new_columns(state, likelihood, i):
    """Birth move over the columns owned by object i alone.

    Object i's current singleton columns are removed and become the first
    candidates, keeping their parameters and pi; further candidates take
    prior draws. The count is drawn from Poisson(alpha * rate) times the
    likelihood, truncated where the Poisson tail is negligible.
    """
    cfg = state.config
    rng = state.rng
    z = state.features.bits
    n, K = z.shape
    others = z.sum(axis=0) - z[i]
    single = [k for k in range(K) if z[i, k] == 1 and others[k] == 0]
    single = [single[j] for j in rng.permutation(len(single))]
    lam = state.alpha * state.rate_unit[i]
    if lam <= 0 and not single:
        return state
    keep = [k for k in range(K) if k not in single]
    s = len(single)
    params = likelihood.take_columns(state.params, keep + single)
    old_pi = state.features.pi[single]
    old_caches = [state.caches[k] for k in single]
    state.features = FeatureMatrix(z[:, keep], state.features.pi[keep])
    state.caches = [state.caches[k] for k in keep]
    k0 = len(keep)

    kmax = max(s, truncation_level(lam, cfg.trunc_tol, cfg.trunc_cap) if lam > 0 else 0)
    ext = likelihood.params_for_new_columns(params, kmax - s, rng)
    block = np.zeros((n, kmax), dtype=np.int8)
    block[i] = 1
    z_ext = np.concatenate([state.features.bits, block], axis=1)
    logw = np.empty(kmax + 1)
    for k in range(kmax + 1):
        params_k = likelihood.take_columns(ext, range(k0 + k))
        prior = (k * math.log(lam) - math.lgamma(k + 1)) if lam > 0 else (0.0 if k == 0 else -np.inf)
        logw[k] = prior + likelihood.log_lik(z_ext[:, : k0 + k], params_k)
    if not np.isfinite(logw).any():
        raise FloatingPointError("likelihood is -inf for every candidate count")
    k_new = _choose_count(rng, logw)
    state.params = likelihood.take_columns(ext, range(k0 + k_new))
    if k_new == 0:
        return state
    reused = min(k_new, s)
    fresh = k_new - reused
    pis = old_pi[:reused]
    if fresh:
        pis = np.concatenate([pis, sample_new_pi(state.pendant[i], state.rest[i], rng, size=fresh,
                                                 steps=cfg.inner_mh_steps, c=cfg.mh_c,
                                                 delta=cfg.mh_delta)])
    state.features.append(block[:, :k_new], pis)
    state.caches.extend(old_caches[:reused])
    for k in range(reused, k_new):
        state.caches.append(MessageCache(state.tree, block[:, k], pis[k]))
    return state


def sample_alpha(state):
    """alpha | Z ~ Gamma(K+ + 1, rate) under a G(1, 1) prior."""
    shape = state.n_columns + 1.0
    state.alpha = float(state.rng.gamma(shape, 1.0 / state.alpha_rate))
    return state


def sweep(state, likelihood):
    n = state.tree.n_leaves
    for i in range(n):
        z = state.features.bits
        others = z.sum(axis=0) - z[i]
        # a fixed scan order is biased once column order correlates with type
        for k in state.rng.permutation(state.n_columns):
            if others[k] > 0:
                gibbs_z(state, likelihood, i, k)
        sample_new_columns(state, likelihood, i)
    for k in range(state.n_columns):
        mh_pi(state, k)
    state.params = likelihood.propose_params(state.features.bits, state.params, state.rng)
    if state.config.sample_alpha:
        sample_alpha(state)
    if state.config.debug:
        state.check_caches()
    return state


@dataclass
class ChainSample:
    iteration: int
    alpha: float
    features: FeatureMatrix
    params: Any
    loglik: float

    @property
    def k_plus(self):
        return self.features.n_columns


def snapshot(state, likelihood, iteration):
    z = state.features.bits
    return ChainSample(iteration, state.alpha, state.features.copy(),
                       copy.deepcopy(state.params), float(likelihood.log_lik(z, state.params)))


def run_chain(tree, likelihood, config, state=None):
    """Run ``config.iterations`` sweeps and return the retained samples."""
    if state is None:
        state = init_state(tree, likelihood, config)
    samples = []
    for it in range(config.iterations):
        sweep(state, likelihood)
        if config.keep(it):
            samples.append(snapshot(state, likelihood, it))
    return samples


# --- exchangeable baseline -----------------------------------------------


@dataclass
class IBPState:
    features: FeatureMatrix
    alpha: float
    params: Any
    rng: np.random.Generator
    config: SamplerConfig

    @property
    def n_columns(self):
        return self.features.n_columns


def ibp_sweep(state, likelihood):
    """One sweep of the collapsed IBP sampler.

    Columns shared with other objects use p(z_ik = 1) = m_-i,k / N. Columns
    owned by i alone are folded into the new-column move, keeping their
    parameters as the first candidates.
    """
    cfg = state.config
    rng = state.rng
    z = state.features.bits
    n = z.shape[0]
    lam = state.alpha / n
    for i in range(n):
        z = state.features.bits
        m = z.sum(axis=0) - z[i]
        for k in rng.permutation(z.shape[1]):
            if m[k] == 0:
                continue
            p1 = m[k] / n
            z[i, k] = 1
            ll1 = likelihood.log_lik(z, state.params)
            z[i, k] = 0
            ll0 = likelihood.log_lik(z, state.params)
            lp1 = math.log(p1) + ll1
            lp0 = (math.log1p(-p1) if p1 < 1 else -np.inf) + ll0
            z[i, k] = _two_point(rng, lp0, lp1)

        K = z.shape[1]
        single = [k for k in range(K) if z[i, k] == 1 and m[k] == 0]
        single = [single[j] for j in rng.permutation(len(single))]
        keep = [k for k in range(K) if k not in single]
        perm = np.array(keep + single, dtype=np.int64)
        params = likelihood.take_columns(state.params, perm)
        base = z[:, keep]
        s = len(single)
        kmax = max(s, truncation_level(lam, cfg.trunc_tol, cfg.trunc_cap))
        ext = likelihood.params_for_new_columns(params, kmax - s, rng)
        k0 = len(keep)
        block = np.zeros((n, kmax), dtype=np.int8)
        block[i] = 1
        z_ext = np.concatenate([base, block], axis=1)
        logw = np.empty(kmax + 1)
        for k in range(kmax + 1):
            params_k = likelihood.take_columns(ext, range(k0 + k))
            logw[k] = (k * math.log(lam) - math.lgamma(k + 1)
                       + likelihood.log_lik(z_ext[:, : k0 + k], params_k))
        k_new = _choose_count(rng, logw)
        state.params = likelihood.take_columns(ext, range(k0 + k_new))
        state.features = FeatureMatrix(z_ext[:, : k0 + k_new].copy(),
                                       np.full(k0 + k_new, np.nan))
    state.params = likelihood.propose_params(state.features.bits, state.params, rng)
    if cfg.sample_alpha:
        h_n = float(np.sum(1.0 / np.arange(1, n + 1)))
        state.alpha = float(rng.gamma(state.n_columns + 1.0, 1.0 / (h_n + 1.0)))
    return state


def ibp_collapsed_gibbs(likelihood, n_objects, config, state=None):
    """Collapsed Gibbs sampler for the exchangeable IBP prior."""
    if state is None:
        rng = np.random.default_rng(config.seed)
        features = sample_generative(star_tree(n_objects), config.alpha_init, rng)
        features = FeatureMatrix(features.bits, np.full(features.n_columns, np.nan))
        params = likelihood.init_params(features.n_columns, rng)
        state = IBPState(features, config.alpha_init, params, rng, config)
    samples = []
    for it in range(config.iterations):
        ibp_sweep(state, likelihood)
        if config.keep(it):
            samples.append(snapshot(state, likelihood, it))
    return samples


# --- serialisation ----------------------------------------------------------


def sample_record(sample, likelihood=None):
    weights = None
    if likelihood is not None and hasattr(likelihood, "column_weights") and sample.params is not None:
        weights = likelihood.column_weights(sample.params)
    cols = []
    fm = sample.features
    for k in range(fm.n_columns):
        col = {"bits": fm.bits[:, k].tolist(),
               "pi": None if np.isnan(fm.pi[k]) else float(fm.pi[k])}
        if weights is not None:
            col["weight"] = float(weights[k])
        cols.append(col)
    return {"iter": sample.iteration, "alpha": sample.alpha, "K_plus": fm.n_columns,
            "columns": cols, "loglik": sample.loglik}


def write_jsonl(samples, fh, likelihood=None):
    for s in samples:
        fh.write(json.dumps(sample_record(s, likelihood)) + "\n")
