"""Elimination-by-aspects choice model for paired comparisons.

Every object carries one unique feature; the shared block of features is
what the nonparametric prior is placed on. ``z_full`` below always means
the concatenation ``[unique block | shared block]`` with weights in the same
column order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

DEFAULT_EPSILON = 0.05
WEIGHT_STEP = 0.3
COLLAPSE_THRESHOLD = 0.1


@dataclass
class ChoiceData:
    """``wins[i, j]`` counts how often object i was chosen over object j."""

    wins: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.wins)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("wins must be a square matrix")
        if not np.all(w == np.round(w)):
            raise ValueError("wins must be integer counts")
        w = w.astype(np.int64)
        if np.any(w < 0):
            raise ValueError("counts must be non-negative")
        if np.any(np.diag(w) != 0):
            raise ValueError("diagonal must be zero")
        self.wins = w

    @property
    def n_objects(self):
        return self.wins.shape[0]

    def trials(self):
        return self.wins + self.wins.T

    def without_pair(self, i, j):
        w = self.wins.copy()
        w[i, j] = 0
        w[j, i] = 0
        return ChoiceData(w)

    def to_csv(self):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.wins.tolist())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        return cls(np.array([[int(x) for x in r] for r in rows]))

    def to_dict(self):
        return {"n_objects": self.n_objects, "wins": self.wins.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["wins"]))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            text = fh.read()
        if str(path).endswith(".json"):
            return cls.from_dict(json.loads(text))
        return cls.from_csv(text)


@dataclass
class EBAParams:
    unique_weights: np.ndarray
    shared_weights: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def copy(self):
        return EBAParams(self.unique_weights.copy(), self.shared_weights.copy(), self.epsilon)

    @property
    def all_weights(self):
        return np.concatenate([self.unique_weights, self.shared_weights])


def full_features(z_shared):
    z_shared = np.asarray(z_shared)
    n = z_shared.shape[0]
    return np.concatenate([np.eye(n, dtype=z_shared.dtype), z_shared], axis=1)


def advantage_matrix(z_full, w):
    """D[i, j] = sum_k w_k z_ik (1 - z_jk)."""
    z = np.asarray(z_full, dtype=float)
    return (z * w) @ (1.0 - z).T


def choice_matrix(z_full, w):
    """Matrix of p_ij; 0.5 where the two objects share every feature."""
    d = advantage_matrix(z_full, w)
    tot = d + d.T
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tot > 0, d / tot, 0.5)
    np.fill_diagonal(p, 0.5)
    return p


def choice_prob(z_full, w, i, j):
    if i == j:
        raise ValueError("i and j must differ")
    z = np.asarray(z_full)
    w = np.asarray(w, dtype=float)
    a = float(np.sum(w * z[i] * (1 - z[j])))
    b = float(np.sum(w * (1 - z[i]) * z[j]))
    if a + b == 0:
        return 0.5
    return a / (a + b)


def noisy_prob(p, epsilon):
    return (1.0 - epsilon) * p + 0.5 * epsilon


def log_likelihood(data, z_full, w, epsilon=DEFAULT_EPSILON):
    """log P(X | Z, w) including the binomial coefficients."""
    x = data.wins
    p = noisy_prob(choice_matrix(z_full, w), epsilon)
    iu = np.triu_indices(data.n_objects, 1)
    xij = x[iu]
    xji = x.T[iu]
    pij = p[iu]
    with np.errstate(divide="ignore"):
        terms = (gammaln(xij + xji + 1) - gammaln(xij + 1) - gammaln(xji + 1)
                 + xlogy(xij, pij) + xlogy(xji, 1.0 - pij))
    return float(terms.sum())


def pair_log_prob(x_ij, x_ji, p_ij):
    """Binomial log probability of one pair's counts."""
    n = x_ij + x_ji
    return (math.lgamma(n + 1) - math.lgamma(x_ij + 1) - math.lgamma(x_ji + 1)
            + float(xlogy(x_ij, p_ij)) + float(xlogy(x_ji, 1.0 - p_ij)))


class EBALikelihood:
    """Likelihood hook binding choice data to the sampler.

    Parameters are :class:`EBAParams`; the sampler's Z is the shared block.
    Weights get independent Gamma(1, 1) priors and are updated by a random
    walk on log w.
    """

    def __init__(self, data, epsilon=DEFAULT_EPSILON, step=WEIGHT_STEP):
        self.data = data
        self.epsilon = float(epsilon)
        self.step = float(step)

    def log_lik(self, z, params):
        return log_likelihood(self.data, full_features(z), params.all_weights, params.epsilon)

    def init_params(self, n_columns, rng):
        n = self.data.n_objects
        return EBAParams(rng.gamma(1.0, 1.0, n), rng.gamma(1.0, 1.0, n_columns), self.epsilon)

    def params_for_new_columns(self, params, k_new, rng):
        out = params.copy()
        out.shared_weights = np.concatenate(
            [params.shared_weights, weights_for_new_columns(k_new, rng)])
        return out

    def take_columns(self, params, idx):
        out = params.copy()
        out.shared_weights = params.shared_weights[np.asarray(list(idx), dtype=np.int64)]
        return out

    def propose_params(self, z, params, rng):
        n = self.data.n_objects
        # shared columns are exchangeable, so visit them in random order
        order = list(range(n)) + list(n + rng.permutation(params.shared_weights.shape[0]))
        for k in order:
            params = mh_weight(self, z, params, k, rng)
        return params

    def column_weights(self, params):
        return params.shared_weights


def weights_for_new_columns(k_new, rng):
    """Prior draws for the weights of freshly created columns."""
    if k_new < 0:
        raise ValueError("k_new must be non-negative")
    return rng.gamma(1.0, 1.0, k_new)


def mh_weight(likelihood, z, params, k, rng, proposal=None):
    """One random-walk MH step on log w_k under a Gamma(1, 1) prior.

    ``k`` indexes the unique weights first, then the shared ones. A fixed
    ``proposal`` value may be supplied for testing.
    """
    n = likelihood.data.n_objects
    w_all = params.all_weights
    w_old = w_all[k]
    if proposal is None:
        w_new = w_old * math.exp(likelihood.step * rng.standard_normal())
    else:
        w_new = float(proposal)
    if w_new == w_old:
        return params
    z_full = full_features(z)
    ll_old = log_likelihood(likelihood.data, z_full, w_all, params.epsilon)
    w_prop = w_all.copy()
    w_prop[k] = w_new
    ll_new = log_likelihood(likelihood.data, z_full, w_prop, params.epsilon)
    # Gamma(1,1) prior plus the log-scale Jacobian
    log_ratio = ll_new - ll_old - w_new + w_old + math.log(w_new) - math.log(w_old)
    if math.log(rng.random()) < log_ratio:
        params = params.copy()
        if k < n:
            params.unique_weights[k] = w_new
        else:
            params.shared_weights[k - n] = w_new
    return params


def collapse_columns(z, w, threshold=COLLAPSE_THRESHOLD):
    """Merge identical columns (summing weights), drop light and empty ones.

    Columns come back in left-ordered form: sorted by binary value with row 0
    as the most significant bit.
    """
    z = np.asarray(z, dtype=np.int8)
    w = np.asarray(w, dtype=float)
    merged = {}
    for k in range(z.shape[1]):
        key = tuple(int(b) for b in z[:, k])
        if not any(key):
            continue
        merged[key] = merged.get(key, 0.0) + w[k]
    keep = sorted((key for key, wt in merged.items() if wt >= threshold),
                  key=lambda key: tuple(-b for b in key))
    if not keep:
        return np.zeros((z.shape[0], 0), dtype=np.int8), np.zeros(0)
    zc = np.array(keep, dtype=np.int8).T
    wc = np.array([merged[key] for key in keep])
    return zc, wc


def predictive_loglik(pair_probs, x_ij, x_ji):
    """log of the posterior-mean probability of a held-out pair's counts.

    ``pair_probs`` holds the noisy p_ij of each retained sample.
    """
    probs = np.atleast_1d(np.asarray(pair_probs, dtype=float))
    if probs.size == 0:
        raise ValueError("no samples to average")
    logs = np.array([pair_log_prob(x_ij, x_ji, p) for p in probs])
    return float(logsumexp(logs) - math.log(probs.size))
