"""The phylogenetic IBP prior: finite-K columns, the sequential buffet
process, and the quantities needed to create new columns during inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import digamma, gammaln

from .inference import conditionals_for_leaf, log1mexp

MH_C = 0.06
MH_DELTA = 0.08
INNER_MH_STEPS = 100


@dataclass
class FeatureMatrix:
    """Binary N x K+ matrix of non-zero columns, each with its pi annotation."""

    bits: np.ndarray
    pi: np.ndarray = field(default=None)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8)
        if self.bits.ndim != 2:
            raise ValueError("bits must be a 2-d array")
        if self.pi is None:
            self.pi = np.full(self.bits.shape[1], np.nan)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.pi.shape != (self.bits.shape[1],):
            raise ValueError("one pi per column required")

    @classmethod
    def empty(cls, n_objects):
        return cls(np.zeros((n_objects, 0), dtype=np.int8), np.zeros(0))

    @property
    def n_objects(self):
        return self.bits.shape[0]

    @property
    def n_columns(self):
        return self.bits.shape[1]

    def copy(self):
        return FeatureMatrix(self.bits.copy(), self.pi.copy())

    def append(self, bits, pi):
        bits = np.asarray(bits, dtype=np.int8).reshape(self.n_objects, -1)
        self.bits = np.concatenate([self.bits, bits], axis=1)
        self.pi = np.concatenate([self.pi, np.atleast_1d(pi).astype(float)])

    def drop(self, k):
        self.bits = np.delete(self.bits, k, axis=1)
        self.pi = np.delete(self.pi, k)

    def check(self):
        if np.any(self.bits.sum(axis=0) == 0):
            raise AssertionError("all-zero column retained")
        if np.any((self.pi <= 0) | (self.pi >= 1)):
            raise AssertionError("pi outside (0, 1)")

    def left_ordered(self):
        """Copy with columns sorted by their binary value, row 0 most significant."""
        if self.n_columns == 0:
            return self.copy()
        keys = [tuple(-int(b) for b in self.bits[:, k]) for k in range(self.n_columns)]
        order = sorted(range(self.n_columns), key=lambda k: keys[k])
        return FeatureMatrix(self.bits[:, order], self.pi[order])

    def to_dict(self):
        return {
            "n_objects": self.n_objects,
            "columns": [
                {"bits": self.bits[:, k].tolist(), "pi": float(self.pi[k])}
                for k in range(self.n_columns)
            ],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc):
        n = int(doc["n_objects"])
        cols = doc["columns"]
        bits = np.zeros((n, len(cols)), dtype=np.int8)
        pi = np.zeros(len(cols))
        for k, col in enumerate(cols):
            bits[:, k] = col["bits"]
            pi[k] = col["pi"]
        return cls(bits, pi)

    def to_text(self):
        return "\n".join("".join(str(int(b)) for b in row) for row in self.bits)


# --- finite-K construction --------------------------------------------------


def sample_columns_given_pi(tree, pi, size, rng):
    """Simulate ``size`` columns of the change process for a fixed pi.

    Returns an int8 array of shape (N, size).
    """
    state = np.zeros((tree.n_nodes, size), dtype=bool)
    q = np.log1p(-pi) if pi < 1 else -np.inf
    for v in tree.postorder[::-1]:
        p = tree.parent[v]
        if p < 0:
            continue
        t = tree.length[v]
        flip = -math.expm1(t * q) if t > 0 else 0.0
        state[v] = state[p] | (rng.random(size) < flip)
    return state[: tree.n_leaves].astype(np.int8)


def sample_column_finite(tree, alpha, K, rng):
    """One column of the K-feature model: pi ~ Beta(alpha/K, 1), then bits."""
    a = alpha / K
    # inverse CDF of Beta(a, 1): F(p) = p**a
    pi = math.exp(math.log(rng.random()) / a)
    bits = sample_columns_given_pi(tree, pi, 1, rng)[:, 0]
    return bits, pi


# --- new dishes ---------------------------------------------------------------


def new_dish_rate(rest_length, pendant_length, alpha):
    """Poisson rate of new dishes for a diner joining the minimal subtree."""
    if pendant_length == 0:
        return 0.0
    return alpha * float(
        digamma(rest_length + pendant_length + 1.0) - digamma(rest_length + 1.0)
    )


def new_column_prob_finite(rest_length, pendant_length, alpha, K):
    """P(z_ik = 1 | every other entry of the column is 0) with K features.

    Integrates pi against its Beta(alpha/K, 1) prior in closed form.
    """
    if pendant_length == 0:
        return 0.0
    a = alpha / K
    s, t = rest_length, pendant_length
    log_ratio = (gammaln(s + t + 1.0) - gammaln(s + 1.0)
                 + gammaln(s + a + 1.0) - gammaln(s + t + a + 1.0))
    return float(-np.expm1(log_ratio))


def new_pi_logdensity(pi, pendant_length, rest_length):
    """Unnormalised log density of pi for a column whose only one is the new diner."""
    pi = np.asarray(pi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log1m = np.log1p(-pi)
        head = np.log(-np.expm1(pendant_length * log1m))
        rest = np.where(rest_length == 0, 0.0, rest_length * log1m)
        out = head + rest - np.log(pi)
    out = np.where((pi > 0) & (pi < 1), out, -np.inf)
    if rest_length == 0:
        # (1 - (1 - pi)^t) / pi stays finite at pi = 1
        out = np.where(pi == 1, 0.0, out)
    return out if out.ndim else float(out)


def pi_proposal_var(pi, c=MH_C, delta=MH_DELTA):
    return c * pi * (1.0 - pi) + delta


@njit(cache=True)
def new_pi_logdensity_scalar(pi, pendant_length, rest_length):
    if not 0.0 < pi < 1.0:
        if pi == 1.0 and rest_length == 0.0:
            return 0.0
        return -np.inf
    log1m = math.log1p(-pi)
    out = log1mexp(pendant_length * log1m) - math.log(pi)
    if rest_length != 0.0:
        out += rest_length * log1m
    return out


@njit(cache=True)
def normal_logpdf(x, mean, var):
    return -0.5 * (math.log(2.0 * math.pi * var) + (x - mean) ** 2 / var)


@njit(cache=True)
def mh_new_pi(pendant_length, rest_length, start, normals, uniforms, c, delta):
    """Inner Metropolis-Hastings chains, one per entry of ``start``.

    ``normals`` and ``uniforms`` have shape (steps, n) and drive the proposals
    and accept tests.
    """
    n = start.shape[0]
    out = start.copy()
    for j in range(n):
        pi = out[j]
        logp = new_pi_logdensity_scalar(pi, pendant_length, rest_length)
        for s in range(normals.shape[0]):
            var = c * pi * (1.0 - pi) + delta
            prop = pi + math.sqrt(var) * normals[s, j]
            if prop <= 0.0 or prop >= 1.0:
                continue
            var_back = c * prop * (1.0 - prop) + delta
            logp_prop = new_pi_logdensity_scalar(prop, pendant_length, rest_length)
            log_ratio = (logp_prop - logp + normal_logpdf(pi, prop, var_back)
                         - normal_logpdf(prop, pi, var))
            if math.log(uniforms[s, j]) < log_ratio:
                pi = prop
                logp = logp_prop
        out[j] = pi
    return out


def sample_new_pi(pendant_length, rest_length, rng, size=None, steps=INNER_MH_STEPS,
                  c=MH_C, delta=MH_DELTA):
    """Approximate draw(s) from the new-column pi density.

    Runs ``steps`` Metropolis-Hastings steps from a Uniform(0, 1) start with
    the same Gaussian proposal used for existing columns; ``size``
    independent chains.
    """
    if pendant_length <= 0:
        raise ValueError("pendant_length must be positive")
    n = 1 if size is None else int(size)
    start = rng.random(n)
    normals = rng.standard_normal((steps, n))
    uniforms = rng.random((steps, n))
    pi = mh_new_pi(float(pendant_length), float(rest_length), start, normals, uniforms,
                   float(c), float(delta))
    return float(pi[0]) if size is None else pi


# --- sequential generative process ---------------------------------------


def sample_generative(tree, alpha, rng, order=None, return_new_counts=False):
    """Draw Z (with pi annotations) from the buffet process on ``tree``.

    Each diner takes existing dishes with the sum-product conditional given
    the earlier diners (later diners are summed out), then
    Poisson(new_dish_rate) new dishes whose pi is drawn from the
    new-column density.
    """
    n = tree.n_leaves
    order = list(range(n)) if order is None else [int(v) for v in order]
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the leaves")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")

    cols = np.zeros((n, 0), dtype=np.int8)
    obs = np.full((n, 0), -1, dtype=np.int8)
    pis = np.zeros(0)
    new_counts = np.zeros(n, dtype=np.int64)
    seen = []
    args = (tree.postorder, tree.child_ptr, tree.child_idx, tree.length, n, tree.root)
    # the minimal subtree grows one root path at a time
    in_view = np.zeros(tree.n_nodes, dtype=bool)
    in_view[tree.root] = True
    rest = 0.0
    for i in order:
        k_old = pis.shape[0]
        if k_old:
            probs = np.empty(k_old)
            conditionals_for_leaf(*args, obs, pis, i, probs)
            take = (rng.random(k_old) < probs).astype(np.int8)
            cols[i] = take
            obs[i] = take
        pendant = 0.0
        v = i
        while not in_view[v]:
            in_view[v] = True
            pendant += float(tree.length[v])
            v = tree.parent[v]
        rate = new_dish_rate(rest, pendant, alpha)
        k_new = int(rng.poisson(rate)) if rate > 0 else 0
        if k_new:
            new_pi = sample_new_pi(pendant, rest, rng, size=k_new)
            block = np.zeros((n, k_new), dtype=np.int8)
            block[i] = 1
            obs_block = np.full((n, k_new), -1, dtype=np.int8)
            obs_block[seen] = 0
            obs_block[i] = 1
            cols = np.concatenate([cols, block], axis=1)
            obs = np.concatenate([obs, obs_block], axis=1)
            pis = np.concatenate([pis, new_pi])
        new_counts[i] = k_new
        rest += pendant
        seen.append(i)
    fm = FeatureMatrix(cols, pis)
    if return_new_counts:
        return fm, new_counts
    return fm


def alpha_posterior_rate(tree_length):
    """Rate of the Gamma posterior of alpha under a G(1, 1) prior."""
    return float(digamma(1.0 + tree_length) - digamma(1.0) + 1.0)
