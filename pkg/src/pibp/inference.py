"""Exact sum-product for the absorbing 0 -> 1 change process on a tree.

The root is clamped to state 0. Along an edge of length ``t`` a zero turns
into a one with probability ``1 - (1 - pi)**t``; a one never reverts. All
message arithmetic is done in log space.

Message schedule (one column):

* upward pass, children before parents: ``lu0[v]``/``lu1[v]`` are the log
  likelihoods of the observed leaves below ``v`` given ``v`` in state 0/1,
  and ``lm0[v]`` is the message ``v`` sends to a parent in state 0 (a
  parent in state 1 receives ``lu1[v]``);
* downward pass, parents before children: ``ab0[v]``/``ab1[v]`` are the log
  joint probabilities of all evidence outside the subtree of ``v`` with
  ``v`` in state 0/1.

For a leaf ``i`` the pair ``ab0[i], ab1[i]`` gives the conditional of the
leaf given every other leaf in constant time. A leaf marked ``-1`` is
unobserved and is summed out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def log1mexp(x):
    """``log(1 - exp(x))`` for ``x <= 0``."""
    if x == 0.0:
        return -np.inf
    if x > -0.6931471805599453:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


@njit(cache=True)
def logaddexp2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def upward(postorder, child_ptr, child_idx, length, n_leaves, obs, lq, lu0, lu1, lm0):
    """Fill the upward messages; returns the number of edges processed."""
    ops = 0
    for v in postorder:
        if v < n_leaves:
            o = obs[v]
            lu0[v] = -np.inf if o == 1 else 0.0
            lu1[v] = -np.inf if o == 0 else 0.0
        else:
            s0 = 0.0
            s1 = 0.0
            for p in range(child_ptr[v], child_ptr[v + 1]):
                c = child_idx[p]
                s0 += lm0[c]
                s1 += lu1[c]
                ops += 1
            lu0[v] = s0
            lu1[v] = s1
        tl = length[v] * lq
        lm0[v] = logaddexp2(tl + lu0[v], log1mexp(tl) + lu1[v])
    return ops


@njit(cache=True)
def downward(postorder, child_ptr, child_idx, length, n_leaves, root, lq,
             lm0, lu1, ab0, ab1, pre0, pre1):
    """Fill the downward messages from the upward ones.

    ``pre0``/``pre1`` are scratch buffers of length at least max degree + 1.
    """
    ops = 0
    ab0[root] = 0.0
    ab1[root] = -np.inf
    for idx in range(postorder.shape[0] - 1, -1, -1):
        v = postorder[idx]
        if v < n_leaves:
            continue
        start = child_ptr[v]
        deg = child_ptr[v + 1] - start
        # prefix products of sibling messages; suffix accumulated on the way back
        pre0[0] = 0.0
        pre1[0] = 0.0
        for m in range(deg):
            c = child_idx[start + m]
            pre0[m + 1] = pre0[m] + lm0[c]
            pre1[m + 1] = pre1[m] + lu1[c]
        suf0 = 0.0
        suf1 = 0.0
        for m in range(deg - 1, -1, -1):
            c = child_idx[start + m]
            out0 = ab0[v] + pre0[m] + suf0
            out1 = ab1[v] + pre1[m] + suf1
            tl = length[c] * lq
            ab0[c] = out0 + tl
            ab1[c] = logaddexp2(out0 + log1mexp(tl), out1)
            suf0 += lm0[c]
            suf1 += lu1[c]
            ops += 1
    return ops


@njit(cache=True)
def column_log_evidence(postorder, child_ptr, child_idx, length, n_leaves, root,
                        obs, pi, lu0, lu1, lm0):
    """log P(observed leaves | pi), root clamped to 0."""
    if pi <= 0.0:
        for v in range(n_leaves):
            if obs[v] == 1:
                return -np.inf
        return 0.0
    if pi >= 1.0:
        for v in range(n_leaves):
            if obs[v] == 0:
                return -np.inf
        return 0.0
    upward(postorder, child_ptr, child_idx, length, n_leaves, obs,
           math.log1p(-pi), lu0, lu1, lm0)
    return lu0[root]


@njit(cache=True)
def conditionals_for_leaf(postorder, child_ptr, child_idx, length, n_leaves, root,
                          obs, pis, i, out):
    """P(leaf i = 1 | observed leaves in column k, pi_k) for every column k.

    ``obs`` is (n_leaves, K); row ``i`` is ignored. Used by the sequential
    generative process, where only earlier diners are observed.
    """
    n_nodes = postorder.shape[0]
    lu0 = np.empty(n_nodes)
    lu1 = np.empty(n_nodes)
    lm0 = np.empty(n_nodes)
    col = np.empty(n_leaves, dtype=np.int8)
    for k in range(obs.shape[1]):
        pi = pis[k]
        if pi <= 0.0:
            out[k] = 0.0
            continue
        if pi >= 1.0:
            out[k] = 1.0
            continue
        for v in range(n_leaves):
            col[v] = obs[v, k]
        lq = math.log1p(-pi)
        col[i] = 1
        upward(postorder, child_ptr, child_idx, length, n_leaves, col, lq, lu0, lu1, lm0)
        l1 = lu0[root]
        col[i] = 0
        upward(postorder, child_ptr, child_idx, length, n_leaves, col, lq, lu0, lu1, lm0)
        l0 = lu0[root]
        out[k] = 1.0 / (1.0 + math.exp(l0 - l1)) if l1 > -np.inf else 0.0


# --- Python surface ---------------------------------------------------------


@dataclass(frozen=True)
class EdgeTransition:
    """Child-given-parent probabilities over one edge; state 1 is absorbing."""

    p00: float
    p01: float
    p10: float = 0.0
    p11: float = 1.0


def edge_transition(pi, t):
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must lie in [0, 1], got {pi}")
    if t < 0:
        raise ValueError(f"edge length must be non-negative, got {t}")
    if t == 0:
        return EdgeTransition(1.0, 0.0)
    if pi == 1.0:
        return EdgeTransition(0.0, 1.0)
    stay = math.exp(t * math.log1p(-pi))
    return EdgeTransition(stay, -math.expm1(t * math.log1p(-pi)))


def as_observation(tree, column):
    """Normalise a column assignment to an int8 vector (-1 = unobserved).

    Accepts a length-N sequence (entries 0, 1 or -1/None) or a mapping from
    leaf index or leaf name to bit.
    """
    n = tree.n_leaves
    obs = np.full(n, -1, dtype=np.int8)
    if isinstance(column, dict):
        for key, bit in column.items():
            idx = tree.leaf_index(key) if isinstance(key, str) else int(key)
            if not 0 <= idx < n:
                raise KeyError(f"unknown leaf id {key}")
            obs[idx] = int(bit)
    else:
        values = list(column)
        if len(values) != n:
            raise ValueError(f"column has {len(values)} entries, tree has {n} leaves")
        for idx, bit in enumerate(values):
            obs[idx] = -1 if bit is None else int(bit)
    if np.any((obs < -1) | (obs > 1)):
        raise ValueError("column entries must be 0, 1 or unobserved")
    return obs


def _tree_args(tree):
    return tree.postorder, tree.child_ptr, tree.child_idx, tree.length, tree.n_leaves


def log_evidence(tree, column, pi):
    """log P(observed leaves | pi)."""
    obs = as_observation(tree, column)
    m = tree.n_nodes
    return column_log_evidence(*_tree_args(tree), tree.root, obs, float(pi),
                               np.empty(m), np.empty(m), np.empty(m))


def leaf_conditional(tree, column, pi, i):
    """P(z_i = 1 | the observed entries of the other leaves, pi).

    Leaves left unobserved in ``column`` are marginalised; entry ``i`` must
    itself be unobserved.
    """
    obs = as_observation(tree, column)
    if obs[i] != -1:
        raise ValueError(f"leaf {i} is in the conditioning set")
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must lie in [0, 1], got {pi}")
    out = np.empty(1)
    conditionals_for_leaf(*_tree_args(tree), tree.root, obs[:, None],
                          np.array([float(pi)]), int(i), out)
    return float(out[0])


def log_leaves_given_leaf(tree, column, pi, i, zi):
    """log P(z_(-i) | z_i = zi, pi) via joint / marginal."""
    obs = as_observation(tree, column)
    obs[i] = zi
    if zi == 1:
        if pi <= 0.0:
            raise ValueError("z_i = 1 has probability zero when pi = 0")
        log_marg = math.log(pi)
    else:
        if pi >= 1.0:
            raise ValueError("z_i = 0 has probability zero when pi = 1")
        log_marg = math.log1p(-pi)
    m = tree.n_nodes
    joint = column_log_evidence(*_tree_args(tree), tree.root, obs, float(pi),
                                np.empty(m), np.empty(m), np.empty(m))
    return joint - log_marg


def leaves_given_leaf(tree, column, pi, i, zi):
    return math.exp(log_leaves_given_leaf(tree, column, pi, i, zi))


class MessageCache:
    """Cached sum-product messages for one fully observed column.

    ``conditional(i)`` is O(1); ``flip`` and ``set_pi`` refresh both passes in
    O(N). ``ops`` counts edges visited by the kernels.
    """

    def __init__(self, tree, bits, pi):
        self.tree = tree
        self.bits = np.array(bits, dtype=np.int8)
        if self.bits.shape != (tree.n_leaves,):
            raise ValueError("bits must have one entry per leaf")
        m = tree.n_nodes
        self.lu0 = np.empty(m)
        self.lu1 = np.empty(m)
        self.lm0 = np.empty(m)
        self.ab0 = np.empty(m)
        self.ab1 = np.empty(m)
        self._pre0 = np.empty(tree.max_degree + 1)
        self._pre1 = np.empty(tree.max_degree + 1)
        self.ops = 0
        self.pi = float(pi)
        self.refresh()

    def refresh(self):
        t = self.tree
        pi = self.pi
        if 0.0 < pi < 1.0:
            lq = math.log1p(-pi)
            self.ops += upward(*_tree_args(t), self.bits, lq, self.lu0, self.lu1, self.lm0)
            self.ops += downward(*_tree_args(t), t.root, lq, self.lm0, self.lu1,
                                 self.ab0, self.ab1, self._pre0, self._pre1)

    @property
    def log_evidence(self):
        if self.pi <= 0.0:
            return 0.0 if not self.bits.any() else NEG_INF
        if self.pi >= 1.0:
            return 0.0 if self.bits.all() else NEG_INF
        return float(self.lu0[self.tree.root])

    def conditional(self, i):
        """P(z_i = 1 | all other leaves of this column, pi)."""
        if self.pi <= 0.0:
            return 0.0
        if self.pi >= 1.0:
            return 1.0
        a0 = self.ab0[i]
        a1 = self.ab1[i]
        if a1 == NEG_INF:
            return 0.0
        return 1.0 / (1.0 + math.exp(a0 - a1))

    def flip(self, i, new_bit):
        if self.bits[i] == new_bit:
            return
        self.bits[i] = new_bit
        self.refresh()

    def set_pi(self, pi):
        self.pi = float(pi)
        self.refresh()

    def snapshot(self):
        return self.ab0[: self.tree.n_leaves].copy(), self.ab1[: self.tree.n_leaves].copy()


def refresh_after_flip(cache, i, new_bit):
    cache.flip(i, new_bit)
    return cache
