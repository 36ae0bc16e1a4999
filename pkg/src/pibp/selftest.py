"""Statistical self-checks, runnable from the command line.

Each suite uses fixed seeds, so its p-values are deterministic and the
nominal thresholds act as gates rather than flaky checks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import digamma

from .eba import ChoiceData, choice_matrix, full_features, noisy_prob
from .fastchain import run_eba_chain
from .inference import leaf_conditional, log_leaves_given_leaf
from .prior import sample_generative
from .sampler import SamplerConfig, SamplerState, sample_alpha
from .tree import PhyloTree, parse_newick, star_tree


# --- random trees and brute force ---------------------------------------------


def random_ultrametric_tree(n_leaves, rng, zero_edge_prob=0.1):
    """Random rooted tree with every leaf at depth 1.

    Lineages are merged two or three at a time at increasing heights; with
    probability ``zero_edge_prob`` a merge reuses the previous height so that
    zero-length edges occur.
    """
    heights = {v: 0.0 for v in range(n_leaves)}
    active = list(range(n_leaves))
    parent = {}
    nxt = n_leaves
    h = 0.0
    merges = []
    while len(active) > 1:
        m = 3 if len(active) >= 3 and rng.random() < 0.25 else 2
        pick = sorted(rng.choice(len(active), size=m, replace=False), reverse=True)
        kids = [active.pop(p) for p in pick]
        if not merges or rng.random() >= zero_edge_prob:
            h += rng.exponential(1.0)
        merges.append((nxt, kids, h))
        for c in kids:
            parent[c] = nxt
        heights[nxt] = h
        active.append(nxt)
        nxt += 1
    root = active[0]
    # stretch so the root sits at height 1; a single leaf hangs off a root
    if root < n_leaves:
        parent[root] = nxt
        heights[nxt] = 1.0
        scale = 1.0
        root = nxt
        nxt += 1
    else:
        scale = 1.0 / heights[root]
    m = nxt
    par = np.full(m, -1, dtype=np.int64)
    length = np.zeros(m)
    for v, p in parent.items():
        par[v] = p
        length[v] = (heights[p] - heights[v]) * scale
    names = tuple(f"L{v}" for v in range(n_leaves))
    return PhyloTree(par, length, names)


def _edge_prob(pi, t, a, b):
    if a == 1:
        return float(b == 1)
    stay = (1.0 - pi) ** t
    return stay if b == 0 else 1.0 - stay


def enumerate_joint(tree, pi, assignment):
    """P(observed leaves | pi) by summing over every non-root node state.

    ``assignment`` maps leaf index to bit; missing leaves are summed out.
    """
    nodes = [v for v in range(tree.n_nodes) if v != tree.root]
    total = 0.0
    for states in itertools.product((0, 1), repeat=len(nodes)):
        s = dict(zip(nodes, states))
        s[tree.root] = 0
        if any(s[v] != b for v, b in assignment.items()):
            continue
        p = 1.0
        for v in nodes:
            p *= _edge_prob(pi, tree.length[v], s[int(tree.parent[v])], s[v])
            if p == 0.0:
                break
        total += p
    return total


@dataclass
class SuiteResult:
    name: str
    passed: bool
    pvalues: dict = field(default_factory=dict)
    detail: str = ""

    def line(self):
        ps = ", ".join(f"{k}={v:.4g}" for k, v in self.pvalues.items())
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {ps}{'; ' if ps and self.detail else ''}{self.detail}"


def suite_sumproduct(seed=0, n_trees=200, max_leaves=8, tol=1e-10):
    """Leaf conditionals and leaves-given-leaf against brute-force enumeration."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trees):
        n = int(rng.integers(1, max_leaves + 1))
        tree = random_ultrametric_tree(n, rng)
        pi = float(rng.uniform(0.01, 0.99))
        i = int(rng.integers(n))
        col = [int(b) if rng.random() < 0.7 else None for b in rng.integers(0, 2, n)]
        col[i] = None
        obs = {v: b for v, b in enumerate(col) if b is not None}
        p1 = enumerate_joint(tree, pi, {**obs, i: 1})
        p0 = enumerate_joint(tree, pi, {**obs, i: 0})
        worst = max(worst, abs(leaf_conditional(tree, col, pi, i) - p1 / (p0 + p1)))
        zi = int(rng.integers(2))
        full = [int(b) for b in rng.integers(0, 2, n)]
        full[i] = zi
        joint = enumerate_joint(tree, pi, dict(enumerate(full)))
        marg = pi if zi == 1 else 1.0 - pi
        got = math.exp(log_leaves_given_leaf(tree, full, pi, i, zi))
        worst = max(worst, abs(got - joint / marg))
    return SuiteResult("sumproduct", worst < tol, {}, f"max abs error {worst:.2e}")


def suite_ibp(seed=0, runs=20000, alpha=2.0, n=9):
    """New-dish counts on the star tree against Poisson(alpha / i)."""
    rng = np.random.default_rng(seed)
    tree = star_tree(n)
    counts = np.zeros((runs, n), dtype=np.int64)
    for r in range(runs):
        counts[r] = sample_generative(tree, alpha, rng, return_new_counts=True)[1]
    pvals = {}
    for i in range(n):
        pvals[f"diner{i + 1}"] = poisson_chisquare(counts[:, i], alpha / (i + 1))
    identity = max(abs(alpha * (digamma(i + 1.0) - digamma(float(i))) - alpha / i)
                   for i in range(1, 51))
    passed = min(pvals.values()) > 0.01 and identity < 1e-12
    return SuiteResult("ibp", passed, pvals, f"digamma identity error {identity:.1e}")


def poisson_chisquare(counts, lam, min_expected=5.0):
    """Chi-square goodness-of-fit p-value of counts against Poisson(lam).

    Cells are pooled from the top until every expected count is at least
    ``min_expected``.
    """
    counts = np.asarray(counts)
    n = counts.size
    top = max(int(counts.max()), 1)
    probs = stats.poisson.pmf(np.arange(top + 1), lam)
    probs[-1] += stats.poisson.sf(top, lam)
    obs = np.bincount(counts, minlength=top + 1).astype(float)
    exp = probs * n
    while exp.size > 1 and exp[-1] < min_expected:
        exp[-2] += exp[-1]
        obs[-2] += obs[-1]
        exp = exp[:-1]
        obs = obs[:-1]
    if exp.size < 2:
        return 1.0
    return float(stats.chisquare(obs, exp).pvalue)


def suite_alpha(seed=0, draws=100000):
    """alpha | K+ = 0 on a three-leaf star against Gamma(1, H_3 + 1)."""
    from .prior import FeatureMatrix
    tree = star_tree(3)
    state = SamplerState(tree, FeatureMatrix.empty(3), 1.0, None, np.random.default_rng(seed),
                         SamplerConfig(1))
    out = np.empty(draws)
    for d in range(draws):
        out[d] = sample_alpha(state).alpha
    p = float(stats.kstest(out, stats.gamma(1.0, scale=6.0 / 17.0).cdf).pvalue)
    return SuiteResult("alpha", p > 0.01, {"ks": p})


# --- getting it right ----------------------------------------------------------

GEWEKE_TREE = "((a:0.3,b:0.3):0.7,(c:0.6,d:0.6):0.4);"
GEWEKE_PAIRS = ((0, 1, 3), (2, 3, 3))


def _draw_counts(z, w, wu, epsilon, pairs, rng):
    x = np.zeros((len(wu), len(wu)), dtype=np.int64)
    p = noisy_prob(choice_matrix(full_features(z), np.concatenate([wu, w])), epsilon)
    for i, j, n in pairs:
        x[i, j] = rng.binomial(n, p[i, j])
        x[j, i] = n - x[i, j]
    return ChoiceData(x)


def _geweke_stats(z, w, alpha):
    return (z.shape[1], int(z.sum()), alpha, float(np.sum(w)))


def geweke(tree, rounds, thin=10, seed=0, epsilon=0.05, pairs=GEWEKE_PAIRS):
    """Forward and successive-conditional draws of (K+, sum z, alpha, sum w).

    ``tree=None`` runs the IBP sampler. Successive-conditional draws
    alternate one sampler sweep with a fresh draw of the data given the
    current state; every ``thin``-th state is kept.
    """
    rng = np.random.default_rng(seed)
    n = 1 + max(max(i, j) for i, j, _ in pairs) if tree is None else tree.n_leaves
    shape = star_tree(n) if tree is None else tree

    def prior_draw():
        alpha = rng.gamma(1.0, 1.0)
        fm = sample_generative(shape, alpha, rng)
        return {"bits": fm.bits, "pi": fm.pi, "w": rng.gamma(1.0, 1.0, fm.n_columns),
                "wu": rng.gamma(1.0, 1.0, n), "alpha": alpha}

    forward = []
    for _ in range(rounds):
        s = prior_draw()
        forward.append(_geweke_stats(s["bits"], s["w"], s["alpha"]))

    cfg = SamplerConfig(iterations=1, seed=0)
    state = prior_draw()
    successive = []
    for r in range(rounds * thin):
        data = _draw_counts(state["bits"], state["w"], state["wu"], epsilon, pairs, rng)
        cfg.seed = int(rng.integers(2**31 - 1))
        res = run_eba_chain(tree, data, cfg, epsilon=epsilon, init=state)
        state = res.final
        if (r + 1) % thin == 0:
            successive.append(_geweke_stats(state["bits"], state["w"], state["alpha"]))
    return np.array(forward, dtype=float), np.array(successive, dtype=float)


GEWEKE_STATS = ("K_plus", "sum_z", "alpha", "sum_w")


def suite_geweke(seed=0, rounds=10000, thin=10, threshold=0.005):
    tree = parse_newick(GEWEKE_TREE)
    pvals = {}
    for label, t in (("pibp", tree), ("ibp", None)):
        fwd, succ = geweke(t, rounds, thin, seed)
        for k, name in enumerate(GEWEKE_STATS):
            pvals[f"{label}.{name}"] = float(stats.ks_2samp(fwd[:, k], succ[:, k]).pvalue)
    return SuiteResult("geweke", min(pvals.values()) > threshold, pvals)


SUITES = {
    "sumproduct": suite_sumproduct,
    "ibp": suite_ibp,
    "geweke": suite_geweke,
    "alpha": suite_alpha,
}


def run_suites(names=None, seed=0):
    names = list(SUITES) if not names else list(names)
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite: {name}")
    return [SUITES[name](seed=seed) for name in names]
