"""Compiled sweep for the EBA likelihood.

Runs the same schedule as :func:`pibp.sampler.run_chain` (mode 0) or
:func:`pibp.sampler.ibp_collapsed_gibbs` (mode 1) with the EBA model bound
in, keeping the advantage matrix ``D[i, j] = sum_k w_k z_ik (1 - z_jk)``
up to date incrementally so that every move costs O(N) or O(N^2). The
generic samplers stay the reference; this path exists so the
cross-validation grid runs in minutes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import digamma

from .eba import DEFAULT_EPSILON, WEIGHT_STEP, noisy_prob
from .inference import downward, upward
from .prior import (FeatureMatrix, alpha_posterior_rate, new_pi_logdensity_scalar, normal_logpdf,
                    sample_generative)
from .tree import star_tree, total_edge_length

PIBP = 0
IBP = 1

# bit mask selecting which updates a sweep performs (all by default)
MOVE_GIBBS = 1
MOVE_BIRTH = 2
MOVE_PI = 4
MOVE_WEIGHTS = 8
MOVE_ALPHA = 16
ALL_MOVES = 31


@njit(cache=True)
def _pair_ll(xij, xji, dij, dji, eps):
    tot = dij + dji
    p = dij / tot if tot > 0.0 else 0.5
    p = (1.0 - eps) * p + 0.5 * eps
    out = 0.0
    if xij > 0:
        if p <= 0.0:
            return -np.inf
        out += xij * math.log(p)
    if xji > 0:
        if p >= 1.0:
            return -np.inf
        out += xji * math.log1p(-p)
    return out


@njit(cache=True)
def _row_ll(i, X, D, eps, extra):
    """Log-likelihood of all pairs touching i, with ``extra`` added to D[i, :]."""
    n = X.shape[0]
    s = 0.0
    for j in range(n):
        if j == i or X[i, j] + X[j, i] == 0:
            continue
        s += _pair_ll(X[i, j], X[j, i], max(D[i, j] + extra, 0.0), D[j, i], eps)
    return s


@njit(cache=True)
def _row_ll_flip(i, k, newbit, X, D, Z, w, eps):
    n = X.shape[0]
    wk = w[k]
    s = 0.0
    for j in range(n):
        if j == i or X[i, j] + X[j, i] == 0:
            continue
        dij = D[i, j]
        dji = D[j, i]
        if Z[j, k] == 0:
            dij += wk if newbit == 1 else -wk
        else:
            dji += -wk if newbit == 1 else wk
        s += _pair_ll(X[i, j], X[j, i], max(dij, 0.0), max(dji, 0.0), eps)
    return s


@njit(cache=True)
def _apply_flip(i, k, newbit, D, Z, w):
    n = Z.shape[0]
    wk = w[k]
    for j in range(n):
        if j == i:
            continue
        if Z[j, k] == 0:
            D[i, j] += wk if newbit == 1 else -wk
        else:
            D[j, i] += -wk if newbit == 1 else wk


@njit(cache=True)
def _recompute_D(D, Z, w, wu, K):
    n = Z.shape[0]
    for a in range(n):
        for b in range(n):
            if a == b:
                D[a, b] = 0.0
                continue
            s = wu[a]
            for k in range(K):
                if Z[a, k] == 1 and Z[b, k] == 0:
                    s += w[k]
            D[a, b] = s


@njit(cache=True)
def _two_point(lp0, lp1):
    if lp1 == -np.inf:
        return 0
    if lp0 == -np.inf:
        return 1
    return 1 if np.random.random() * (1.0 + math.exp(lp0 - lp1)) < 1.0 else 0


@njit(cache=True)
def _trunc_level(lam, tol, cap):
    k = 0
    pmf = math.exp(-lam)
    cdf = pmf
    while 1.0 - cdf >= tol and k < cap:
        k += 1
        pmf *= lam / k
        cdf += pmf
    return k


@njit(cache=True)
def _choose(logw, n):
    top = -np.inf
    for k in range(n):
        if logw[k] > top:
            top = logw[k]
    tot = 0.0
    for k in range(n):
        tot += math.exp(logw[k] - top)
    u = np.random.random() * tot
    acc = 0.0
    for k in range(n):
        acc += math.exp(logw[k] - top)
        if u < acc:
            return k
    return n - 1


@njit(cache=True)
def _draw_new_pi(t, s, steps, c, delta):
    pi = np.random.random()
    logp = new_pi_logdensity_scalar(pi, t, s)
    for _ in range(steps):
        var = c * pi * (1.0 - pi) + delta
        prop = pi + math.sqrt(var) * np.random.standard_normal()
        if prop <= 0.0 or prop >= 1.0:
            np.random.random()
            continue
        var_back = c * prop * (1.0 - prop) + delta
        logp_prop = new_pi_logdensity_scalar(prop, t, s)
        log_ratio = logp_prop - logp + normal_logpdf(pi, prop, var_back) - normal_logpdf(prop, pi, var)
        if math.log(np.random.random()) < log_ratio:
            pi = prop
            logp = logp_prop
    return pi


@njit(cache=True)
def _refresh(k, Z, pi, cond, col, postorder, child_ptr, child_idx, length, root,
             lu0, lu1, lm0, ab0, ab1, pre0, pre1):
    n = Z.shape[0]
    for v in range(n):
        col[v] = Z[v, k]
    lq = math.log1p(-pi[k])
    upward(postorder, child_ptr, child_idx, length, n, col, lq, lu0, lu1, lm0)
    downward(postorder, child_ptr, child_idx, length, n, root, lq, lm0, lu1, ab0, ab1, pre0, pre1)
    for v in range(n):
        a1 = ab1[v]
        if a1 == -np.inf:
            cond[v, k] = 0.0
        else:
            cond[v, k] = 1.0 / (1.0 + math.exp(ab0[v] - a1))


@njit(cache=True)
def _log_target_pi(k, p, Z, col, postorder, child_ptr, child_idx, length, root, lu0, lu1, lm0):
    n = Z.shape[0]
    for v in range(n):
        col[v] = Z[v, k]
    upward(postorder, child_ptr, child_idx, length, n, col, math.log1p(-p), lu0, lu1, lm0)
    return lu0[root] - math.log(p)


@njit(cache=True)
def _remove_column(k, K, Z, pi, w, cond):
    n = Z.shape[0]
    for c in range(k, K - 1):
        for v in range(n):
            Z[v, c] = Z[v, c + 1]
            cond[v, c] = cond[v, c + 1]
        pi[c] = pi[c + 1]
        w[c] = w[c + 1]
    for v in range(n):
        Z[v, K - 1] = 0


@njit(cache=True)
def _chain(mode, postorder, child_ptr, child_idx, length, root, max_deg,
           rate_unit, pendant, rest, alpha_rate,
           X, eps, Z0, pi0, w0, wu0, alpha0,
           iterations, burn_in, thin, mh_c, mh_delta, trunc_tol, trunc_cap,
           inner_steps, w_step, sample_alpha, seed, hold_i, hold_j, record, rec_cap, moves,
           fixed_w):
    np.random.seed(seed)
    n = X.shape[0]
    n_nodes = postorder.shape[0]
    K = Z0.shape[1]
    cap = max(16, 2 * (K + trunc_cap + 1))
    Z = np.zeros((n, cap), dtype=np.int8)
    pi = np.zeros(cap)
    w = np.zeros(cap)
    cond = np.zeros((n, cap))
    Z[:, :K] = Z0
    pi[:K] = pi0
    w[:K] = w0
    wu = wu0.copy()
    alpha = alpha0

    lu0 = np.empty(n_nodes)
    lu1 = np.empty(n_nodes)
    lm0 = np.empty(n_nodes)
    ab0 = np.empty(n_nodes)
    ab1 = np.empty(n_nodes)
    pre0 = np.empty(max_deg + 1)
    pre1 = np.empty(max_deg + 1)
    col = np.empty(n, dtype=np.int8)
    D = np.zeros((n, n))
    logw = np.empty(4 * trunc_cap + 8 + cap)
    cand = np.empty(4 * trunc_cap + 8 + cap)
    cand_pi = np.empty(4 * trunc_cap + 8 + cap)
    colsum = np.zeros(cap, dtype=np.int64)

    if mode == 0:
        for k in range(K):
            _refresh(k, Z, pi, cond, col, postorder, child_ptr, child_idx, length, root,
                     lu0, lu1, lm0, ab0, ab1, pre0, pre1)

    n_keep = 0
    for it in range(iterations):
        if it >= burn_in and (it - burn_in) % thin == 0:
            n_keep += 1
    out_p = np.empty(n_keep)
    out_alpha = np.empty(n_keep)
    out_k = np.empty(n_keep, dtype=np.int64)
    nrec = n_keep if record else 0
    out_Z = np.zeros((nrec, n, rec_cap), dtype=np.int8)
    out_w = np.zeros((nrec, rec_cap))
    out_wu = np.zeros((nrec, n))
    overflow = False
    slot = 0

    for it in range(iterations):
        # grow storage ahead of any birth
        if K + trunc_cap + 2 > cap:
            new_cap = 2 * cap
            Z2 = np.zeros((n, new_cap), dtype=np.int8)
            c2 = np.zeros((n, new_cap))
            p2 = np.zeros(new_cap)
            w2 = np.zeros(new_cap)
            Z2[:, :cap] = Z
            c2[:, :cap] = cond
            p2[:cap] = pi
            w2[:cap] = w
            Z = Z2
            cond = c2
            pi = p2
            w = w2
            colsum = np.zeros(new_cap, dtype=np.int64)
            logw = np.empty(4 * trunc_cap + 8 + new_cap)
            cand = np.empty(4 * trunc_cap + 8 + new_cap)
            cand_pi = np.empty(4 * trunc_cap + 8 + new_cap)
            cap = new_cap

        _recompute_D(D, Z, w, wu, K)
        for i in range(n):
            for k in range(K):
                s = 0
                for v in range(n):
                    s += Z[v, k]
                colsum[k] = s
            # columns other objects own too, in random order; i's singletons go
            # to the birth move
            order = np.random.permutation(K)
            for idx in range(K):
                k = order[idx]
                old = Z[i, k]
                if colsum[k] - old == 0 or (moves & MOVE_GIBBS) == 0:
                    continue
                if mode == 0:
                    p1 = cond[i, k]
                else:
                    p1 = (colsum[k] - old) / n
                llc = _row_ll(i, X, D, eps, 0.0)
                lla = _row_ll_flip(i, k, 1 - old, X, D, Z, w, eps)
                if old == 1:
                    ll1 = llc
                    ll0 = lla
                else:
                    ll0 = llc
                    ll1 = lla
                lp1 = (math.log(p1) if p1 > 0.0 else -np.inf) + ll1
                lp0 = (math.log1p(-p1) if p1 < 1.0 else -np.inf) + ll0
                new = _two_point(lp0, lp1)
                if new != old:
                    _apply_flip(i, k, new, D, Z, w)
                    Z[i, k] = new
                    if mode == 0:
                        _refresh(k, Z, pi, cond, col, postorder, child_ptr, child_idx, length,
                                 root, lu0, lu1, lm0, ab0, ab1, pre0, pre1)

            # birth move over the columns owned by object i alone; existing
            # singletons are the first candidates, keeping their w and pi
            if (moves & MOVE_BIRTH) == 0:
                continue
            lam = alpha * rate_unit[i]
            n_single = 0
            k = 0
            while k < K:
                others = 0
                for v in range(n):
                    if v != i:
                        others += Z[v, k]
                if Z[i, k] == 1 and others == 0:
                    cand[n_single] = w[k]
                    cand_pi[n_single] = pi[k]
                    n_single += 1
                    for j in range(n):
                        if j != i:
                            D[i, j] -= w[k]
                    _remove_column(k, K, Z, pi, w, cond)
                    K -= 1
                else:
                    k += 1
            for m in range(n_single - 1, 0, -1):
                r = np.random.randint(0, m + 1)
                cand[m], cand[r] = cand[r], cand[m]
                cand_pi[m], cand_pi[r] = cand_pi[r], cand_pi[m]
            if lam <= 0.0 and n_single == 0:
                continue
            kmax = _trunc_level(lam, trunc_tol, trunc_cap) if lam > 0.0 else 0
            if n_single > kmax:
                kmax = n_single
            for m in range(n_single, kmax):
                cand[m] = fixed_w if fixed_w > 0.0 else np.random.gamma(1.0, 1.0)
            V = 0.0
            for kk in range(kmax + 1):
                if kk > 0:
                    V += cand[kk - 1]
                prior = kk * math.log(lam) - math.lgamma(kk + 1.0) if lam > 0.0 else (0.0 if kk == 0 else -np.inf)
                logw[kk] = prior + _row_ll(i, X, D, eps, V)
            k_new = _choose(logw, kmax + 1)
            V = 0.0
            for m in range(k_new):
                c = K + m
                for v in range(n):
                    Z[v, c] = 0
                Z[i, c] = 1
                w[c] = cand[m]
                V += cand[m]
                if mode == 0:
                    if m < n_single:
                        pi[c] = cand_pi[m]
                    else:
                        pi[c] = _draw_new_pi(pendant[i], rest[i], inner_steps, mh_c, mh_delta)
                    _refresh(c, Z, pi, cond, col, postorder, child_ptr, child_idx, length, root,
                             lu0, lu1, lm0, ab0, ab1, pre0, pre1)
            for j in range(n):
                if j != i:
                    D[i, j] += V
            K += k_new

        if mode == 0 and (moves & MOVE_PI):
            for k in range(K):
                cur = pi[k]
                var = mh_c * cur * (1.0 - cur) + mh_delta
                prop = cur + math.sqrt(var) * np.random.standard_normal()
                if prop <= 0.0 or prop >= 1.0:
                    continue
                t_old = _log_target_pi(k, cur, Z, col, postorder, child_ptr, child_idx, length,
                                       root, lu0, lu1, lm0)
                t_new = _log_target_pi(k, prop, Z, col, postorder, child_ptr, child_idx, length,
                                       root, lu0, lu1, lm0)
                var_back = mh_c * prop * (1.0 - prop) + mh_delta
                lr = t_new - t_old + normal_logpdf(cur, prop, var_back) - normal_logpdf(prop, cur, var)
                if math.log(np.random.random()) < lr:
                    pi[k] = prop
                    _refresh(k, Z, pi, cond, col, postorder, child_ptr, child_idx, length, root,
                             lu0, lu1, lm0, ab0, ab1, pre0, pre1)

        # weights: unique block first, then shared columns in random order
        n_w = n if moves & MOVE_WEIGHTS else 0
        for a in range(n_w):
            w_old = wu[a]
            w_new = w_old * math.exp(w_step * np.random.standard_normal())
            delta = w_new - w_old
            dll = 0.0
            for b in range(n):
                if b == a or X[a, b] + X[b, a] == 0:
                    continue
                dll += (_pair_ll(X[a, b], X[b, a], max(D[a, b] + delta, 0.0), D[b, a], eps)
                        - _pair_ll(X[a, b], X[b, a], D[a, b], D[b, a], eps))
            lr = dll - w_new + w_old + math.log(w_new) - math.log(w_old)
            if math.log(np.random.random()) < lr:
                wu[a] = w_new
                for b in range(n):
                    if b != a:
                        D[a, b] += delta
        order = np.random.permutation(K)
        for idx in range(K if n_w else 0):
            k = order[idx]
            w_old = w[k]
            w_new = w_old * math.exp(w_step * np.random.standard_normal())
            delta = w_new - w_old
            dll = 0.0
            for a in range(n):
                if Z[a, k] == 0:
                    continue
                for b in range(n):
                    if Z[b, k] == 1 or X[a, b] + X[b, a] == 0:
                        continue
                    dll += (_pair_ll(X[a, b], X[b, a], max(D[a, b] + delta, 0.0), D[b, a], eps)
                            - _pair_ll(X[a, b], X[b, a], D[a, b], D[b, a], eps))
            lr = dll - w_new + w_old + math.log(w_new) - math.log(w_old)
            if math.log(np.random.random()) < lr:
                w[k] = w_new
                for a in range(n):
                    if Z[a, k] == 0:
                        continue
                    for b in range(n):
                        if Z[b, k] == 0:
                            D[a, b] += delta

        if sample_alpha and (moves & MOVE_ALPHA):
            alpha = np.random.gamma(K + 1.0, 1.0 / alpha_rate)

        if it >= burn_in and (it - burn_in) % thin == 0:
            if hold_i >= 0:
                dij = D[hold_i, hold_j]
                dji = D[hold_j, hold_i]
                tot = dij + dji
                p = dij / tot if tot > 0.0 else 0.5
                out_p[slot] = (1.0 - eps) * p + 0.5 * eps
            else:
                out_p[slot] = np.nan
            out_alpha[slot] = alpha
            out_k[slot] = K
            if record:
                if K > rec_cap:
                    overflow = True
                else:
                    for v in range(n):
                        for k in range(K):
                            out_Z[slot, v, k] = Z[v, k]
                    for k in range(K):
                        out_w[slot, k] = w[k]
                    for v in range(n):
                        out_wu[slot, v] = wu[v]
            slot += 1

    return (out_p, out_alpha, out_k, out_Z, out_w, out_wu, overflow,
            Z[:, :K].copy(), pi[:K].copy(), w[:K].copy(), wu, alpha)


@dataclass
class FastChainResult:
    pair_probs: np.ndarray
    alpha: np.ndarray
    k_plus: np.ndarray
    samples: list
    final: dict


def _tree_setup(tree, mode, n):
    if mode == PIBP:
        total = total_edge_length(tree)
        pendant = np.array(tree.length[:n], dtype=float)
        rest = total - pendant
        rate_unit = digamma(total + 1.0) - digamma(rest + 1.0)
        rate_unit[pendant == 0] = 0.0
        alpha_rate = alpha_posterior_rate(total)
    else:
        pendant = np.ones(n)
        rest = np.full(n, n - 1.0)
        rate_unit = np.full(n, 1.0 / n)
        alpha_rate = float(np.sum(1.0 / np.arange(1, n + 1))) + 1.0
    return pendant, rest, rate_unit, alpha_rate


def run_eba_chain(tree, data, config, epsilon=DEFAULT_EPSILON, heldout=None, record=False,
                  init=None, w_step=WEIGHT_STEP, moves=ALL_MOVES, fixed_weight=None):
    """Run one compiled chain; ``tree=None`` selects the collapsed IBP.

    ``init`` may supply a dict with keys bits, pi, w, wu, alpha; otherwise Z
    is drawn from the prior at ``config.alpha_init`` and weights from
    Gamma(1, 1), all from ``config.seed``. ``fixed_weight`` pins every
    weight, including those of new columns, to one value and switches the
    weight moves off.
    """
    n = data.n_objects
    mode = IBP if tree is None else PIBP
    shape_tree = star_tree(n) if tree is None else tree
    if shape_tree.n_leaves != n:
        raise ValueError("tree and data disagree on the number of objects")
    rng = np.random.default_rng(config.seed)
    if init is None:
        fm = sample_generative(shape_tree, config.alpha_init, rng)
        init = {"bits": fm.bits, "pi": fm.pi, "w": rng.gamma(1.0, 1.0, fm.n_columns),
                "wu": rng.gamma(1.0, 1.0, n), "alpha": config.alpha_init}
    fixed_w = 0.0
    if fixed_weight is not None:
        if fixed_weight <= 0:
            raise ValueError("fixed_weight must be positive")
        fixed_w = float(fixed_weight)
        moves = int(moves) & ~MOVE_WEIGHTS
        init = dict(init, w=np.full(np.shape(init["bits"])[1], fixed_w), wu=np.full(n, fixed_w))
    kernel_seed = int(rng.integers(2**31 - 1))
    pendant, rest, rate_unit, alpha_rate = _tree_setup(tree, mode, n)
    hold_i, hold_j = (-1, -1) if heldout is None else (int(heldout[0]), int(heldout[1]))
    bits = np.ascontiguousarray(init["bits"], dtype=np.int8).reshape(n, -1)
    pis = np.asarray(init["pi"], dtype=float)
    if mode == IBP:
        pis = np.full(bits.shape[1], 0.5)
    rec_cap = 64
    while True:
        out = _chain(mode, shape_tree.postorder, shape_tree.child_ptr, shape_tree.child_idx,
                     shape_tree.length, shape_tree.root, shape_tree.max_degree,
                     rate_unit, pendant, rest, alpha_rate,
                     np.ascontiguousarray(data.wins, dtype=np.int64), float(epsilon),
                     bits, pis, np.asarray(init["w"], dtype=float),
                     np.asarray(init["wu"], dtype=float), float(init["alpha"]),
                     config.iterations, config.burn_in, config.thin, config.mh_c,
                     config.mh_delta, config.trunc_tol, config.trunc_cap,
                     config.inner_mh_steps, float(w_step), config.sample_alpha, kernel_seed,
                     hold_i, hold_j, record, rec_cap, int(moves), fixed_w)
        if not out[6]:
            break
        rec_cap *= 4
    p, alpha, kp, zs, ws, wus = out[:6]
    samples = []
    if record:
        for s in range(kp.shape[0]):
            k = int(kp[s])
            samples.append((zs[s, :, :k].copy(), ws[s, :k].copy(), wus[s].copy()))
    fz, fpi, fw, fwu, falpha = out[7:]
    final = {"bits": fz, "pi": fpi if mode == PIBP else np.full(fz.shape[1], np.nan),
             "w": fw, "wu": fwu, "alpha": float(falpha)}
    return FastChainResult(p, alpha, kp, samples, final)


def sample_choice_matrix(sample, epsilon=DEFAULT_EPSILON):
    """Noisy choice matrix of one recorded (Z_shared, w_shared, w_unique) sample."""
    from .eba import choice_matrix, full_features
    z, w, wu = sample
    return noisy_prob(choice_matrix(full_features(z), np.concatenate([wu, w])), epsilon)


def final_features(result):
    return FeatureMatrix(result.final["bits"], result.final["pi"])
