"""Numba kernels for tree growing and routing.

One grower serves both tree kinds: causal trees maximize the squared
difference in child effect estimates on residualized treatment/outcome,
regression trees maximize variance reduction. Candidate thresholds are
midpoints between consecutive distinct sorted values; scans keep
per-feature orderings via stable partition so each node costs O(p * rows);
accumulations use compensated summation so scores are order-stable.

All randomness comes from an explicit splitmix64 state passed by the
caller, so trees are reproducible regardless of thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)

LEAF = np.int32(-1)


@njit(cache=True, nogil=True, inline="always")
def _next_u64(state):
    state = state + _GAMMA
    z = state
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    z = z ^ (z >> _S31)
    return state, z


@njit(cache=True, nogil=True)
def _sample_features(p, mtry, state, out):
    """Partial Fisher-Yates: writes the chosen feature ids, sorted
    ascending, into out[:k] and returns (k, state)."""
    for f in range(p):
        out[f] = f
    k = mtry if mtry < p else p
    if k < p:
        for i in range(k):
            state, z = _next_u64(state)
            j = i + int(z % np.uint64(p - i))
            tmp = out[i]
            out[i] = out[j]
            out[j] = tmp
        out[:k].sort()
    return k, state


@njit(cache=True, nogil=True)
def grow_tree(
    X,            # (n, p) float64, rows of the split half
    w_res,        # residualized treatment (zeros for regression mode)
    y_res,        # residualized outcome / regression target
    w_raw,        # int8 raw treatment (zeros for regression mode)
    is_causal,    # boolean mode switch
    min_treat,    # min treated rows per child (causal)
    min_ctrl,     # min control rows per child (causal)
    min_node,     # min rows per child (regression)
    alpha,        # min child share of parent
    mtry,
    imbalance_penalty,
    seed,         # uint64
):
    """Grow one tree greedily; returns (feature, threshold, left, right,
    n_nodes). feature == -1 marks a leaf. Children always get higher node
    ids than their parent."""
    n, p = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, LEAF, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)

    ordws = np.empty((p, n), np.int32)
    for f in range(p):
        ordws[f] = np.argsort(X[:, f]).astype(np.int32)

    tmp = np.empty(n, np.int32)
    feat_buf = np.empty(p, np.int64)
    state = seed

    # node ranges into the shared per-feature ordering workspace
    stack_node = np.empty(cap, np.int32)
    stack_lo = np.empty(cap, np.int64)
    stack_hi = np.empty(cap, np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        m = hi - lo

        # parent summaries (feature 0's range holds the node's row set)
        sw2_p = 0.0
        sw2_c = 0.0
        swy_p = 0.0
        swy_c = 0.0
        sy_p = 0.0
        sy_c = 0.0
        syy_p = 0.0
        syy_c = 0.0
        nt_p = 0
        for ii in range(lo, hi):
            r = ordws[0, ii]
            w = w_res[r]
            y = y_res[r]
            v = w * w - sw2_c
            t = sw2_p + v
            sw2_c = (t - sw2_p) - v
            sw2_p = t
            v = w * y - swy_c
            t = swy_p + v
            swy_c = (t - swy_p) - v
            swy_p = t
            v = y - sy_c
            t = sy_p + v
            sy_c = (t - sy_p) - v
            sy_p = t
            v = y * y - syy_c
            t = syy_p + v
            syy_c = (t - syy_p) - v
            syy_p = t
            nt_p += w_raw[r]
        nc_p = m - nt_p

        splittable = True
        if is_causal:
            if nt_p < 2 * min_treat or nc_p < 2 * min_ctrl or sw2_p <= 0.0:
                splittable = False
        else:
            if m < 2 * min_node:
                splittable = False
            elif syy_p - (sy_p * sy_p) / m <= 1e-12 * (syy_p + 1e-30):
                splittable = False  # (near-)constant target

        best_score = 0.0
        best_f = -1
        best_thr = 0.0
        best_nl = 0

        if splittable:
            k, state = _sample_features(p, mtry, state, feat_buf)
            min_child = alpha * m
            for fi in range(k):
                f = int(feat_buf[fi])
                sw2_l = 0.0
                sw2_lc = 0.0
                swy_l = 0.0
                swy_lc = 0.0
                sy_l = 0.0
                sy_lc = 0.0
                nt_l = 0
                for ii in range(lo, hi - 1):
                    r = ordws[f, ii]
                    w = w_res[r]
                    y = y_res[r]
                    v = w * w - sw2_lc
                    t = sw2_l + v
                    sw2_lc = (t - sw2_l) - v
                    sw2_l = t
                    v = w * y - swy_lc
                    t = swy_l + v
                    swy_lc = (t - swy_l) - v
                    swy_l = t
                    v = y - sy_lc
                    t = sy_l + v
                    sy_lc = (t - sy_l) - v
                    sy_l = t
                    nt_l += w_raw[r]
                    x_here = X[r, f]
                    x_next = X[ordws[f, ii + 1], f]
                    if x_here >= x_next:
                        continue
                    nl = ii - lo + 1
                    nr = m - nl
                    if nl < min_child or nr < min_child:
                        continue
                    if is_causal:
                        nt_r = nt_p - nt_l
                        nc_l = nl - nt_l
                        nc_r = nr - nt_r
                        if nt_l < min_treat or nt_r < min_treat:
                            continue
                        if nc_l < min_ctrl or nc_r < min_ctrl:
                            continue
                        sw2_r = sw2_p - sw2_l
                        if sw2_l <= 0.0 or sw2_r <= 0.0:
                            continue
                        tau_l = swy_l / sw2_l
                        tau_r = (swy_p - swy_l) / sw2_r
                        d = tau_l - tau_r
                        score = (nl * nr) / (m * m) * d * d
                        if imbalance_penalty > 0.0:
                            score -= imbalance_penalty * (1.0 / nl + 1.0 / nr)
                    else:
                        if nl < min_node or nr < min_node:
                            continue
                        sy_r = sy_p - sy_l
                        score = (
                            sy_l * sy_l / nl
                            + sy_r * sy_r / nr
                            - sy_p * sy_p / m
                        )
                        if score <= 1e-10 * (syy_p + 1e-30):
                            continue
                    if score > best_score:
                        best_score = score
                        best_f = f
                        best_thr = 0.5 * (x_here + x_next)
                        best_nl = nl

        if best_f < 0:
            feature[node] = LEAF
            continue

        feature[node] = best_f
        threshold[node] = best_thr

        # stable partition of every feature ordering on the chosen split
        for f in range(p):
            wl = lo
            kr = 0
            for ii in range(lo, hi):
                r = ordws[f, ii]
                if X[r, best_f] <= best_thr:
                    ordws[f, wl] = r
                    wl += 1
                else:
                    tmp[kr] = r
                    kr += 1
            for jj in range(kr):
                ordws[f, wl + jj] = tmp[jj]

        mid = lo + best_nl
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        stack_node[top] = lid
        stack_lo[top] = lo
        stack_hi[top] = mid
        top += 1
        stack_node[top] = rid
        stack_lo[top] = mid
        stack_hi[top] = hi
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def route(feature, threshold, left, right, X, out):
    """Leaf node id for every row of X."""
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node


@njit(cache=True, nogil=True)
def causal_accumulate(offsets, feature, threshold, left, right,
                      leaf_num, leaf_den, X, out_num, out_den, lo, hi):
    """Accumulate forest-weight numerator/denominator for query rows
    [lo, hi); trees are visited in index order so sums are reproducible."""
    n_trees = offsets.shape[0] - 1
    for i in range(lo, hi):
        num = 0.0
        den = 0.0
        for t in range(n_trees):
            node = offsets[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            num += leaf_num[node]
            den += leaf_den[node]
        out_num[i] = num
        out_den[i] = den


@njit(cache=True, nogil=True)
def regression_accumulate(offsets, feature, threshold, left, right,
                          leaf_value, X, cluster_code, tree_has_cluster,
                          skip_own_cluster, out_sum, out_cnt, lo, hi):
    """Average tree predictions for rows [lo, hi).

    With skip_own_cluster, trees whose subsample contains the row's
    cluster are excluded (out-of-bag prediction); out_cnt reports how many
    trees contributed.
    """
    n_trees = offsets.shape[0] - 1
    for i in range(lo, hi):
        s = 0.0
        c = 0
        for t in range(n_trees):
            if skip_own_cluster and tree_has_cluster[t, cluster_code[i]]:
                continue
            node = offsets[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            s += leaf_value[node]
            c += 1
        out_sum[i] = s
        out_cnt[i] = c
