"""Histogram CART regression forest compiled with numba.

Covariates are binned once per forest (at most 256 bins per column, edges at
midpoints between distinct values or between quantiles).  Each tree is grown
on a bootstrap resample by greedy variance-reduction splits of the form
``x[f] < edge``.  Leaf membership of the original rows, not the bootstrap
counts, defines the smoothing weights.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

MAX_BINS = 256


def bin_edges(X: np.ndarray, max_bins: int = MAX_BINS) -> list:
    edges = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        if u.size > max_bins:
            qs = np.quantile(X[:, j], np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
            u = np.unique(np.concatenate([u[:1], qs, u[-1:]]))
        edges.append(0.5 * (u[1:] + u[:-1]))
    return edges


def encode(X: np.ndarray, edges: list) -> np.ndarray:
    codes = np.empty(X.shape, dtype=np.int32)
    for j, e in enumerate(edges):
        codes[:, j] = np.searchsorted(e, X[:, j], side="right")
    return codes


@njit(cache=True)
def _grow(codes, y, counts, n_bins, max_depth, min_leaf, max_features, seed,
          feat, thr, left, right):
    """Grow one tree in place; returns the node count.

    ``counts`` are bootstrap multiplicities; ``min_leaf`` counts distinct
    rows, as in the usual bootstrap-by-weights implementation.
    """
    np.random.seed(seed)
    d = codes.shape[1]
    n_rows = 0
    for i in range(counts.shape[0]):
        if counts[i] > 0:
            n_rows += 1
    idx = np.empty(n_rows, dtype=np.int64)
    k = 0
    for i in range(counts.shape[0]):
        if counts[i] > 0:
            idx[k] = i
            k += 1
    buf = np.empty(n_rows, dtype=np.int64)
    hw = np.zeros(n_bins)
    hs = np.zeros(n_bins)
    hc = np.zeros(n_bins, dtype=np.int64)
    features = np.arange(d)

    stack_node = np.empty(2 * n_rows + 2, dtype=np.int64)
    stack_lo = np.empty(2 * n_rows + 2, dtype=np.int64)
    stack_hi = np.empty(2 * n_rows + 2, dtype=np.int64)
    stack_depth = np.empty(2 * n_rows + 2, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n_rows
    stack_depth[0] = 0
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]
        feat[node] = -1
        thr[node] = -1
        left[node] = -1
        right[node] = -1
        n_node = hi - lo
        if (max_depth >= 0 and depth >= max_depth) or n_node < 2 * min_leaf:
            continue
        W = 0.0
        S = 0.0
        SS = 0.0
        for p in range(lo, hi):
            i = idx[p]
            w = counts[i]
            W += w
            S += w * y[i]
            SS += w * y[i] * y[i]
        if SS / W - (S / W) ** 2 <= 1e-14 * (1.0 + SS / W):
            continue
        parent = S * S / W
        best_gain = parent
        best_f = -1
        best_b = -1
        # partial Fisher-Yates for the candidate features
        for a in range(max_features):
            r = a + np.random.randint(d - a)
            tmp = features[a]
            features[a] = features[r]
            features[r] = tmp
        for a in range(max_features):
            f = features[a]
            for b in range(n_bins):
                hw[b] = 0.0
                hs[b] = 0.0
                hc[b] = 0
            top = 0
            for p in range(lo, hi):
                i = idx[p]
                b = codes[i, f]
                w = counts[i]
                hw[b] += w
                hs[b] += w * y[i]
                hc[b] += 1
                if b > top:
                    top = b
            wl = 0.0
            sl = 0.0
            cl = 0
            for b in range(top):
                wl += hw[b]
                sl += hs[b]
                cl += hc[b]
                if hc[b] == 0:
                    continue
                cr = n_node - cl
                if cl < min_leaf:
                    continue
                if cr < min_leaf:
                    break
                wr = W - wl
                sr = S - sl
                gain = sl * sl / wl + sr * sr / wr
                if gain > best_gain + 1e-12 * abs(best_gain):
                    best_gain = gain
                    best_f = f
                    best_b = b
        if best_f < 0:
            continue
        # stable partition of idx[lo:hi] on code <= best_b
        nl = 0
        nr = 0
        for p in range(lo, hi):
            i = idx[p]
            if codes[i, best_f] <= best_b:
                idx[lo + nl] = i
                nl += 1
            else:
                buf[nr] = i
                nr += 1
        for q in range(nr):
            idx[lo + nl + q] = buf[q]
        feat[node] = best_f
        thr[node] = best_b
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[sp] = n_nodes + 1
        stack_lo[sp] = lo + nl
        stack_hi[sp] = hi
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = n_nodes
        stack_lo[sp] = lo
        stack_hi[sp] = lo + nl
        stack_depth[sp] = depth + 1
        sp += 1
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def _apply(codes, feat, thr, left, right):
    n = codes.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while left[node] >= 0:
            if codes[i, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


class Tree:
    __slots__ = ("feat", "thr", "left", "right", "node_count")

    def __init__(self, feat, thr, left, right, node_count):
        self.feat = feat
        self.thr = thr
        self.left = left
        self.right = right
        self.node_count = node_count

    def apply(self, codes):
        return _apply(codes, self.feat, self.thr, self.left, self.right)


def grow_tree(codes, y, counts, n_bins, max_depth, min_leaf, max_features, seed) -> Tree:
    cap = 2 * int(np.count_nonzero(counts)) + 1
    feat = np.empty(cap, dtype=np.int64)
    thr = np.empty(cap, dtype=np.int64)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    md = -1 if max_depth is None else int(max_depth)
    nn = _grow(codes, y, counts.astype(np.float64), n_bins, md, int(min_leaf), int(max_features),
               int(seed) & 0x7FFFFFFF, feat, thr, left, right)
    return Tree(feat[:nn].copy(), thr[:nn].copy(), left[:nn].copy(), right[:nn].copy(), nn)


class CartForest:
    """Bagged histogram CART regressors."""

    def __init__(self, n_estimators=100, max_depth=6, min_samples_leaf=0.05, max_features=None, seed=0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.seed = seed

    def _n_features(self, d: int) -> int:
        mf = self.max_features
        if mf is None:
            return d
        if mf == "third":
            return max(1, math.ceil(d / 3))
        if isinstance(mf, float):
            return max(1, min(d, int(math.ceil(mf * d))))
        return max(1, min(d, int(mf)))

    def _min_leaf(self, m: int) -> int:
        msl = self.min_samples_leaf
        if isinstance(msl, float) and msl < 1.0:
            return max(1, int(math.ceil(msl * m)))
        return max(1, int(msl))

    def fit(self, X, y) -> "CartForest":
        X = np.ascontiguousarray(X, dtype=float)
        y = np.ascontiguousarray(y, dtype=float)
        m, d = X.shape
        self.edges_ = bin_edges(X)
        codes = encode(X, self.edges_)
        n_bins = max(len(e) for e in self.edges_) + 1
        min_leaf = self._min_leaf(m)
        mf = self._n_features(d)
        states = np.random.SeedSequence(self.seed).generate_state(self.n_estimators)
        self.trees_ = []
        for t in range(self.n_estimators):
            rng = np.random.default_rng(int(states[t]))
            counts = np.bincount(rng.integers(0, m, m), minlength=m)
            self.trees_.append(grow_tree(codes, y, counts, n_bins, self.max_depth, min_leaf, mf, states[t]))
        return self

    def apply(self, X) -> np.ndarray:
        codes = encode(np.atleast_2d(np.asarray(X, dtype=float)), self.edges_)
        return np.column_stack([t.apply(codes) for t in self.trees_])


@njit(cache=True)
def dense_weights(q_cols, leaf_ptr, leaf_rows, m):
    """Row ``i``: average over trees of uniform weight on the rows of ``i``'s leaf."""
    nq, T = q_cols.shape
    W = np.zeros((nq, m))
    for i in range(nq):
        valid = 0
        for t in range(T):
            if q_cols[i, t] >= 0:
                valid += 1
        if valid == 0:
            for j in range(m):
                W[i, j] = 1.0 / m
            continue
        for t in range(T):
            c = q_cols[i, t]
            if c < 0:
                continue
            a = leaf_ptr[c]
            b = leaf_ptr[c + 1]
            w = 1.0 / (valid * (b - a))
            for p in range(a, b):
                W[i, leaf_rows[p]] += w
    return W


@njit(cache=True)
def outcome_stats(q_cols, leaf_ptr, leaf_rank, y_sorted, c_upper, c_lower, tail, tol):
    """Weighted mean, two quantiles and two CVaRs per query row.

    ``leaf_rank`` lists, per leaf, the ranks of its rows in ``y_sorted``.
    """
    nq, T = q_cols.shape
    m = y_sorted.shape[0]
    out = np.empty((nq, 5))
    w = np.zeros(m)
    for i in range(nq):
        for j in range(m):
            w[j] = 0.0
        valid = 0
        for t in range(T):
            if q_cols[i, t] >= 0:
                valid += 1
        if valid == 0:
            for j in range(m):
                w[j] = 1.0 / m
        else:
            for t in range(T):
                c = q_cols[i, t]
                if c < 0:
                    continue
                a = leaf_ptr[c]
                b = leaf_ptr[c + 1]
                wt = 1.0 / (valid * (b - a))
                for p in range(a, b):
                    w[leaf_rank[p]] += wt
        mu = 0.0
        for j in range(m):
            mu += w[j] * y_sorted[j]
        cum = 0.0
        qu = y_sorted[m - 1]
        ql = y_sorted[m - 1]
        found_l = False
        for j in range(m):
            cum += w[j]
            if not found_l and cum >= c_lower - tol:
                ql = y_sorted[j]
                found_l = True
            if cum >= c_upper - tol:
                qu = y_sorted[j]
                break
        hu = 0.0
        hl = 0.0
        for j in range(m):
            dv = y_sorted[j] - qu
            if dv > 0.0:
                hu += w[j] * dv
            dv = y_sorted[j] - ql
            if dv < 0.0:
                hl += w[j] * dv
        out[i, 0] = mu
        out[i, 1] = qu
        out[i, 2] = ql
        out[i, 3] = qu + tail * hu
        out[i, 4] = ql + tail * hl
    return out
