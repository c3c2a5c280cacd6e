"""Compiled kernels for tree Shapley values.

Path-dependent: the tree-conditional expectation of a tree is a sum over
leaves of products ``v * prod_{j in S} o_j * prod_{j not in S} z_j`` where,
for each distinct feature ``j`` on the root-to-leaf path, ``z_j`` is the
fraction of training cover following the path through ``j``'s splits and
``o_j`` says whether the explained row follows them. The Shapley values of
such a product game come from the polynomial ``prod_j (z_j + o_j t)`` in
O(d^2) per leaf, where ``d`` is the number of distinct path features.

Interventional: for one explained row and one reference row, only leaves
reachable by a hybrid of the two contribute; each such leaf fixes a set A of
features that must come from the explained row and a set B that must come
from the reference, and pays ``v (|A|-1)! |B|! / (|A|+|B|)!`` to each member
of A and minus ``v |A|! (|B|-1)! / (|A|+|B|)!`` to each member of B.
"""

from __future__ import annotations

import math

import numba
import numpy as np


def leaf_paths(feature, threshold, left, right, cover):
    """Per-leaf path tables of one tree, padded to the tree depth."""
    n = len(feature)
    parent = np.full(n, -1, dtype=np.int64)
    went_left = np.zeros(n, dtype=np.bool_)
    for node in range(n):
        if feature[node] >= 0:
            parent[left[node]] = node
            went_left[left[node]] = True
            parent[right[node]] = node
    leaves = np.flatnonzero(feature < 0)
    paths = []
    for leaf in leaves:
        steps = []
        node = leaf
        while parent[node] >= 0:
            steps.append((parent[node], went_left[node], node))
            node = parent[node]
        paths.append(steps[::-1])
    depth = max(1, max(len(p) for p in paths))
    L = len(leaves)
    n_unique = np.zeros(L, dtype=np.int64)
    ufeat = np.zeros((L, depth), dtype=np.int64)
    zfrac = np.ones((L, depth))
    n_split = np.zeros(L, dtype=np.int64)
    sfeat = np.zeros((L, depth), dtype=np.int64)
    sthr = np.zeros((L, depth))
    sleft = np.zeros((L, depth), dtype=np.bool_)
    sidx = np.zeros((L, depth), dtype=np.int64)
    for k, steps in enumerate(paths):
        slot: dict[int, int] = {}
        for s, (node, is_left, child) in enumerate(steps):
            f = int(feature[node])
            if f not in slot:
                slot[f] = len(slot)
                ufeat[k, slot[f]] = f
            u = slot[f]
            zfrac[k, u] *= cover[child] / cover[node]
            sfeat[k, s] = f
            sthr[k, s] = threshold[node]
            sleft[k, s] = is_left
            sidx[k, s] = u
        n_unique[k] = len(slot)
        n_split[k] = len(steps)
    return leaves, n_unique, ufeat, zfrac, n_split, sfeat, sthr, sleft, sidx


def shapley_weights(d_max: int) -> np.ndarray:
    """``w[d, k] = k! (d-k-1)! / d!`` for subsets of size k among d players."""
    w = np.zeros((d_max + 1, max(d_max, 1)))
    for d in range(1, d_max + 1):
        for k in range(d):
            w[d, k] = math.exp(math.lgamma(k + 1) + math.lgamma(d - k) - math.lgamma(d + 1))
    return w


@numba.njit(cache=True)
def path_dependent_phi(X, leaf_value, n_unique, ufeat, zfrac, n_split, sfeat, sthr, sleft, sidx, weights, phi):
    """Add one tree's path-dependent Shapley values for every row of X into phi."""
    n = X.shape[0]
    L = leaf_value.shape[0]
    D = ufeat.shape[1]
    o = np.empty(D)
    P = np.empty(D + 2)
    Q = np.empty(D + 1)
    for i in range(n):
        for leaf in range(L):
            v = leaf_value[leaf]
            if v == 0.0:
                continue
            d = n_unique[leaf]
            if d == 0:
                continue
            for u in range(d):
                o[u] = 1.0
            for s in range(n_split[leaf]):
                goes_left = X[i, sfeat[leaf, s]] <= sthr[leaf, s]
                if goes_left != sleft[leaf, s]:
                    o[sidx[leaf, s]] = 0.0
            # P(t) = prod_u (z_u + o_u t)
            P[0] = 1.0
            for k in range(1, d + 1):
                P[k] = 0.0
            for u in range(d):
                z = zfrac[leaf, u]
                for k in range(u + 1, 0, -1):
                    P[k] = z * P[k] + o[u] * P[k - 1]
                P[0] = z * P[0]
            for u in range(d):
                z = zfrac[leaf, u]
                if o[u] == 0.0:
                    for k in range(d):
                        Q[k] = P[k] / z
                else:
                    # synthetic division by (t + z), top coefficient first
                    Q[d - 1] = P[d]
                    for k in range(d - 1, 0, -1):
                        Q[k - 1] = P[k] - z * Q[k]
                total = 0.0
                for k in range(d):
                    total += Q[k] * weights[d, k]
                phi[i, ufeat[leaf, u]] += v * (o[u] - z) * total


@numba.njit(cache=True)
def _interventional(x, r, feature, threshold, left, right, leaf_value, fact, out):
    """Depth-first walk over hybrid paths with an explicit stack.

    A stack entry is (node, number of decided features, |A|, |B|, feature
    decided on entering, its side); side 1 means taken from x, 2 from r.
    """
    depth = feature.shape[0] + 1
    st_node = np.empty(depth, dtype=np.int64)
    st_dec = np.empty(depth, dtype=np.int64)
    st_a = np.empty(depth, dtype=np.int64)
    st_b = np.empty(depth, dtype=np.int64)
    st_feat = np.empty(depth, dtype=np.int64)
    st_side = np.empty(depth, dtype=np.int8)
    dec_feat = np.empty(depth, dtype=np.int64)
    dec_side = np.empty(depth, dtype=np.int8)
    st_node[0] = 0
    st_dec[0] = 0
    st_a[0] = 0
    st_b[0] = 0
    st_feat[0] = -1
    st_side[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        n_dec = st_dec[top]
        n_a = st_a[top]
        n_b = st_b[top]
        if st_feat[top] >= 0:
            dec_feat[n_dec - 1] = st_feat[top]
            dec_side[n_dec - 1] = st_side[top]
        f = feature[node]
        if f < 0:
            v = leaf_value[node]
            if n_a + n_b == 0 or v == 0.0:
                continue
            wa = 0.0
            wb = 0.0
            if n_a > 0:
                wa = v * fact[n_a - 1] * fact[n_b] / fact[n_a + n_b]
            if n_b > 0:
                wb = v * fact[n_a] * fact[n_b - 1] / fact[n_a + n_b]
            for k in range(n_dec):
                if dec_side[k] == 1:
                    out[dec_feat[k]] += wa
                else:
                    out[dec_feat[k]] -= wb
            continue
        x_next = left[node] if x[f] <= threshold[node] else right[node]
        r_next = left[node] if r[f] <= threshold[node] else right[node]
        side = 0
        for k in range(n_dec):
            if dec_feat[k] == f:
                side = dec_side[k]
                break
        if side != 0 or x_next == r_next:
            nxt = x_next
            if side == 2:
                nxt = r_next
            st_node[top] = nxt
            st_dec[top] = n_dec
            st_a[top] = n_a
            st_b[top] = n_b
            st_feat[top] = -1
            top += 1
        else:
            st_node[top] = r_next
            st_dec[top] = n_dec + 1
            st_a[top] = n_a
            st_b[top] = n_b + 1
            st_feat[top] = f
            st_side[top] = 2
            top += 1
            st_node[top] = x_next
            st_dec[top] = n_dec + 1
            st_a[top] = n_a + 1
            st_b[top] = n_b
            st_feat[top] = f
            st_side[top] = 1
            top += 1


@numba.njit(cache=True)
def interventional_phi(X, R, feature, threshold, left, right, leaf_value, fact, phi):
    """Add one tree's Shapley values, averaged over reference rows R, into phi."""
    M = X.shape[1]
    out = np.zeros(M)
    nr = R.shape[0]
    for i in range(X.shape[0]):
        out[:] = 0.0
        for b in range(nr):
            _interventional(X[i], R[b], feature, threshold, left, right, leaf_value, fact, out)
        for j in range(M):
            phi[i, j] += out[j] / nr
