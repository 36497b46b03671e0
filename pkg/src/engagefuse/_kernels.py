"""Compiled tree grower. Must stay split-for-split identical to ``forest._grow_reference``."""

import numpy as np
from numba import njit

# keep in sync with forest._GAIN_TOL
GAIN_TOL = 1e-12


@njit(cache=True)
def draw_features(uniforms, pos, n_features, mtry):
    """Partial Fisher-Yates over range(n_features) consuming ``mtry`` uniforms; sorted result."""
    perm = np.arange(n_features)
    for i in range(mtry):
        j = i + int(uniforms[pos + i] * (n_features - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return np.sort(perm[:mtry])


@njit(cache=True)
def split_search(X, y, rows, feats, min_samples_leaf):
    """Returns (column, threshold, found) for the rows/feature subset; mirrors forest._split_search."""
    n = rows.shape[0]
    m = feats.shape[0]
    scores = np.full((n - 1, m), -np.inf)
    sorted_vals = np.empty((n, m))
    total_off = 0.0
    for r in range(n):
        total_off += y[rows[r]]
    for c in range(m):
        f = feats[c]
        vals = np.empty(n)
        for r in range(n):
            vals[r] = X[rows[r], f]
        order = np.argsort(vals, kind="mergesort")
        off_left = 0.0
        for i in range(n):
            sorted_vals[i, c] = vals[order[i]]
        for i in range(n - 1):
            off_left += y[rows[order[i]]]
            if not sorted_vals[i + 1, c] > sorted_vals[i, c]:
                continue
            n_left = i + 1.0
            n_right = n - n_left
            if n_left < min_samples_leaf or n_right < min_samples_leaf:
                continue
            on_left = n_left - off_left
            off_right = total_off - off_left
            on_right = n_right - off_right
            scores[i, c] = (on_left * on_left + off_left * off_left) / n_left \
                + (on_right * on_right + off_right * off_right) / n_right
    on_total = n - total_off
    parent_ss = (on_total * on_total + total_off * total_off) / n
    top = -np.inf
    for c in range(m):
        for i in range(n - 1):
            if scores[i, c] > top:
                top = scores[i, c]
    if not (top - parent_ss) / n > GAIN_TOL:
        return 0, 0.0, False
    cut = top - GAIN_TOL * n
    for c in range(m):
        for i in range(n - 1):
            if scores[i, c] >= cut:
                lo = sorted_vals[i, c]
                hi = sorted_vals[i + 1, c]
                threshold = (lo + hi) / 2.0
                if not threshold < hi:
                    threshold = lo
                return c, threshold, True
    return 0, 0.0, False


@njit(cache=True)
def grow_tree(X, y, max_depth, min_samples_leaf, mtry, uniforms):
    """Grow one tree depth-first (left subtree before right), as flat arrays.

    ``max_depth < 0`` means unbounded. Node ids follow preorder. Leaves have
    feature -1. Returns (feature, threshold, left, right, on_count, off_count,
    n_nodes, depth).
    """
    n = X.shape[0]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    on_count = np.zeros(cap, dtype=np.int64)
    off_count = np.zeros(cap, dtype=np.int64)

    idx = np.arange(n)
    scratch = np.empty(n, dtype=np.int64)
    # stack entries: start, end, depth, parent, is_left
    stack = np.empty((cap, 5), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = n
    stack[0, 2] = 0
    stack[0, 3] = -1
    stack[0, 4] = 0
    top = 1
    n_nodes = 0
    max_seen = 0
    upos = 0
    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        depth = stack[top, 2]
        parent = stack[top, 3]
        is_left = stack[top, 4]
        node = n_nodes
        n_nodes += 1
        if depth > max_seen:
            max_seen = depth
        if parent >= 0:
            if is_left == 1:
                left[parent] = node
            else:
                right[parent] = node
        rows = idx[start:end]
        off = 0
        for r in range(rows.shape[0]):
            off += int(y[rows[r]])
        on = rows.shape[0] - off
        on_count[node] = on
        off_count[node] = off
        size = end - start
        if on == 0 or off == 0:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue
        if size < 2 * min_samples_leaf:
            continue
        feats = draw_features(uniforms, upos, d, mtry)
        upos += mtry
        c, thr, found = split_search(X, y, rows, feats, min_samples_leaf)
        if not found:
            continue
        f = feats[c]
        feature[node] = f
        threshold[node] = thr
        # stable partition of idx[start:end]
        nl = 0
        for r in range(size):
            if X[idx[start + r], f] <= thr:
                scratch[nl] = idx[start + r]
                nl += 1
        k = nl
        for r in range(size):
            if not X[idx[start + r], f] <= thr:
                scratch[k] = idx[start + r]
                k += 1
        for r in range(size):
            idx[start + r] = scratch[r]
        # right pushed first so the left subtree is finished first
        stack[top, 0] = start + nl
        stack[top, 1] = end
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 0
        top += 1
        stack[top, 0] = start
        stack[top, 1] = start + nl
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 1
        top += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            on_count[:n_nodes], off_count[:n_nodes], n_nodes, max_seen)
