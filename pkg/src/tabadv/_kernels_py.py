"""Pure-Python/numpy versions of the hot tree kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference side of the kernel benchmark. Both modules expose the same
functions with the same signatures.

Trees are passed as packed node arrays (all trees of an ensemble
concatenated) plus an array of root offsets. A node is a leaf iff
``left[node] < 0``. Samples go left when ``x[feature] <= threshold``.
"""

import numpy as np


def ensemble_sum(left, right, feature, threshold, value, roots, X):
    """Sum of leaf values reached by each row of ``X`` over all trees."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    out = np.zeros(n, dtype=np.float64)
    rows = np.arange(n)
    for root in roots:
        node = np.full(n, root, dtype=np.int64)
        active = left[node] >= 0
        while active.any():
            idx = node[active]
            go_left = X[rows[active], feature[idx]] <= threshold[idx]
            node[active] = np.where(go_left, left[idx], right[idx])
            active = left[node] >= 0
        out += value[node]
    return out


def ensemble_apply(left, right, feature, threshold, roots, X):
    """Leaf index reached by each row in each tree, shape (n_rows, n_trees)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    out = np.empty((n, len(roots)), dtype=np.int64)
    rows = np.arange(n)
    for t, root in enumerate(roots):
        node = np.full(n, root, dtype=np.int64)
        active = left[node] >= 0
        while active.any():
            idx = node[active]
            go_left = X[rows[active], feature[idx]] <= threshold[idx]
            node[active] = np.where(go_left, left[idx], right[idx])
            active = left[node] >= 0
        out[:, t] = node
    return out


def _extend(fi, zf, of, pw, depth, zero_fraction, one_fraction, feature_index):
    fi[depth] = feature_index
    zf[depth] = zero_fraction
    of[depth] = one_fraction
    pw[depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[i + 1] += one_fraction * pw[i] * (i + 1) / (depth + 1)
        pw[i] = zero_fraction * pw[i] * (depth - i) / (depth + 1)


def _unwind(fi, zf, of, pw, depth, path_index):
    one_fraction = of[path_index]
    zero_fraction = zf[path_index]
    next_one = pw[depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = pw[i]
            pw[i] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - pw[i] * zero_fraction * (depth - i) / (depth + 1)
        else:
            pw[i] = pw[i] * (depth + 1) / (zero_fraction * (depth - i))
    for i in range(path_index, depth):
        fi[i] = fi[i + 1]
        zf[i] = zf[i + 1]
        of[i] = of[i + 1]


def _unwound_sum(zf, of, pw, depth, path_index):
    one_fraction = of[path_index]
    zero_fraction = zf[path_index]
    next_one = pw[depth]
    total = 0.0
    if one_fraction != 0.0:
        for i in range(depth - 1, -1, -1):
            tmp = next_one / ((i + 1) * one_fraction)
            total += tmp
            next_one = pw[i] - tmp * zero_fraction * (depth - i)
    else:
        for i in range(depth - 1, -1, -1):
            total += pw[i] / (zero_fraction * (depth - i))
    return total * (depth + 1)


def _recurse(tree, x, phi, node, depth, parent, pz, po, pfeat):
    left, right, feature, threshold, value, weight = tree
    fi, zf, of, pw = (a.copy() for a in parent)
    _extend(fi, zf, of, pw, depth, pz, po, pfeat)

    if left[node] < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(zf, of, pw, depth, i)
            phi[fi[i]] += w * (of[i] - zf[i]) * value[node]
        return

    split = feature[node]
    if x[split] <= threshold[node]:
        hot, cold = left[node], right[node]
    else:
        hot, cold = right[node], left[node]
    hot_zero = weight[hot] / weight[node]
    cold_zero = weight[cold] / weight[node]
    incoming_zero = 1.0
    incoming_one = 1.0

    for k in range(1, depth + 1):
        if fi[k] == split:
            incoming_zero = zf[k]
            incoming_one = of[k]
            _unwind(fi, zf, of, pw, depth, k)
            depth -= 1
            break

    path = (fi, zf, of, pw)
    _recurse(tree, x, phi, hot, depth + 1, path, hot_zero * incoming_zero, incoming_one, split)
    _recurse(tree, x, phi, cold, depth + 1, path, cold_zero * incoming_zero, 0.0, split)


def ensemble_shap(left, right, feature, threshold, value, weight, roots, max_depth, X, n_features):
    """Path-dependent Tree-SHAP attributions summed over all trees.

    Returns an array of shape (n_rows, n_features). Leaf values are used
    as-is; any per-ensemble scaling is applied by the caller.
    """
    X = np.asarray(X, dtype=np.float64)
    out = np.zeros((X.shape[0], n_features), dtype=np.float64)
    size = int(max_depth) + 2
    tree = (left, right, feature, threshold, value, weight)
    for r, x in enumerate(X):
        phi = out[r]
        for root in roots:
            empty = (
                np.full(size, -1, dtype=np.int64),
                np.zeros(size),
                np.zeros(size),
                np.zeros(size),
            )
            _recurse(tree, x, phi, int(root), 0, empty, 1.0, 1.0, -1)
    return out
