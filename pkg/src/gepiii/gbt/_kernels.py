"""Numba kernels for histogram building, leaf-wise growth and prediction.

Binned data is stored feature-major, shape ``(n_features, n_samples)``,
dtype uint8. Histograms are accumulated per feature in sample order, and the
only parallel loops run over features (histograms) or samples (prediction),
so results do not depend on the thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def build_histogram(binned, order, start, end, grad, hess, feats, out):
    """Fill ``out[j, b] = (sum g, sum h, count)`` for feature ``feats[j]``."""
    for j in prange(feats.size):
        col = binned[feats[j]]
        h = out[j]
        h[:, :] = 0.0
        for k in range(start, end):
            r = order[k]
            b = col[r]
            h[b, 0] += grad[r]
            h[b, 1] += hess[r]
            h[b, 2] += 1.0


@njit(cache=True)
def best_split(hist, feats, n_bins_of, G, H, C, lam, min_leaf):
    """Scan cumulative histogram sums for the highest-gain threshold.

    gain = GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam); ties keep the first
    candidate in (feature order, bin order).
    Returns (gain, feature, bin, GL, HL, CL); feature is -1 when no
    candidate satisfies ``min_leaf``.
    """
    parent = G * G / (H + lam)
    best_gain = -np.inf
    best_f = -1
    best_b = -1
    bgl = 0.0
    bhl = 0.0
    bcl = 0.0
    for j in range(feats.size):
        f = feats[j]
        gl = 0.0
        hl = 0.0
        cl = 0.0
        for b in range(n_bins_of[f] - 1):
            gl += hist[j, b, 0]
            hl += hist[j, b, 1]
            cl += hist[j, b, 2]
            if cl < min_leaf:
                continue
            if C - cl < min_leaf:
                break
            gr = G - gl
            hr = H - hl
            if hl + lam <= 0.0 or hr + lam <= 0.0:
                continue
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_b = b
                bgl = gl
                bhl = hl
                bcl = cl
    return best_gain, best_f, best_b, bgl, bhl, bcl


@njit(cache=True)
def grow_tree(binned, grad, hess, rows, feats, n_bins_of, n_bins,
              max_leaves, min_leaf, lam, lr, min_gain, pred):
    """Grow one leaf-wise tree on ``rows`` and add its output to ``pred``.

    The leaf with the largest split gain is split next until ``max_leaves``
    leaves exist or no split has gain > ``min_gain``. Leaf values are
    ``-lr * G / (H + lam)``. The smaller child's histogram is built and the
    larger one obtained by subtraction from the parent.

    Returns node arrays (feature, bin, left, right, value, gain); leaves have
    feature -1.
    """
    n = rows.size
    n_feat = feats.size
    order = rows.copy()
    buf = np.empty(n, dtype=rows.dtype)
    max_nodes = 2 * max_leaves - 1
    node_feature = np.full(max_nodes, -1, dtype=np.int32)
    node_bin = np.zeros(max_nodes, dtype=np.int32)
    node_left = np.full(max_nodes, -1, dtype=np.int32)
    node_right = np.full(max_nodes, -1, dtype=np.int32)
    node_value = np.zeros(max_nodes)
    node_gain = np.zeros(max_nodes)

    hists = np.zeros((max_leaves, n_feat, n_bins, 3))
    slot_node = np.zeros(max_leaves, dtype=np.int64)
    slot_start = np.zeros(max_leaves, dtype=np.int64)
    slot_end = np.zeros(max_leaves, dtype=np.int64)
    slot_g = np.zeros(max_leaves)
    slot_h = np.zeros(max_leaves)
    slot_c = np.zeros(max_leaves)
    s_gain = np.full(max_leaves, -np.inf)
    s_feat = np.full(max_leaves, -1, dtype=np.int64)
    s_bin = np.zeros(max_leaves, dtype=np.int64)
    s_gl = np.zeros(max_leaves)
    s_hl = np.zeros(max_leaves)
    s_cl = np.zeros(max_leaves)

    g0 = 0.0
    h0 = 0.0
    for k in range(n):
        g0 += grad[order[k]]
        h0 += hess[order[k]]
    slot_end[0] = n
    slot_g[0] = g0
    slot_h[0] = h0
    slot_c[0] = n
    build_histogram(binned, order, 0, n, grad, hess, feats, hists[0])
    res = best_split(hists[0], feats, n_bins_of, g0, h0, float(n), lam, min_leaf)
    s_gain[0], s_feat[0], s_bin[0], s_gl[0], s_hl[0], s_cl[0] = res

    n_leaves = 1
    n_nodes = 1
    while n_leaves < max_leaves:
        s = -1
        g_best = -np.inf
        for i in range(n_leaves):
            if s_feat[i] >= 0 and s_gain[i] > g_best:
                g_best = s_gain[i]
                s = i
        if s < 0 or g_best <= min_gain:
            break
        f = s_feat[s]
        b = s_bin[s]
        start = slot_start[s]
        end = slot_end[s]
        # stable partition of order[start:end]
        col = binned[f]
        nl = 0
        nr = 0
        for k in range(start, end):
            r = order[k]
            if col[r] <= b:
                order[start + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for k in range(nr):
            order[start + nl + k] = buf[k]

        parent = slot_node[s]
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_feature[parent] = f
        node_bin[parent] = b
        node_left[parent] = left
        node_right[parent] = right
        node_gain[parent] = g_best

        gl = s_gl[s]
        hl = s_hl[s]
        cl = s_cl[s]
        gr = slot_g[s] - gl
        hr = slot_h[s] - hl
        cr = slot_c[s] - cl
        t = n_leaves
        n_leaves += 1
        # smaller child goes to the new slot t, larger keeps slot s
        if nl <= nr:
            small = (left, start, start + nl, gl, hl, cl)
            large = (right, start + nl, end, gr, hr, cr)
        else:
            small = (right, start + nl, end, gr, hr, cr)
            large = (left, start, start + nl, gl, hl, cl)
        slot_node[t], slot_start[t], slot_end[t], slot_g[t], slot_h[t], slot_c[t] = small
        slot_node[s], slot_start[s], slot_end[s], slot_g[s], slot_h[s], slot_c[s] = large
        build_histogram(binned, order, slot_start[t], slot_end[t], grad, hess, feats, hists[t])
        hists[s] -= hists[t]
        for q in (s, t):
            if slot_c[q] >= 2 * min_leaf:
                res = best_split(hists[q], feats, n_bins_of, slot_g[q], slot_h[q],
                                 slot_c[q], lam, min_leaf)
                s_gain[q], s_feat[q], s_bin[q], s_gl[q], s_hl[q], s_cl[q] = res
            else:
                s_gain[q] = -np.inf
                s_feat[q] = -1

    for i in range(n_leaves):
        v = -lr * slot_g[i] / (slot_h[i] + lam)
        node_value[slot_node[i]] = v
        for k in range(slot_start[i], slot_end[i]):
            pred[order[k]] += v
    return (node_feature[:n_nodes].copy(), node_bin[:n_nodes].copy(),
            node_left[:n_nodes].copy(), node_right[:n_nodes].copy(),
            node_value[:n_nodes].copy(), node_gain[:n_nodes].copy())


@njit(parallel=True, cache=True)
def predict_binned(binned, feature, bin_, left, right, value, offsets, out):
    """Add every tree's output to ``out`` (pre-filled with the base score).

    Trees are added one at a time in order, matching the accumulation order
    used during training.

    Node arrays of all trees are concatenated; ``offsets[t]`` is the root of
    tree ``t`` and child indices are relative to it.
    """
    n = binned.shape[1]
    n_trees = offsets.size
    for i in prange(n):
        acc = out[i]
        for t in range(n_trees):
            base = offsets[t]
            node = base
            while feature[node] >= 0:
                if binned[feature[node], i] <= bin_[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            acc += value[node]
        out[i] = acc
