"""Hot tree kernels: numba-jitted fast path with a pure-numpy fallback.

Set ``CLEARNER_DISABLE_NUMBA=1`` to force the numpy path (it is also used
automatically when numba is not installed). Both paths perform the same
floating-point operations in the same order, so results are bit-identical;
the benchmark under ``benchmarks/`` compares their throughput.

Kernels expect feature values pre-sorted ascending (sorting happens once in
the caller with a stable argsort, outside the jitted region).
"""

from __future__ import annotations

import os

import numpy as np

_NEG = -1.0e308


def _best_split_py(xs, g, min_leaf):
    """Best split position for one feature on a pre-sorted node.

    ``xs`` ascending feature values, ``g`` the matching targets. Returns
    (score, position) where position i puts rows [0..i] left and the score
    is sum_left^2/n_left + sum_right^2/n_right (the parent term is constant
    per node and handled by the caller). Position -1 means no valid split.
    Ties keep the first (lowest-threshold) maximizer.
    """
    n = xs.shape[0]
    total = 0.0
    for i in range(n):
        total += g[i]
    best = _NEG
    best_i = -1
    gl = 0.0
    for i in range(n - 1):
        gl += g[i]
        nl = i + 1
        nr = n - nl
        if nl < min_leaf:
            continue
        if nr < min_leaf:
            break
        if xs[i] == xs[i + 1]:
            continue
        gr = total - gl
        score = gl * gl / nl + gr * gr / nr
        if score > best:
            best = score
            best_i = i
    return best, best_i


def _best_split_numpy(xs, g, min_leaf):
    n = xs.shape[0]
    if n < 2:
        return _NEG, -1
    cs = np.cumsum(g)
    total = cs[-1]
    gl = cs[:-1]
    nl = np.arange(1, n)
    nr = n - nl
    valid = (nl >= min_leaf) & (nr >= min_leaf) & (xs[:-1] < xs[1:])
    if not valid.any():
        return _NEG, -1
    gr = total - gl
    score = gl * gl / nl + gr * gr / nr
    score = np.where(valid, score, _NEG)
    i = int(np.argmax(score))
    if score[i] <= _NEG:
        return _NEG, -1
    return float(score[i]), i


def _tree_apply_py(feature, threshold, left, right, value, x):
    """Route each row of ``x`` to its leaf value. ``feature < 0`` marks leaves."""
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


def _tree_apply_numpy(feature, threshold, left, right, value, x):
    n = x.shape[0]
    out = np.empty(n)
    stack = [(0, np.arange(n))]
    while stack:
        node, idx = stack.pop()
        if idx.size == 0:
            continue
        if feature[node] < 0:
            out[idx] = value[node]
            continue
        goes_left = x[idx, feature[node]] <= threshold[node]
        stack.append((left[node], idx[goes_left]))
        stack.append((right[node], idx[~goes_left]))
    return out


_want_numba = os.environ.get("CLEARNER_DISABLE_NUMBA", "") in ("", "0")
if _want_numba:
    try:
        from numba import njit

        best_split = njit(cache=True)(_best_split_py)
        tree_apply = njit(cache=True)(_tree_apply_py)
        BACKEND = "numba"
    except ImportError:
        best_split = _best_split_numpy
        tree_apply = _tree_apply_numpy
        BACKEND = "numpy"
else:
    best_split = _best_split_numpy
    tree_apply = _tree_apply_numpy
    BACKEND = "numpy"
