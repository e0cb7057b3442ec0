"""Pure-numpy reference implementation of the sampler's inner-loop kernels.

This module defines the semantic contract that the compiled backend must
honour bit-for-bit: every floating-point reduction accumulates
sequentially in ascending row order (``np.bincount`` semantics), and all
elementwise expressions are written so the compiled code performs the
same IEEE operations in the same order.  Because all random-number
consumption happens in the shared orchestration layer above these
kernels, identical inputs and seeds yield identical chains under either
backend.
"""

import numpy as np

name = "python"


def route_rows(var, cut, left, right, XT):
    """Route every column of ``XT`` (one column per observation) to its leaf.

    ``var[node] >= 0`` marks a split on that covariate with threshold
    ``cut[node]``; values ``<=`` the threshold go left.  Returns the leaf
    slot index of each observation as int32.
    """
    n = XT.shape[1]
    out = np.empty(n, dtype=np.int32)
    stack = [(0, np.arange(n))]
    while stack:
        node, rows = stack.pop()
        v = var[node]
        while v >= 0:
            go_left = XT[v][rows] <= cut[node]
            stack.append((right[node], rows[~go_left]))
            rows = rows[go_left]
            node = left[node]
            v = var[node]
        out[rows] = node
    return out


def leaf_stats(leaf_idx, r, s, n_slots):
    """Per-slot sufficient statistics (sum s*r, sum s*s, count)."""
    sr = np.bincount(leaf_idx, weights=s * r, minlength=n_slots)
    s2 = np.bincount(leaf_idx, weights=s * s, minlength=n_slots)
    cnt = np.bincount(leaf_idx, minlength=n_slots).astype(np.int64)
    return sr, s2, cnt


def rows_where(leaf_idx, slot):
    """Indices of observations sitting in ``slot``, ascending, int32."""
    return np.flatnonzero(leaf_idx == slot).astype(np.int32)


def rows_where2(leaf_idx, slot_a, slot_b):
    """Rows in either slot plus a 0/1 side indicator (1 means ``slot_b``)."""
    in_a = leaf_idx == slot_a
    rows = np.flatnonzero(in_a | (leaf_idx == slot_b)).astype(np.int32)
    bins = (~in_a[rows]).astype(np.int32)
    return rows, bins


def split_stats(xcol, rows, cut, r, s):
    """Two-sided sufficient statistics of ``rows`` split at ``cut``.

    Side 0 collects rows with ``xcol <= cut``.  Returns
    (sr0, s20, n0, sr1, s21, n1).
    """
    bins = (xcol.take(rows) > cut).astype(np.int32)
    return paired_stats(bins, rows, r, s)


def paired_stats(bins, rows, r, s):
    """Like :func:`split_stats` but with a precomputed 0/1 side per row."""
    sv = s.take(rows)
    w = sv * r.take(rows)
    sr = np.bincount(bins, weights=w, minlength=2)
    s2 = np.bincount(bins, weights=sv * sv, minlength=2)
    cnt = np.bincount(bins, minlength=2)
    return (sr[0], s2[0], int(cnt[0]), sr[1], s2[1], int(cnt[1]))


def partial_residual(y, s, full_fit, vals, leaf_idx):
    """r_i = y_i - s_i * (full_fit_i - vals[leaf_idx_i])."""
    return y - s * (full_fit - vals.take(leaf_idx))


def tree_residual(y, s, full_fit, vals, leaf_idx):
    """Partial residual plus this tree's own fit, in one logical pass."""
    tree_fit = vals.take(leaf_idx)
    return y - s * (full_fit - tree_fit), tree_fit


def distinct_sorted(xcol, rows):
    """Sorted distinct values of ``xcol`` over the given rows."""
    return np.unique(xcol.take(rows))


def apply_fit_delta(full_fit, vals, leaf_idx, old_fit):
    """In place: full_fit_i += vals[leaf_idx_i] - old_fit_i."""
    full_fit += vals.take(leaf_idx) - old_fit


def accumulate_fit(fit, vals, leaf_idx):
    """In place: fit_i += vals[leaf_idx_i]."""
    fit += vals.take(leaf_idx)


def assign_split(leaf_idx, rows, bins, slot_left, slot_right):
    """Reassign ``rows`` to the two child slots given side indicators."""
    leaf_idx[rows] = np.where(bins == 0, slot_left, slot_right)


def assign_fill(leaf_idx, rows, slot):
    """Reassign ``rows`` to a single slot."""
    leaf_idx[rows] = slot
