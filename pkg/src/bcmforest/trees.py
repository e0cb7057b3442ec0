"""Regression-tree ensembles with a scaled-response backfitting sampler.

This module provides the building blocks shared by every function in the
mediation model: a flat-array binary decision tree, the depth-penalised
structure prior, conjugate leaf-mean integration, the
grow/prune/change Metropolis-Hastings kernel, and the backfitting sweep
that cycles the kernel over the trees of an ensemble.

All updates operate on the *scaled response* observation model

    r_i = s_i * f(x_i) + eps_i,    eps_i ~ Normal(0, sigma^2),

where ``s_i`` is a known per-observation multiplier.  ``s_i = 1`` gives
the ordinary homoskedastic regression update, ``s_i`` equal to a binary
treatment restricts information to treated rows, and a continuous
``s_i`` yields the weighted update needed for a varying coefficient on a
continuous regressor.  Everything is written in terms of the sufficient
statistics ``sum(s_i r_i)`` and ``sum(s_i^2)``, so ``s_i = 0`` rows are
handled exactly (they contribute no information about ``f``).
"""

from dataclasses import dataclass, field
from math import log, log1p

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from . import _kernels as kernels

# Move mix of the structure kernel: grow, prune, change (no swap).
P_GROW = 0.25
P_PRUNE = 0.25
P_CHANGE = 0.50

# Outcome codes of a single Metropolis-Hastings tree update.
REJECTED_INVALID = 0
REJECTED = 1
ACCEPTED = 2


@dataclass(frozen=True)
class TreePrior:
    """Depth-penalised prior on tree structures.

    A node at depth ``d`` is internal with probability
    ``alpha * (1 + d) ** -beta``; split variables are uniform over
    covariates and cutpoints uniform over the distinct observed values
    at the node (excluding the maximum, so both children are nonempty).
    """

    alpha: float = 0.95
    beta: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")

    def split_prob(self, depth):
        return self.alpha * (1.0 + depth) ** -self.beta


@dataclass(frozen=True)
class NoisePrior:
    """Scaled-inverse-chi-squared prior on the noise variance."""

    nu: float = 3.0
    lam: float = 1.0

    def __post_init__(self):
        if self.nu <= 0 or self.lam <= 0:
            raise ValueError("nu and lam must be positive")


@dataclass
class ScaledResponse:
    """Pseudo-response vector with per-observation scales and noise level."""

    response: np.ndarray
    scale: np.ndarray
    noise_var: float

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.response.shape != self.scale.shape:
            raise ValueError("response and scale must have equal length")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")


class Tree:
    """Binary decision tree stored as flat slot arrays.

    Slots hold ``var`` (covariate index for internal nodes, -1 for
    leaves, -2 for freed slots), ``cut`` thresholds, child and parent
    links, node depth, and the leaf value.  Pruned slots are recycled by
    later grows, so slot ids of live nodes stay stable during sampling.
    The split convention is ``x[var] <= cut`` goes left.
    """

    __slots__ = ("n_features", "var", "cut", "left", "right", "parent",
                 "depth", "value", "size", "_free", "_leaves", "_prunable")

    def __init__(self, n_features, capacity=8):
        self.n_features = int(n_features)
        self.var = np.full(capacity, -2, dtype=np.int32)
        self.cut = np.zeros(capacity)
        self.left = np.full(capacity, -1, dtype=np.int32)
        self.right = np.full(capacity, -1, dtype=np.int32)
        self.parent = np.full(capacity, -1, dtype=np.int32)
        self.depth = np.zeros(capacity, dtype=np.int32)
        self.value = np.zeros(capacity)
        self.var[0] = -1
        self.size = 1
        self._free = []
        self._leaves = None
        self._prunable = None

    # -- structure queries -------------------------------------------------
    # Slot queries are cached between structural edits; do not mutate the
    # returned arrays.

    def leaf_slots(self):
        if self._leaves is None:
            self._leaves = np.flatnonzero(self.var[:self.size] == -1).astype(np.int32)
        return self._leaves

    def internal_slots(self):
        return np.flatnonzero(self.var[:self.size] >= 0).astype(np.int32)

    def prunable_slots(self):
        """Internal nodes whose children are both leaves."""
        if self._prunable is None:
            internal = self.internal_slots()
            if internal.size:
                mask = (self.var[self.left[internal]] == -1) \
                    & (self.var[self.right[internal]] == -1)
                internal = internal[mask]
            self._prunable = internal
        return self._prunable

    @property
    def n_leaves(self):
        return self.leaf_slots().size

    @property
    def n_internal(self):
        return int(np.count_nonzero(self.var[:self.size] >= 0))

    def is_stump(self):
        return self.var[0] == -1

    # -- structure edits ---------------------------------------------------

    def _alloc(self):
        if self._free:
            return self._free.pop()
        if self.size == self.var.shape[0]:
            self._reserve(2 * self.size)
        slot = self.size
        self.size += 1
        return slot

    def _reserve(self, capacity):
        for name in ("var", "cut", "left", "right", "parent", "depth", "value"):
            old = getattr(self, name)
            fresh = np.zeros(capacity, dtype=old.dtype)
            fresh[:self.size] = old[:self.size]
            setattr(self, name, fresh)

    def grow(self, slot, split_var, cutpoint):
        """Split leaf ``slot``; returns the (left, right) child slots."""
        if self.var[slot] != -1:
            raise ValueError("grow target is not a leaf")
        lo = self._alloc()
        hi = self._alloc()
        for child in (lo, hi):
            self.var[child] = -1
            self.parent[child] = slot
            self.depth[child] = self.depth[slot] + 1
            self.value[child] = 0.0
        self.var[slot] = split_var
        self.cut[slot] = cutpoint
        self.left[slot] = lo
        self.right[slot] = hi
        self._leaves = None
        self._prunable = None
        return lo, hi

    def prune(self, slot):
        """Collapse an internal node whose children are both leaves."""
        lo, hi = self.left[slot], self.right[slot]
        if self.var[lo] != -1 or self.var[hi] != -1:
            raise ValueError("prune target children must be leaves")
        self.var[lo] = -2
        self.var[hi] = -2
        self._free.append(int(hi))
        self._free.append(int(lo))
        self.var[slot] = -1
        self.value[slot] = 0.0
        self._leaves = None
        self._prunable = None

    def change(self, slot, split_var, cutpoint):
        """Replace the split rule at an internal node."""
        if self.var[slot] < 0:
            raise ValueError("change target is not an internal node")
        self.var[slot] = split_var
        self.cut[slot] = cutpoint

    # -- evaluation ----------------------------------------------------------

    def assign_slots(self, XT):
        """Leaf slot of every observation (columns of ``XT``)."""
        return kernels.route_rows(self.var, self.cut, self.left, self.right, XT)

    def evaluate(self, X):
        XT = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
        if XT.shape[0] != self.n_features:
            raise ValueError("covariate dimension mismatch")
        return self.value.take(self.assign_slots(XT))

    def copy(self):
        out = Tree.__new__(Tree)
        out.n_features = self.n_features
        for name in ("var", "cut", "left", "right", "parent", "depth", "value"):
            setattr(out, name, getattr(self, name).copy())
        out.size = self.size
        out._free = list(self._free)
        out._leaves = None
        out._prunable = None
        return out

    # -- serialization -------------------------------------------------------

    def to_preorder(self):
        """Compact preorder encoding: (var, payload) per node.

        Internal nodes carry their cutpoint in the payload, leaves carry
        the leaf value and ``var = -1``.
        """
        var_out, val_out = [], []
        stack = [0]
        while stack:
            slot = stack.pop()
            v = int(self.var[slot])
            if v >= 0:
                var_out.append(v)
                val_out.append(float(self.cut[slot]))
                stack.append(int(self.right[slot]))
                stack.append(int(self.left[slot]))
            else:
                var_out.append(-1)
                val_out.append(float(self.value[slot]))
        return (np.asarray(var_out, dtype=np.int32),
                np.asarray(val_out, dtype=np.float64))

    @classmethod
    def from_preorder(cls, var_pre, val_pre, n_features):
        tree = cls(n_features, capacity=max(8, len(var_pre)))
        pos = 0

        def build(depth, parent):
            nonlocal pos
            slot = tree._alloc() if pos > 0 else 0
            v = int(var_pre[pos])
            payload = float(val_pre[pos])
            pos += 1
            tree.parent[slot] = parent
            tree.depth[slot] = depth
            if v >= 0:
                tree.var[slot] = v
                tree.cut[slot] = payload
                tree.left[slot] = build(depth + 1, slot)
                tree.right[slot] = build(depth + 1, slot)
            else:
                tree.var[slot] = -1
                tree.value[slot] = payload
            return slot

        build(0, -1)
        return tree


@dataclass
class Forest:
    """A sum-of-trees function: ``f(x) = sum_j g(x; tree_j)``."""

    trees: list
    leaf_sd: float
    tree_prior: TreePrior

    def __post_init__(self):
        if len(self.trees) < 1:
            raise ValueError("a forest needs at least one tree")
        if self.leaf_sd <= 0:
            raise ValueError("leaf_sd must be positive")

    @property
    def m(self):
        return len(self.trees)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        fit = np.zeros(X.shape[0])
        XT = np.ascontiguousarray(X.T)
        for tree in self.trees:
            kernels.accumulate_fit(fit, tree.value, tree.assign_slots(XT))
        return fit


def leaf_scale(k, m):
    """Leaf-value prior standard deviation 3 / (k * sqrt(m))."""
    if k <= 0 or m < 1:
        raise ValueError("k must be positive and m >= 1")
    return 3.0 / (k * np.sqrt(m))


# ---------------------------------------------------------------------------
# Prior and marginal-likelihood evaluations
# ---------------------------------------------------------------------------

def log_tree_structure_prior(tree, prior):
    """Log prior of the branching structure alone.

    Sums ``log p_d`` over internal nodes and ``log(1 - p_d)`` over
    leaves, where ``p_d`` is the depth-``d`` split probability.  The
    split-rule factors are deliberately excluded: proposals draw rules
    from the same distribution as the prior, so those factors cancel in
    every acceptance ratio this module computes.
    """
    live = tree.var[:tree.size] > -2
    depths = tree.depth[:tree.size][live]
    is_leaf = tree.var[:tree.size][live] == -1
    p = prior.split_prob(depths)
    return float(np.sum(np.where(is_leaf, np.log1p(-p), np.log(p))))


def leaf_log_marginal(residual_sum, scale_sq_sum, count, noise_var, leaf_var):
    """Log marginal likelihood of one leaf with its mean integrated out.

    Arguments are the leaf's sufficient statistics ``sum(s_i r_i)``,
    ``sum(s_i^2)`` and the observation count.  The returned value omits
    the data-only term ``-sum(r_i^2) / (2 sigma^2)``, which the caller
    must add when the absolute level matters; it cancels identically in
    acceptance ratios because moves only repartition observations.
    """
    if noise_var <= 0 or leaf_var <= 0:
        raise ValueError("variances must be positive")
    precision = np.asarray(scale_sq_sum) / noise_var + 1.0 / leaf_var
    out = (-0.5 * np.asarray(count) * np.log(2.0 * np.pi * noise_var)
           - 0.5 * np.log(leaf_var * precision)
           + 0.5 * np.asarray(residual_sum) ** 2 / (noise_var ** 2 * precision))
    return float(out) if np.isscalar(residual_sum) else out


# ---------------------------------------------------------------------------
# Gibbs draws
# ---------------------------------------------------------------------------

def sample_leaf_values(tree, data, X, leaf_var, rng, leaf_idx=None):
    """Draw every leaf value from its conjugate normal full conditional.

    Posterior precision is ``sum(s_i^2)/sigma^2 + 1/leaf_var``; a leaf
    whose observations carry no scale information falls back to the
    prior automatically.  Mutates ``tree`` and returns it.
    """
    if leaf_idx is None:
        XT = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
        leaf_idx = tree.assign_slots(XT)
    _resample_leaf_values(tree, leaf_idx, data.response, data.scale,
                          data.noise_var, leaf_var, rng)
    return tree


def _resample_leaf_values(tree, leaf_idx, r, s, noise_var, leaf_var, rng):
    sr, s2, _ = kernels.leaf_stats(leaf_idx, r, s, tree.size)
    leaves = tree.leaf_slots()
    precision = s2[leaves] / noise_var + 1.0 / leaf_var
    mean = sr[leaves] / noise_var / precision
    draws = mean + rng.standard_normal(leaves.size) / np.sqrt(precision)
    tree.value[leaves] = draws


def sample_noise_var(residuals, scales, current_fit, prior, rng):
    """Scaled-inverse-chi-squared draw of the noise variance.

    The posterior has ``nu + n`` degrees of freedom and scale
    ``(nu*lam + SSE) / (nu + n)`` with ``SSE = sum((r_i - s_i fit_i)^2)``.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    resid = residuals - np.asarray(scales, dtype=np.float64) * np.asarray(current_fit)
    sse = float(resid @ resid)
    df = prior.nu + residuals.size
    return (prior.nu * prior.lam + sse) / rng.chisquare(df)


def calibrate_noise_lambda(y, X, nu=3.0, quantile=0.90):
    """Data-informed scale for the noise prior.

    Chooses ``lam`` so that the prior puts probability ``quantile`` on
    the noise sd being below the residual sd of a saturated linear fit
    of ``y`` on ``X``; falls back to the sample variance of ``y`` when
    the linear fit is degenerate.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    sigma2_hat = float(np.var(y))
    if n > p + 2:
        design = np.column_stack([np.ones(n), X])
        coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank == design.shape[1]:
            resid = y - design @ coef
            est = float(resid @ resid) / (n - rank)
            if est > 0:
                sigma2_hat = est
    if sigma2_hat <= 0:
        sigma2_hat = 1.0
    return sigma2_hat * chi2.ppf(1.0 - quantile, nu) / nu


def sample_probit_latents(y_binary, linear_pred, rng):
    """Truncated-normal latent draws for probit data augmentation.

    Positive latents for ``y = 1``, nonpositive for ``y = 0``, centred
    at ``linear_pred`` with unit variance.  Uses the inverse-CDF method
    on a shared uniform draw; probability arguments are clipped away
    from {0, 1} to keep the output finite under extreme linear
    predictors.
    """
    y_binary = np.asarray(y_binary)
    pred = np.asarray(linear_pred, dtype=np.float64)
    if y_binary.shape != pred.shape:
        raise ValueError("lengths must agree")
    u = rng.random(pred.shape)
    p_neg = ndtr(-pred)
    prob = np.where(y_binary == 1, p_neg + u * (1.0 - p_neg), u * p_neg)
    prob = np.clip(prob, 1e-300, 1.0 - 1e-16)
    return pred + ndtri(prob)


# ---------------------------------------------------------------------------
# Metropolis-Hastings structure kernel
# ---------------------------------------------------------------------------

def _update_tree(tree, XT, r, s, noise_var, leaf_var, prior, rng, leaf_idx):
    """One grow/prune/change proposal plus a leaf-value refresh.

    Leaf values are integrated out of the acceptance ratio, so only the
    sufficient statistics of the affected leaves are touched.  Change
    proposals are restricted to internal nodes whose children are both
    leaves; together with cutpoints drawn uniformly from the distinct
    values present at the node, every rule-proposal factor cancels
    against the matching rule-prior factor, and the remaining ratio is
    exact.  Returns an outcome code; mutates ``tree`` and ``leaf_idx``.

    The per-slot sufficient statistics are accumulated once and patched
    in place by accepted moves, so the leaf refresh needs no second pass
    over the data.
    """
    tab = kernels.leaf_stats(leaf_idx, r, s, tree.size + 2)
    u = rng.random()
    if u < P_GROW:
        outcome = _try_grow(tree, XT, r, s, noise_var, leaf_var, prior, rng,
                            leaf_idx, tab)
    elif u < P_GROW + P_PRUNE:
        outcome = _try_prune(tree, r, s, noise_var, leaf_var, prior, rng,
                             leaf_idx, tab)
    else:
        outcome = _try_change(tree, XT, r, s, noise_var, leaf_var, rng,
                              leaf_idx, tab)
    sr_tab, s2_tab, _ = tab
    leaves = tree.leaf_slots()
    precision = s2_tab[leaves] / noise_var + 1.0 / leaf_var
    mean = sr_tab[leaves] / noise_var / precision
    tree.value[leaves] = mean + rng.standard_normal(leaves.size) / np.sqrt(precision)
    return outcome


def _accept(rng, log_ratio):
    u = rng.random()
    return u == 0.0 or log(u) < log_ratio


def _llm(sr, s2, cnt, noise_var, leaf_var):
    precision = s2 / noise_var + 1.0 / leaf_var
    return (-0.5 * cnt * log(2.0 * np.pi * noise_var)
            - 0.5 * log(leaf_var * precision)
            + 0.5 * sr * sr / (noise_var * noise_var * precision))


def _try_grow(tree, XT, r, s, noise_var, leaf_var, prior, rng, leaf_idx, tab):
    sr_tab, s2_tab, cnt_tab = tab
    leaves = tree.leaf_slots()
    slot = int(leaves[rng.integers(leaves.size)])
    split_var = int(rng.integers(tree.n_features))
    rows = kernels.rows_where(leaf_idx, slot)
    col = XT[split_var]
    distinct = kernels.distinct_sorted(col, rows)
    if distinct.size < 2:
        return REJECTED_INVALID
    cutpoint = float(distinct[rng.integers(distinct.size - 1)])

    sr0, s20, n0, sr1, s21, n1 = kernels.split_stats(col, rows, cutpoint, r, s)
    delta_llm = (_llm(sr0, s20, n0, noise_var, leaf_var)
                 + _llm(sr1, s21, n1, noise_var, leaf_var)
                 - _llm(sr_tab[slot], s2_tab[slot], cnt_tab[slot],
                        noise_var, leaf_var))

    depth = int(tree.depth[slot])
    p_d = prior.split_prob(depth)
    p_d1 = prior.split_prob(depth + 1)
    # Prunable-node count of the proposal: the grown node becomes
    # prunable, while its parent stops being prunable if the sibling is
    # still a leaf.
    w_new = tree.prunable_slots().size + 1
    par = int(tree.parent[slot])
    if par >= 0:
        sibling = tree.right[par] if tree.left[par] == slot else tree.left[par]
        if tree.var[sibling] == -1:
            w_new -= 1
    log_ratio = (delta_llm
                 + log(p_d) + 2.0 * log1p(-p_d1) - log1p(-p_d)
                 + log(P_PRUNE) - log(P_GROW)
                 + log(leaves.size) - log(w_new))

    if not _accept(rng, log_ratio):
        return REJECTED
    lo, hi = tree.grow(slot, split_var, cutpoint)
    bins = (col.take(rows) > cutpoint).astype(np.int32)
    kernels.assign_split(leaf_idx, rows, bins, lo, hi)
    sr_tab[lo], s2_tab[lo], cnt_tab[lo] = sr0, s20, n0
    sr_tab[hi], s2_tab[hi], cnt_tab[hi] = sr1, s21, n1
    return ACCEPTED


def _try_prune(tree, r, s, noise_var, leaf_var, prior, rng, leaf_idx, tab):
    sr_tab, s2_tab, cnt_tab = tab
    prunable = tree.prunable_slots()
    if prunable.size == 0:
        return REJECTED_INVALID
    slot = int(prunable[rng.integers(prunable.size)])
    lo, hi = int(tree.left[slot]), int(tree.right[slot])
    sr_m = sr_tab[lo] + sr_tab[hi]
    s2_m = s2_tab[lo] + s2_tab[hi]
    n_m = cnt_tab[lo] + cnt_tab[hi]
    delta_llm = (_llm(sr_m, s2_m, n_m, noise_var, leaf_var)
                 - _llm(sr_tab[lo], s2_tab[lo], cnt_tab[lo], noise_var, leaf_var)
                 - _llm(sr_tab[hi], s2_tab[hi], cnt_tab[hi], noise_var, leaf_var))

    depth = int(tree.depth[slot])
    p_d = prior.split_prob(depth)
    p_d1 = prior.split_prob(depth + 1)
    n_leaves_new = tree.n_leaves - 1
    log_ratio = (delta_llm
                 + log1p(-p_d) - log(p_d) - 2.0 * log1p(-p_d1)
                 + log(P_GROW) - log(P_PRUNE)
                 + log(prunable.size) - log(n_leaves_new))

    if not _accept(rng, log_ratio):
        return REJECTED
    rows, _ = kernels.rows_where2(leaf_idx, lo, hi)
    tree.prune(slot)
    kernels.assign_fill(leaf_idx, rows, slot)
    sr_tab[slot], s2_tab[slot], cnt_tab[slot] = sr_m, s2_m, n_m
    return ACCEPTED


def _try_change(tree, XT, r, s, noise_var, leaf_var, rng, leaf_idx, tab):
    sr_tab, s2_tab, cnt_tab = tab
    prunable = tree.prunable_slots()
    if prunable.size == 0:
        return REJECTED_INVALID
    slot = int(prunable[rng.integers(prunable.size)])
    split_var = int(rng.integers(tree.n_features))
    lo, hi = int(tree.left[slot]), int(tree.right[slot])
    rows, _ = kernels.rows_where2(leaf_idx, lo, hi)
    col = XT[split_var]
    distinct = kernels.distinct_sorted(col, rows)
    if distinct.size < 2:
        return REJECTED_INVALID
    cutpoint = float(distinct[rng.integers(distinct.size - 1)])

    nsr0, ns20, nn0, nsr1, ns21, nn1 = kernels.split_stats(col, rows, cutpoint, r, s)
    log_ratio = (_llm(nsr0, ns20, nn0, noise_var, leaf_var)
                 + _llm(nsr1, ns21, nn1, noise_var, leaf_var)
                 - _llm(sr_tab[lo], s2_tab[lo], cnt_tab[lo], noise_var, leaf_var)
                 - _llm(sr_tab[hi], s2_tab[hi], cnt_tab[hi], noise_var, leaf_var))

    if not _accept(rng, log_ratio):
        return REJECTED
    tree.change(slot, split_var, cutpoint)
    new_bins = (col.take(rows) > cutpoint).astype(np.int32)
    kernels.assign_split(leaf_idx, rows, new_bins, lo, hi)
    sr_tab[lo], s2_tab[lo], cnt_tab[lo] = nsr0, ns20, nn0
    sr_tab[hi], s2_tab[hi], cnt_tab[hi] = nsr1, ns21, nn1
    return ACCEPTED


def mh_tree_update(tree, data, X, prior, leaf_var, rng, leaf_idx=None,
                   counters=None):
    """Public single-tree update: structure move + leaf-value refresh.

    Invalid proposals (no usable split for grow/change, nothing to
    prune) auto-reject and leave the structure unchanged; they are
    tallied in ``counters`` when a dict is supplied.  Mutates and
    returns ``tree``.
    """
    XT = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
    if leaf_idx is None:
        leaf_idx = tree.assign_slots(XT)
    outcome = _update_tree(tree, XT, data.response, data.scale, data.noise_var,
                           leaf_var, prior, rng, leaf_idx)
    if counters is not None:
        key = {REJECTED_INVALID: "invalid", REJECTED: "rejected",
               ACCEPTED: "accepted"}[outcome]
        counters[key] = counters.get(key, 0) + 1
    return tree


# ---------------------------------------------------------------------------
# Backfitting over an ensemble
# ---------------------------------------------------------------------------

@dataclass
class ForestSampler:
    """Sampling state of one ensemble bound to a fixed covariate matrix.

    Keeps per-tree leaf assignments and the running total fit so each
    tree's partial residual is one fused pass.  The total fit is
    recomputed from scratch at the end of every sweep, which pins the
    cached vector to the exact tree sum instead of letting incremental
    updates drift.
    """

    X: np.ndarray
    m: int
    tree_prior: TreePrior
    leaf_sd: float
    trees: list = field(init=False)
    counters: dict = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d matrix")
        self.X = X
        self.XT = np.ascontiguousarray(X.T)
        self.n, self.p = X.shape
        if self.m < 1:
            raise ValueError("m must be at least 1")
        self.trees = [Tree(self.p) for _ in range(self.m)]
        self.leaf_idx = [np.zeros(self.n, dtype=np.int32) for _ in range(self.m)]
        self.full_fit = np.zeros(self.n)
        self.counters = {"accepted": 0, "rejected": 0, "invalid": 0}

    @property
    def leaf_var(self):
        return self.leaf_sd ** 2

    def sweep(self, y, scales, noise_var, rng):
        """One backfitting pass: update every tree against its partial residual."""
        tally = [0, 0, 0]
        for tree, idx in zip(self.trees, self.leaf_idx):
            resid, old_fit = kernels.tree_residual(y, scales, self.full_fit,
                                                   tree.value, idx)
            outcome = _update_tree(tree, self.XT, resid, scales, noise_var,
                                   self.leaf_var, self.tree_prior, rng, idx)
            tally[outcome] += 1
            kernels.apply_fit_delta(self.full_fit, tree.value, idx, old_fit)
        self.counters["invalid"] += tally[REJECTED_INVALID]
        self.counters["rejected"] += tally[REJECTED]
        self.counters["accepted"] += tally[ACCEPTED]
        self.full_fit = self.recompute_fit()

    def recompute_fit(self):
        fit = np.zeros(self.n)
        for tree, idx in zip(self.trees, self.leaf_idx):
            kernels.accumulate_fit(fit, tree.value, idx)
        return fit

    def predict(self, X_new):
        XT = np.ascontiguousarray(np.asarray(X_new, dtype=np.float64).T)
        if XT.shape[0] != self.p:
            raise ValueError("covariate dimension mismatch")
        fit = np.zeros(XT.shape[1])
        for tree in self.trees:
            kernels.accumulate_fit(fit, tree.value, tree.assign_slots(XT))
        return fit

    def snapshot(self):
        """Preorder encoding of all trees: (vars, payloads, sizes)."""
        var_parts, val_parts, sizes = [], [], np.empty(self.m, dtype=np.int32)
        for j, tree in enumerate(self.trees):
            v, p = tree.to_preorder()
            var_parts.append(v)
            val_parts.append(p)
            sizes[j] = v.size
        return np.concatenate(var_parts), np.concatenate(val_parts), sizes

    def forest(self):
        return Forest(self.trees, self.leaf_sd, self.tree_prior)


def backfit_sweep(forest, y, scales, X, noise_var, rng):
    """One self-contained backfitting pass over ``forest``.

    Convenience wrapper that routes the data, runs the sweep, and
    returns the (mutated) forest; long chains should hold a
    :class:`ForestSampler` instead so leaf caches persist across sweeps.
    """
    y = np.asarray(y, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    sampler = ForestSampler.__new__(ForestSampler)
    sampler.X = np.asarray(X, dtype=np.float64)
    sampler.XT = np.ascontiguousarray(sampler.X.T)
    sampler.n, sampler.p = sampler.X.shape
    sampler.m = forest.m
    sampler.tree_prior = forest.tree_prior
    sampler.leaf_sd = forest.leaf_sd
    sampler.trees = forest.trees
    sampler.leaf_idx = [t.assign_slots(sampler.XT) for t in forest.trees]
    sampler.full_fit = sampler.recompute_fit()
    sampler.counters = {"accepted": 0, "rejected": 0, "invalid": 0}
    sampler.sweep(y, scales, noise_var, rng)
    return forest


# ---------------------------------------------------------------------------
# Pointwise evaluation and prior simulation
# ---------------------------------------------------------------------------

def assign_leaf(tree, x):
    """Leaf value of the unique leaf containing the covariate vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tree.n_features,):
        raise ValueError("covariate dimension mismatch")
    slot = 0
    while tree.var[slot] >= 0:
        if x[tree.var[slot]] <= tree.cut[slot]:
            slot = tree.left[slot]
        else:
            slot = tree.right[slot]
    return float(tree.value[slot])


def evaluate_forest(forest, x):
    """Sum of per-tree leaf values at a single covariate vector."""
    return float(sum(assign_leaf(tree, x) for tree in forest.trees))


def sample_tree_from_prior(X, prior, rng, leaf_sd=1.0):
    """Draw a tree structure (and leaf values) from the prior.

    Nodes are visited in preorder; each splits with the depth-penalised
    probability provided a usable cutpoint exists for the drawn
    variable, otherwise it is forced to be a leaf.
    """
    X = np.asarray(X, dtype=np.float64)
    XT = np.ascontiguousarray(X.T)
    n, p = X.shape
    tree = Tree(p)
    stack = [(0, np.arange(n))]
    while stack:
        slot, rows = stack.pop()
        if rng.random() >= prior.split_prob(tree.depth[slot]):
            continue
        split_var = int(rng.integers(p))
        distinct = np.unique(XT[split_var][rows])
        if distinct.size < 2:
            continue
        cutpoint = float(distinct[rng.integers(distinct.size - 1)])
        lo, hi = tree.grow(slot, split_var, cutpoint)
        go_left = XT[split_var][rows] <= cutpoint
        stack.append((hi, rows[~go_left]))
        stack.append((lo, rows[go_left]))
    leaves = tree.leaf_slots()
    tree.value[leaves] = leaf_sd * rng.standard_normal(leaves.size)
    return tree
