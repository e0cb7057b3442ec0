"""Interpretable projections of posterior effect surfaces.

A fitted effect surface is summarized by projecting it onto a simpler
class: a single least-squares regression tree, or an additive model of
penalized univariate splines.  The quality of a projection is its
summary R-squared, the fraction of the surface's variance over the
sample that the surrogate reproduces.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class CartSummaryConfig:
    max_depth: int = 3
    min_leaf: int = None  # resolved to max(20, n // 100) at fit time

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.min_leaf is not None and self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")

    def resolve_min_leaf(self, n):
        return self.min_leaf if self.min_leaf is not None else max(20, n // 100)


@dataclass(frozen=True)
class AdditiveSummaryConfig:
    knots_per_covariate: int = 10
    penalty_lambda: float = 1.0
    max_backfit_iters: int = 100
    convergence_tol: float = 1e-8

    def __post_init__(self):
        if self.knots_per_covariate < 2:
            raise ValueError("need at least two knots")
        if self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be nonnegative")
        if self.max_backfit_iters < 1 or self.convergence_tol <= 0:
            raise ValueError("invalid backfitting controls")


@dataclass
class SummaryResult:
    surrogate: object
    fitted: np.ndarray
    r_squared: float
    degenerate: bool = False
    converged: bool = True


def summary_r_squared(values, fitted):
    """1 - SSE(surrogate) / SSE(mean); 0 when the values have no variance."""
    values = np.asarray(values, dtype=np.float64)
    fitted = np.asarray(fitted, dtype=np.float64)
    if values.shape != fitted.shape:
        raise ValueError("lengths must agree")
    denom = np.sum((values - values.mean()) ** 2)
    if denom == 0.0:
        return 0.0
    return float(1.0 - np.sum((values - fitted) ** 2) / denom)


# ---------------------------------------------------------------------------
# Single-tree projection
# ---------------------------------------------------------------------------

@dataclass
class CartNode:
    n: int
    prediction: float
    var: int = -1
    cut: float = 0.0
    left: "CartNode" = None
    right: "CartNode" = None

    @property
    def is_leaf(self):
        return self.var < 0


@dataclass
class CartTree:
    root: CartNode
    columns: list

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape[0])
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.var] <= node.cut else node.right
            out[i] = node.prediction
        return out

    def leaves(self):
        """(path, node) pairs in left-to-right order."""
        out = []

        def walk(node, path):
            if node.is_leaf:
                out.append((path, node))
                return
            name = self.columns[node.var]
            walk(node.left, path + [f"{name} <= {node.cut:g}"])
            walk(node.right, path + [f"{name} > {node.cut:g}"])

        walk(self.root, [])
        return out

    def rules_text(self):
        """Indented-text rendering of the tree."""
        lines = []

        def walk(node, indent):
            pad = "  " * indent
            if node.is_leaf:
                lines.append(f"{pad}leaf: value={node.prediction:.6g} n={node.n}")
                return
            name = self.columns[node.var]
            lines.append(f"{pad}if {name} <= {node.cut:g}:")
            walk(node.left, indent + 1)
            lines.append(f"{pad}else:  # {name} > {node.cut:g}")
            walk(node.right, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines)

    def rule_list(self):
        """One record per leaf: the conjunction of conditions plus the value."""
        return [
            {"conditions": list(path), "value": node.prediction, "n": node.n}
            for path, node in self.leaves()
        ]

    def leaf_labels(self, X):
        """Integer leaf membership of each row, in left-to-right leaf order."""
        X = np.asarray(X, dtype=np.float64)
        order = {id(node): k for k, (_, node) in enumerate(self.leaves())}
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.var] <= node.cut else node.right
            out[i] = order[id(node)]
        return out


def _best_split(Xcols, v, rows, min_leaf):
    """Exhaustive least-squares split search over all (variable, cutpoint).

    Variables are scanned in ascending index order and cutpoints in
    ascending value order with strictly-better updates, so ties resolve
    to the lowest variable index and then the lowest cutpoint.
    """
    vr = v[rows]
    total = vr.sum()
    n = rows.size
    base_sse = np.sum(vr * vr) - total * total / n
    best = None
    best_sse = base_sse
    for j, col in enumerate(Xcols):
        x = col[rows]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        vs = vr[order]
        cum_v = np.cumsum(vs)
        cum_v2 = np.cumsum(vs * vs)
        # candidate boundaries: last index of each distinct-value run
        boundary = np.flatnonzero(xs[:-1] != xs[1:])
        for b in boundary:
            n_l = b + 1
            n_r = n - n_l
            if n_l < min_leaf or n_r < min_leaf:
                continue
            sl = cum_v[b]
            sse_l = cum_v2[b] - sl * sl / n_l
            sr = total - sl
            sse_r = (cum_v2[-1] - cum_v2[b]) - sr * sr / n_r
            sse = sse_l + sse_r
            if sse < best_sse:
                best_sse = sse
                best = (j, xs[b], n_l)
    return best, best_sse, base_sse


def cart_projection(values, X, cfg=CartSummaryConfig(), columns=None):
    """Greedy SSE-minimizing tree fit to an effect surface."""
    values = np.asarray(values, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n = values.shape[0]
    if n < 1:
        raise ValueError("need at least one observation")
    if columns is None:
        columns = [f"x{j}" for j in range(X.shape[1])]
    min_leaf = cfg.resolve_min_leaf(n)
    Xcols = [np.ascontiguousarray(X[:, j]) for j in range(X.shape[1])]

    def build(rows, depth):
        node = CartNode(n=rows.size, prediction=float(values[rows].mean()))
        if depth >= cfg.max_depth or rows.size < 2 * min_leaf:
            return node
        best, _, base_sse = _best_split(Xcols, values, rows, min_leaf)
        if best is None or base_sse <= 0.0:
            return node
        j, cut, _ = best
        node.var, node.cut = j, float(cut)
        go_left = Xcols[j][rows] <= cut
        node.left = build(rows[go_left], depth + 1)
        node.right = build(rows[~go_left], depth + 1)
        return node

    tree = CartTree(build(np.arange(n), 0), list(columns))
    fitted = tree.predict(X)
    r2 = summary_r_squared(values, fitted)
    degenerate = np.sum((values - values.mean()) ** 2) == 0.0
    return SummaryResult(tree, fitted, r2, degenerate=degenerate)


# ---------------------------------------------------------------------------
# Additive projection
# ---------------------------------------------------------------------------

@dataclass
class SplineComponent:
    """Cubic B-spline smoother with a curvature penalty on its coefficients.

    The penalty takes second divided differences of the coefficients at
    the Greville abscissae, so its null space is exactly the linear
    functions regardless of knot spacing.
    """

    knots: np.ndarray  # full padded knot vector
    gamma: np.ndarray = None
    lam: float = 1.0

    def __post_init__(self):
        nb = self.knots.size - 4
        grev = np.array([self.knots[i + 1:i + 4].mean() for i in range(nb)])
        rows = []
        for i in range(1, nb - 1):
            h0 = grev[i] - grev[i - 1]
            h1 = grev[i + 1] - grev[i]
            row = np.zeros(nb)
            row[i - 1] = 1.0 / h0
            row[i] = -(1.0 / h0 + 1.0 / h1)
            row[i + 1] = 1.0 / h1
            rows.append(row)
        self.D = np.array(rows) if rows else np.zeros((0, nb))
        self.n_basis = nb
        if self.gamma is None:
            self.gamma = np.zeros(nb)

    def design(self, x):
        x = np.clip(x, self.knots[0], self.knots[-1])
        return BSpline.design_matrix(x, self.knots, 3).toarray()

    def evaluate(self, x):
        return self.design(np.asarray(x, dtype=np.float64)) @ self.gamma

    def penalty(self):
        d = self.D @ self.gamma
        return self.lam * float(d @ d)


@dataclass
class LinearComponent:
    """Centred ridge-penalized linear term, used for binary columns."""

    center: float
    coef: float = 0.0
    lam: float = 1.0

    def evaluate(self, x):
        return self.coef * (np.asarray(x, dtype=np.float64) - self.center)

    def penalty(self):
        return self.lam * self.coef ** 2


@dataclass
class AdditiveSurrogate:
    intercept: float
    components: list  # (column index, component)
    columns: list

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        out = np.full(X.shape[0], self.intercept)
        for j, comp in self.components:
            out += comp.evaluate(X[:, j])
        return out

    def penalty(self):
        return sum(comp.penalty() for _, comp in self.components)

    def component_table(self, j, n_grid=100):
        """(grid, value) table of one component for external plotting."""
        for jj, comp in self.components:
            if jj == j:
                if isinstance(comp, SplineComponent):
                    grid = np.linspace(comp.knots[0], comp.knots[-1], n_grid)
                else:
                    grid = np.array([0.0, 1.0])
                return grid, comp.evaluate(grid)
        raise KeyError(f"no component for column {j}")


def _make_component(x, lam, n_knots):
    distinct = np.unique(x)
    if distinct.size < 2:
        return None
    if distinct.size <= 2:
        return LinearComponent(center=float(x.mean()), lam=lam)
    qs = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_knots)))
    if qs.size < 2:
        return None
    knots = np.concatenate([[qs[0]] * 3, qs, [qs[-1]] * 3])
    return SplineComponent(knots=knots, lam=lam)


def additive_projection(values, X, cfg=AdditiveSummaryConfig(), columns=None):
    """Penalized additive fit by cyclic backfitting.

    Each cycle solves every component's penalized least-squares problem
    exactly against the current partial residual and recentres it into
    the intercept, so the objective (SSE plus penalties) never
    increases.
    """
    values = np.asarray(values, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if columns is None:
        columns = [f"x{j}" for j in range(p)]

    comps = []
    solvers = []
    for j in range(p):
        comp = _make_component(X[:, j], cfg.penalty_lambda,
                               cfg.knots_per_covariate)
        if comp is None:
            continue
        if isinstance(comp, SplineComponent):
            B = comp.design(X[:, j])
            lhs = B.T @ B + comp.lam * (comp.D.T @ comp.D)
            solvers.append(("spline", j, comp, B, lhs))
        else:
            xc = X[:, j] - comp.center
            denom = float(xc @ xc) + comp.lam
            solvers.append(("linear", j, comp, xc, denom))
        comps.append((j, comp))

    intercept = float(values.mean())
    comp_fits = {j: np.zeros(n) for j, _ in comps}
    objective_path = []
    converged = False
    for _ in range(cfg.max_backfit_iters):
        max_change = 0.0
        for kind, j, comp, aux, lhs in solvers:
            partial = values - intercept
            for jj, fit in comp_fits.items():
                if jj != j:
                    partial -= fit
            if kind == "spline":
                B = aux
                rhs = B.T @ partial
                try:
                    gamma = np.linalg.solve(lhs, rhs)
                except np.linalg.LinAlgError:
                    gamma = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
                new_fit = B @ gamma
                shift = float(new_fit.mean())
                gamma = gamma - shift
                comp.gamma = gamma
                new_fit = new_fit - shift
            else:
                xc, denom = aux, lhs
                coef = float(xc @ partial) / denom
                comp.coef = coef
                new_fit = coef * xc
                shift = float(new_fit.mean())
                new_fit = new_fit - shift
            intercept += shift
            max_change = max(max_change, float(np.max(np.abs(new_fit - comp_fits[j])))
                             if n else 0.0)
            comp_fits[j] = new_fit
        surrogate = AdditiveSurrogate(intercept, comps, list(columns))
        fitted = intercept + sum(comp_fits.values()) if comps else np.full(n, intercept)
        objective_path.append(float(np.sum((values - fitted) ** 2))
                              + surrogate.penalty())
        if max_change < cfg.convergence_tol:
            converged = True
            break

    surrogate = AdditiveSurrogate(intercept, comps, list(columns))
    fitted = intercept + sum(comp_fits.values()) if comps else np.full(n, intercept)
    r2 = summary_r_squared(values, fitted)
    degenerate = np.sum((values - values.mean()) ** 2) == 0.0
    result = SummaryResult(surrogate, fitted, r2, degenerate=degenerate,
                           converged=converged)
    result.objective_path = objective_path
    return result


# ---------------------------------------------------------------------------
# Posterior distribution of the summary quality
# ---------------------------------------------------------------------------

@dataclass
class SummaryDistribution:
    r_squared: np.ndarray       # one value per posterior draw
    reference: SummaryResult    # surrogate fitted to the posterior mean
    per_draw: list = None       # per-draw SummaryResult, when retained


def posterior_summary_distribution(effect_draws, X, cfg, which,
                                   columns=None, keep_surrogates=False):
    """Fit the chosen surrogate to every posterior draw of a surface.

    Returns the posterior distribution of the summary R-squared together
    with a single reference fit to the posterior-mean surface.
    """
    effect_draws = np.asarray(effect_draws, dtype=np.float64)
    if which == "cart":
        def fit_one(v):
            return cart_projection(v, X, cfg, columns=columns)
    elif which == "gam":
        def fit_one(v):
            return additive_projection(v, X, cfg, columns=columns)
    else:
        raise ValueError("which must be 'cart' or 'gam'")
    results = [fit_one(draw) for draw in effect_draws]
    reference = fit_one(effect_draws.mean(axis=0))
    return SummaryDistribution(
        r_squared=np.array([r.r_squared for r in results]),
        reference=reference,
        per_draw=results if keep_surrogates else None,
    )
