"""Desk-scale simulation harness: synthetic truths, an interacted linear
structural-equation baseline with residual bootstrap, and
coverage/RMSE/bias/length scoring of both methods.

The study design mirrors the usual protocol: covariates and the true
effect surfaces are drawn once per study, shared across replications;
each replication redraws treatment, mediator and outcome, fits both
methods on the training rows, and scores conditional and average
effects on the held-out rows where the truth is known exactly.  Every
report is labelled a desk-scale analogue: sample sizes, replication
counts and chain lengths are far below what a production study would
use.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .effects import bayesian_bootstrap_averages, conditional_effects
from .errors import DataError
from .model import BCMFConfig, CleverConfig, ForestConfig, MediationData, fit_bcmf
from .summaries import CartSummaryConfig, cart_projection

DESK_SCALE_LABEL = ("desk-scale analogue: reduced sample sizes, replication "
                    "counts, and chain lengths")

# Equal-tailed 95% intervals with linear order-statistic interpolation.
INTERVAL_QS = (0.025, 0.975)


def interval(draws, axis=0):
    lo, hi = np.quantile(draws, INTERVAL_QS, axis=axis)
    return lo, hi


# ---------------------------------------------------------------------------
# Ground truths
# ---------------------------------------------------------------------------

@dataclass
class CovariateSampler:
    """Mixed design: uniform continuous columns then Bernoulli(1/2) binaries."""

    p_cont: int = 5
    p_bin: int = 3

    @property
    def p(self):
        return self.p_cont + self.p_bin

    def sample(self, n, rng):
        cont = rng.uniform(size=(n, self.p_cont))
        bins = (rng.random((n, self.p_bin)) < 0.5).astype(np.float64)
        return np.column_stack([cont, bins])


@dataclass
class LsemTruth:
    """Linear structural equations with treatment/mediator interactions.

    Outcome:  y = b0y + x'by + a (g0y + x'gy) + m (xi0 + x'xi) + eps
    Mediator: m = b0m + x'bm + a (g0m + x'gm) + nu
    """

    kind: str
    sampler: CovariateSampler
    b0y: float
    by: np.ndarray
    g0y: float
    gy: np.ndarray
    xi0: float
    xi: np.ndarray
    b0m: float
    bm: np.ndarray
    g0m: float
    gm: np.ndarray
    prop_coef: np.ndarray
    sigma: float = 0.7
    sigma_m: float = 0.7

    def sample_x(self, n, rng):
        return self.sampler.sample(n, rng)

    def propensity(self, X):
        centered = X - 0.5
        return 1.0 / (1.0 + np.exp(-(centered @ self.prop_coef)))

    def prognostic(self, X):
        return self.b0y + X @ self.by

    def direct_effect(self, X):
        return self.g0y + X @ self.gy

    def mediator_slope(self, X):
        return self.xi0 + X @ self.xi

    def mediator_baseline(self, X):
        return self.b0m + X @ self.bm

    def mediator_effect(self, X):
        return self.g0m + X @ self.gm

    def indirect_effect(self, X):
        return self.mediator_effect(X) * self.mediator_slope(X)


@dataclass
class StepSurface:
    """A random depth-<=2 axis-aligned step function."""

    vars: np.ndarray    # 3 node variables (root, left, right)
    cuts: np.ndarray    # matching thresholds
    values: np.ndarray  # 4 leaf values (LL, LR, RL, RR)
    depth2: np.ndarray  # whether each depth-1 node actually splits

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        left = X[:, self.vars[0]] <= self.cuts[0]
        out = np.empty(X.shape[0])
        lsplit = X[:, self.vars[1]] <= self.cuts[1] if self.depth2[0] else None
        rsplit = X[:, self.vars[2]] <= self.cuts[2] if self.depth2[1] else None
        if self.depth2[0]:
            out[left] = np.where(lsplit[left], self.values[0], self.values[1])
        else:
            out[left] = self.values[0]
        if self.depth2[1]:
            out[~left] = np.where(rsplit[~left], self.values[2], self.values[3])
        else:
            out[~left] = self.values[2]
        return out


@dataclass
class StepTruth:
    """Shallow random step surfaces: small effect amplitudes, larger baselines."""

    kind: str
    sampler: CovariateSampler
    surfaces: dict
    prop_coef: np.ndarray
    sigma: float = 0.7
    sigma_m: float = 0.7

    def sample_x(self, n, rng):
        return self.sampler.sample(n, rng)

    def propensity(self, X):
        centered = X - 0.5
        return 1.0 / (1.0 + np.exp(-(centered @ self.prop_coef)))

    def prognostic(self, X):
        return self.surfaces["prognostic"](X)

    def direct_effect(self, X):
        return self.surfaces["direct_effect"](X)

    def mediator_slope(self, X):
        return self.surfaces["mediator_slope"](X)

    def mediator_baseline(self, X):
        return self.surfaces["mediator_baseline"](X)

    def mediator_effect(self, X):
        return self.surfaces["mediator_effect"](X)

    def indirect_effect(self, X):
        return self.mediator_effect(X) * self.mediator_slope(X)


def _random_step(rng, sampler, amplitude, offset=0.0):
    p = sampler.p
    vars_ = rng.integers(0, p, size=3)
    cuts = np.where(vars_ < sampler.p_cont, rng.uniform(0.2, 0.8, size=3), 0.5)
    values = offset + amplitude * rng.standard_normal(4)
    depth2 = rng.random(2) < 0.5
    return StepSurface(vars_, cuts, values, depth2)


def make_truth(kind, rng, sampler=None, homogeneous=False, null=False,
               zero_frac=0.8):
    """Build one of the three ground-truth families.

    ``lsem``: interacted linear equations with moderate heterogeneity.
    ``sparse-linear``: the same with most moderator coefficients zeroed,
    mimicking heavy shrinkage of the interaction structure.
    ``bcmf-like``: shallow random step surfaces with small, mostly
    homogeneous effects.
    """
    sampler = sampler or CovariateSampler()
    p = sampler.p
    prop_coef = 0.4 * rng.standard_normal(p)
    if kind == "bcmf-like":
        surfaces = {
            "prognostic": _random_step(rng, sampler, 0.8),
            "direct_effect": _random_step(rng, sampler, 0.10, offset=0.3),
            "mediator_slope": _random_step(rng, sampler, 0.08, offset=0.3),
            "mediator_baseline": _random_step(rng, sampler, 0.8),
            "mediator_effect": _random_step(rng, sampler, 0.10, offset=0.4),
        }
        return StepTruth(kind, sampler, surfaces, prop_coef)
    if kind not in ("lsem", "sparse-linear"):
        raise ValueError(f"unknown truth kind {kind!r}")
    by = 0.5 * rng.standard_normal(p)
    bm = 0.5 * rng.standard_normal(p)
    gy = 0.15 * rng.standard_normal(p)
    gm = 0.15 * rng.standard_normal(p)
    xi = 0.15 * rng.standard_normal(p)
    if kind == "sparse-linear":
        for vec in (gy, gm, xi):
            kill = rng.random(p) < zero_frac
            vec[kill] = 0.0
    if homogeneous:
        gy[:] = 0.0
        gm[:] = 0.0
        xi[:] = 0.0
    truth = LsemTruth(
        kind=kind, sampler=sampler,
        b0y=1.0, by=by, g0y=0.3, gy=gy, xi0=0.3, xi=xi,
        b0m=0.2, bm=bm, g0m=0.4, gm=gm,
        prop_coef=prop_coef,
    )
    if null:
        truth.g0y = 0.0
        truth.gy = np.zeros(p)
        truth.g0m = 0.0
        truth.gm = np.zeros(p)
    return truth


@dataclass
class TrueEffects:
    direct: np.ndarray
    indirect: np.ndarray

    @property
    def direct_avg(self):
        return float(self.direct.mean())

    @property
    def indirect_avg(self):
        return float(self.indirect.mean())


def generate_dataset(truth, n, rng, X=None):
    """Draw one dataset from a ground truth.

    Covariates can be supplied to reuse a shared design; otherwise they
    are sampled.  Returns the data plus the exact per-row effects.
    """
    if n < 50 and X is None:
        raise ValueError("n must be at least 50")
    if X is None:
        X = truth.sample_x(n, rng)
    n = X.shape[0]
    for _ in range(2):
        a = (rng.random(n) < truth.propensity(X)).astype(np.float64)
        if 0 < a.sum() < n:
            break
    else:
        raise DataError("degenerate treatment assignment after one resample")
    m = (truth.mediator_baseline(X) + a * truth.mediator_effect(X)
         + truth.sigma_m * rng.standard_normal(n))
    y = (truth.prognostic(X) + a * truth.direct_effect(X)
         + m * truth.mediator_slope(X) + truth.sigma * rng.standard_normal(n))
    data = MediationData(y, a, m, X)
    return data, TrueEffects(truth.direct_effect(X), truth.indirect_effect(X))


# ---------------------------------------------------------------------------
# Interacted-LSEM baseline
# ---------------------------------------------------------------------------

@dataclass
class LsemFit:
    """OLS estimates of the interacted linear structural equations."""

    b0y: float
    by: np.ndarray
    g0y: float
    gy: np.ndarray
    xi0: float
    xi: np.ndarray
    b0m: float
    bm: np.ndarray
    g0m: float
    gm: np.ndarray
    ridged: bool = False

    def direct_effect(self, X):
        return self.g0y + X @ self.gy

    def mediator_effect(self, X):
        return self.g0m + X @ self.gm

    def mediator_slope(self, X):
        return self.xi0 + X @ self.xi

    def indirect_effect(self, X):
        return self.mediator_effect(X) * self.mediator_slope(X)

    def predict_m(self, X, a):
        return self.b0m + X @ self.bm + a * self.mediator_effect(X)

    def predict_y(self, X, a, m):
        return (self.b0y + X @ self.by + a * self.direct_effect(X)
                + m * self.mediator_slope(X))


def _solve_ls(design, target):
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank == design.shape[1]:
        return coef, False
    # rank-deficient design: tiny ridge keeps the estimate defined
    gram = design.T @ design + 1e-6 * np.eye(design.shape[1])
    return np.linalg.solve(gram, design.T @ target), True


def fit_lsem(data):
    """Least squares for both interacted equations, with implied effects."""
    X, a, m, y = data.x, data.a, data.m, data.y
    n, p = X.shape
    ones = np.ones(n)
    design_y = np.column_stack([ones, X, a, a[:, None] * X, m, m[:, None] * X])
    design_m = np.column_stack([ones, X, a, a[:, None] * X])
    cy, ry = _solve_ls(design_y, y)
    cm, rm = _solve_ls(design_m, m)
    return LsemFit(
        b0y=cy[0], by=cy[1:p + 1],
        g0y=cy[p + 1], gy=cy[p + 2:2 * p + 2],
        xi0=cy[2 * p + 2], xi=cy[2 * p + 3:],
        b0m=cm[0], bm=cm[1:p + 1],
        g0m=cm[p + 1], gm=cm[p + 2:],
        ridged=ry or rm,
    )


@dataclass
class LsemBootstrap:
    base: LsemFit
    direct: np.ndarray    # (B, n_eval) bootstrap effect draws
    indirect: np.ndarray


def lsem_residual_bootstrap(data, B, rng, X_eval=None):
    """Residual-bootstrap effect draws for the linear baseline.

    Centred residuals of both equations are resampled, the mediator and
    then the outcome are regenerated with covariates and treatment held
    fixed, and both equations are refit; the effect surfaces of each
    refit are evaluated at ``X_eval``.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    X_eval = data.x if X_eval is None else np.asarray(X_eval, dtype=np.float64)
    base = fit_lsem(data)
    m_hat = base.predict_m(data.x, data.a)
    resid_m = data.m - m_hat
    resid_m = resid_m - resid_m.mean()
    y_hat = base.predict_y(data.x, data.a, data.m)
    resid_y = data.y - y_hat
    resid_y = resid_y - resid_y.mean()
    n = data.n
    direct = np.empty((B, X_eval.shape[0]))
    indirect = np.empty((B, X_eval.shape[0]))
    for b in range(B):
        m_b = m_hat + resid_m[rng.integers(n, size=n)]
        y_b = base.predict_y(data.x, data.a, m_b) \
            + resid_y[rng.integers(n, size=n)]
        refit = fit_lsem(MediationData(y_b, data.a, m_b, data.x))
        direct[b] = refit.direct_effect(X_eval)
        indirect[b] = refit.indirect_effect(X_eval)
    return LsemBootstrap(base, direct, indirect)


# ---------------------------------------------------------------------------
# Study orchestration
# ---------------------------------------------------------------------------

def desk_scale_bcmf_config():
    """Reduced sampler settings used inside simulation studies.

    Relative to the model defaults, the effect ensembles are shrunk
    harder towards homogeneity (fewer trees, smaller split probability,
    larger k): at n = 500 the per-row effect posteriors would otherwise
    be dominated by prior-side surface wiggle rather than information.
    """
    effect = ForestConfig(8, 0.25, 2.0, 2.5)
    return BCMFConfig(
        prognostic=ForestConfig(50, 0.95, 2.0, 2.0),
        treat_effect=effect,
        mediator_slope=effect,
        mediator_baseline=ForestConfig(50, 0.95, 2.0, 2.0),
        mediator_effect=effect,
        clever=CleverConfig(m=25, burn_in=150, n_samples=150),
        burn_in=300, n_samples=300, n_chains=2,
    )


@dataclass(frozen=True)
class FixedGroup:
    """Conjunction of simple column conditions defining a subgroup."""

    name: str
    conditions: tuple  # of (column index, "le" | "gt", value)

    def membership(self, X):
        mask = np.ones(X.shape[0], dtype=bool)
        for col, op, value in self.conditions:
            if op == "le":
                mask &= X[:, col] <= value
            elif op == "gt":
                mask &= X[:, col] > value
            else:
                raise ValueError(f"unknown condition op {op!r}")
        return mask


def default_fixed_groups():
    return (
        FixedGroup("x0_low_bin_off", ((0, "le", 0.5), (5, "le", 0.5))),
        FixedGroup("x0_low_bin_on", ((0, "le", 0.5), (5, "gt", 0.5))),
        FixedGroup("x0_high_bin_off", ((0, "gt", 0.5), (5, "le", 0.5))),
        FixedGroup("x0_high_bin_on", ((0, "gt", 0.5), (5, "gt", 0.5))),
    )


@dataclass
class StudySpec:
    truth_kind: str = "lsem"
    homogeneous: bool = False
    null_effects: bool = False
    zero_frac: float = 0.8
    methods: tuple = ("bcmf", "lsem")
    n_train: int = 500
    n_test: int = 500
    replications: int = 100
    seed: int = 0
    bcmf: BCMFConfig = field(default_factory=desk_scale_bcmf_config)
    bootstrap_b: int = 200
    fixed_groups: tuple = field(default_factory=default_fixed_groups)
    dynamic_group_depth: int = 2
    workers: int = 1

    def __post_init__(self):
        bad = set(self.methods) - {"bcmf", "lsem"}
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        if self.replications < 1:
            raise ValueError("replications must be positive")


@dataclass
class SimReport:
    """Per-record scores plus pooled aggregates for one study."""

    label: str
    spec_echo: dict
    records: list      # dicts: rep, method, target, estimate, lo, hi, truth
    heldout: list      # dicts: rep, method, rmse_y, corr_y, rmse_m, corr_m
    failures: list     # dicts: rep, error
    aggregates: list = None

    def __post_init__(self):
        if self.aggregates is None:
            setting = self.spec_echo.get("truth_kind", "")
            self.aggregates = aggregate_records(self.records, setting=setting)


def score_rows(rep, method, target, estimates, lo, hi, truth):
    """One record per scored quantity, with coverage and length."""
    estimates = np.atleast_1d(np.asarray(estimates, dtype=np.float64))
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    truth = np.atleast_1d(np.asarray(truth, dtype=np.float64))
    out = []
    for i in range(estimates.size):
        out.append({
            "rep": rep, "method": method, "target": target, "index": i,
            "estimate": float(estimates[i]), "lo": float(lo[i]),
            "hi": float(hi[i]), "truth": float(truth[i]),
            "covered": bool(lo[i] <= truth[i] <= hi[i]),
            "length": float(hi[i] - lo[i]),
        })
    return out


def aggregate_records(records, setting=""):
    """Pooled coverage, RMSE, absolute bias and mean length per key.

    Rows echo the usual reporting format: setting (the truth family),
    method, then coverage / RMSE / bias / interval length.
    """
    keys = sorted({(r["method"], r["target"]) for r in records})
    out = []
    for method, target in keys:
        sub = [r for r in records if r["method"] == method and r["target"] == target]
        err = np.array([r["estimate"] - r["truth"] for r in sub])
        out.append({
            "setting": setting, "method": method, "target": target,
            "count": len(sub),
            "coverage": float(np.mean([r["covered"] for r in sub])),
            "rmse": float(np.sqrt(np.mean(err ** 2))),
            "bias": float(abs(np.mean(err))),
            "length": float(np.mean([r["length"] for r in sub])),
        })
    return out


def _dynamic_groups(point_estimates, X, depth):
    cfg = CartSummaryConfig(max_depth=depth)
    result = cart_projection(point_estimates, X, cfg)
    labels = result.surrogate.leaf_labels(X)
    return labels


def _score_method(rep, method, direct_draws, indirect_draws, truths, X_test,
                  fixed_groups, dynamic_depth, avg_rng):
    """Shared scorer: per-row, average, and subgroup targets from draws."""
    records = []
    for target, draws, truth_vec in (
        ("direct_row", direct_draws, truths.direct),
        ("indirect_row", indirect_draws, truths.indirect),
    ):
        lo, hi = interval(draws)
        records += score_rows(rep, method, target, draws.mean(axis=0), lo, hi,
                              truth_vec)

    if method == "bcmf":
        eff = _as_effectdraws(direct_draws, indirect_draws)
        avg = bayesian_bootstrap_averages(eff, avg_rng)
        avg_direct, avg_indirect = avg.direct, avg.indirect
    else:
        avg_direct = direct_draws.mean(axis=1)
        avg_indirect = indirect_draws.mean(axis=1)
    for target, draws, truth_val in (
        ("direct_avg", avg_direct, truths.direct.mean()),
        ("indirect_avg", avg_indirect, truths.indirect.mean()),
    ):
        lo, hi = interval(draws)
        records += score_rows(rep, method, target, draws.mean(), lo, hi, truth_val)

    group_sets = {f"fixed:{g.name}": g.membership(X_test) for g in fixed_groups}
    labels = _dynamic_groups(indirect_draws.mean(axis=0), X_test, dynamic_depth)
    for g in np.unique(labels):
        group_sets[f"dynamic:{g}"] = labels == g
    for name, mask in group_sets.items():
        if not mask.any():
            continue
        for target, draws, truth_vec in (
            (f"direct_sub_{name}", direct_draws, truths.direct),
            (f"indirect_sub_{name}", indirect_draws, truths.indirect),
        ):
            gdraws = draws[:, mask].mean(axis=1)
            lo, hi = interval(gdraws)
            records += score_rows(rep, method, target, gdraws.mean(), lo, hi,
                                  truth_vec[mask].mean())
    return records


def _as_effectdraws(direct, indirect):
    from .effects import EffectDraws
    return EffectDraws(direct, indirect, direct + indirect)


def _run_replication(spec, truth, X_train, X_test, rep):
    seed = np.random.SeedSequence(spec.seed, spawn_key=(1, rep))
    gen_ss, bcmf_ss, boot_ss, avg_ss = seed.spawn(4)
    rng = np.random.default_rng(gen_ss)
    train, _ = generate_dataset(truth, X_train.shape[0], rng, X=X_train)
    test, truths = generate_dataset(truth, X_test.shape[0], rng, X=X_test)

    records = []
    heldout = []
    if "bcmf" in spec.methods:
        cfg = replace(spec.bcmf, seed=int(bcmf_ss.generate_state(1)[0] % 2**31))
        fit = fit_bcmf(train, cfg)
        eff = conditional_effects(fit, X_test)
        records += _score_method(
            rep, "bcmf", eff.direct, eff.indirect, truths, X_test,
            spec.fixed_groups, spec.dynamic_group_depth,
            np.random.default_rng(avg_ss))
        from .model import predict_functions
        fn = predict_functions(fit, X_test)
        m_pred = (fn["mediator_baseline"] + test.a * fn["mediator_effect"]).mean(axis=0)
        y_pred = (fn["prognostic"] + test.a * fn["treat_effect"]
                  + test.m * fn["mediator_slope"]).mean(axis=0)
        heldout.append(_heldout_row(rep, "bcmf", test, y_pred, m_pred))
    if "lsem" in spec.methods:
        boot = lsem_residual_bootstrap(train, spec.bootstrap_b,
                                       np.random.default_rng(boot_ss), X_test)
        records += _score_method(
            rep, "lsem", boot.direct, boot.indirect, truths, X_test,
            spec.fixed_groups, spec.dynamic_group_depth,
            np.random.default_rng(avg_ss))
        m_pred = boot.base.predict_m(X_test, test.a)
        y_pred = boot.base.predict_y(X_test, test.a, test.m)
        heldout.append(_heldout_row(rep, "lsem", test, y_pred, m_pred))
    return records, heldout


def _heldout_row(rep, method, test, y_pred, m_pred):
    return {
        "rep": rep, "method": method,
        "rmse_y": float(np.sqrt(np.mean((test.y - y_pred) ** 2))),
        "corr_y": float(np.corrcoef(test.y, y_pred)[0, 1]),
        "rmse_m": float(np.sqrt(np.mean((test.m - m_pred) ** 2))),
        "corr_m": float(np.corrcoef(test.m, m_pred)[0, 1]),
    }


def _replication_task(args):
    spec, truth, X_train, X_test, rep = args
    try:
        return rep, _run_replication(spec, truth, X_train, X_test, rep), None
    except Exception as exc:  # recorded, never silently dropped
        return rep, None, f"{type(exc).__name__}: {exc}"


def run_study(spec):
    """Run the full crossing of replications for one truth setting."""
    design_rng = np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    truth = make_truth(spec.truth_kind, design_rng,
                       homogeneous=spec.homogeneous, null=spec.null_effects,
                       zero_frac=spec.zero_frac)
    X_train = truth.sample_x(spec.n_train, design_rng)
    X_test = truth.sample_x(spec.n_test, design_rng)

    tasks = [(spec, truth, X_train, X_test, rep)
             for rep in range(spec.replications)]
    results = {}
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for rep, payload, err in pool.map(_replication_task, tasks):
                results[rep] = (payload, err)
    else:
        for task in tasks:
            rep, payload, err = _replication_task(task)
            results[rep] = (payload, err)

    records, heldout, failures = [], [], []
    for rep in range(spec.replications):
        payload, err = results[rep]
        if err is not None:
            failures.append({"rep": rep, "error": err})
            continue
        rec, held = payload
        records += rec
        heldout += held

    return SimReport(
        label=DESK_SCALE_LABEL,
        spec_echo={
            "truth_kind": spec.truth_kind, "homogeneous": spec.homogeneous,
            "null_effects": spec.null_effects, "zero_frac": spec.zero_frac,
            "methods": list(spec.methods), "n_train": spec.n_train,
            "n_test": spec.n_test, "replications": spec.replications,
            "seed": spec.seed, "bootstrap_b": spec.bootstrap_b,
        },
        records=records,
        heldout=heldout,
        failures=failures,
    )
