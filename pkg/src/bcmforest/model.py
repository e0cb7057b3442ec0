"""The mediation sampler: five tree ensembles in one Gibbs loop.

The outcome is modelled with varying coefficients on the treatment and
the mediator,

    Y_i = prognostic(X_i) + A_i * treat_effect(X_i)
          + M_i * mediator_slope(X_i) + eps_i,

while the mediator gets its own two-forest decomposition,

    M_i = mediator_baseline(X_i) + A_i * mediator_effect(X_i) + nu_i.

Each of the five functions carries an independent ensemble prior, and
all five are updated by backfitting against the appropriate partial
residual with per-observation scales (1, A, M, 1, A respectively), so
the same tree kernel drives every update.  Binary outcomes and
mediators swap the Gaussian response for truncated-normal latents with
the noise variance pinned to one.

Confounding corrections enter as extra covariates: an estimated
propensity score is appended to all five ensembles' inputs, and the
two arm-wise mediator regression estimates to the outcome-side
ensembles.  These are point estimates computed once, before the main
chains run.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from . import _kernels as kernels
from .errors import DataError
from .trees import (
    ForestSampler,
    NoisePrior,
    Tree,
    TreePrior,
    calibrate_noise_lambda,
    leaf_scale,
    sample_noise_var,
    sample_probit_latents,
)

log = logging.getLogger("bcmforest")

OUTCOME_FOREST_NAMES = ("prognostic", "treat_effect", "mediator_slope")
MEDIATOR_FOREST_NAMES = ("mediator_baseline", "mediator_effect")
FOREST_NAMES = OUTCOME_FOREST_NAMES + MEDIATOR_FOREST_NAMES

PROPENSITY_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class ForestConfig:
    """Ensemble settings for one of the five functions."""

    m: int
    alpha: float
    beta: float
    k: float

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if self.k <= 0.0:
            raise ValueError("k must be positive")

    @property
    def tree_prior(self):
        return TreePrior(self.alpha, self.beta)

    @property
    def leaf_sd(self):
        return leaf_scale(self.k, self.m)


@dataclass(frozen=True)
class CleverConfig:
    """Settings for the auxiliary fits that produce the extra covariates."""

    m: int = 50
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    burn_in: int = 250
    n_samples: int = 250

    @property
    def forest(self):
        return ForestConfig(self.m, self.alpha, self.beta, self.k)


def _default_wide():
    return ForestConfig(200, 0.95, 2.0, 2.0)


def _default_narrow():
    # Few trees and a small split probability shrink the function
    # towards a constant, keeping the effect surfaces nearly homogeneous
    # unless the data insist otherwise.
    return ForestConfig(20, 0.5, 2.0, 2.0)


@dataclass
class BCMFConfig:
    """Full sampler configuration."""

    prognostic: ForestConfig = field(default_factory=_default_wide)
    treat_effect: ForestConfig = field(default_factory=_default_narrow)
    mediator_slope: ForestConfig = field(default_factory=_default_narrow)
    mediator_baseline: ForestConfig = field(default_factory=_default_wide)
    mediator_effect: ForestConfig = field(default_factory=_default_narrow)
    clever: CleverConfig = field(default_factory=CleverConfig)
    burn_in: int = 2500
    n_samples: int = 2500
    n_chains: int = 2
    seed: int = 0
    outcome_kind: str = "continuous"
    mediator_kind: str = "continuous"
    noise_nu: float = 3.0
    keep_forests: bool = True

    def __post_init__(self):
        if self.outcome_kind not in ("continuous", "binary"):
            raise ValueError("outcome_kind must be 'continuous' or 'binary'")
        if self.mediator_kind not in ("continuous", "binary"):
            raise ValueError("mediator_kind must be 'continuous' or 'binary'")
        if self.n_samples < 1 or self.burn_in < 0 or self.n_chains < 1:
            raise ValueError("invalid chain controls")
        if self.noise_nu <= 0:
            raise ValueError("noise_nu must be positive")

    def forest_config(self, name):
        return getattr(self, name)


@dataclass
class MediationData:
    """Outcome, treatment, mediator and covariates, already numeric.

    Categorical covariates must be one-hot binarized before
    construction (the ingestion layer owns that transformation).
    """

    y: np.ndarray
    a: np.ndarray
    m: np.ndarray
    x: np.ndarray
    columns: list = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError("covariates must form a 2-d matrix")
        n = self.y.shape[0]
        if not (self.a.shape[0] == self.m.shape[0] == self.x.shape[0] == n):
            raise DataError("y, a, m, x must have the same number of rows")
        for name, arr in (("outcome", self.y), ("treatment", self.a),
                          ("mediator", self.m), ("covariates", self.x)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"missing or non-finite values in {name}")
        if not np.all(np.isin(self.a, (0.0, 1.0))):
            raise DataError("treatment values must be 0 or 1")
        if self.a.sum() == 0 or self.a.sum() == n:
            raise DataError("both treatment arms must be nonempty")
        if self.columns is None:
            self.columns = [f"x{j}" for j in range(self.x.shape[1])]

    @property
    def n(self):
        return self.y.shape[0]


@dataclass
class CleverCovariates:
    """Confounding-correction covariates: propensity and arm regressions."""

    pi_hat: np.ndarray
    m0_hat: np.ndarray
    m1_hat: np.ndarray

    def __post_init__(self):
        lo, hi = PROPENSITY_CLIP
        if np.any(self.pi_hat < lo) or np.any(self.pi_hat > hi):
            raise ValueError("pi_hat must be clipped to the configured range")


@dataclass
class ForestDraws:
    """Preorder-encoded ensemble snapshots, one per retained draw."""

    n_features: int
    draws: list  # of (var: int32[], payload: f8[], tree_sizes: int32[])

    def n_draws(self):
        return len(self.draws)

    def evaluate(self, X, draw):
        XT = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
        if XT.shape[0] != self.n_features:
            raise ValueError("covariate dimension mismatch")
        var_all, val_all, sizes = self.draws[draw]
        fit = np.zeros(XT.shape[1])
        start = 0
        for size in sizes:
            tree = Tree.from_preorder(var_all[start:start + size],
                                      val_all[start:start + size],
                                      self.n_features)
            kernels.accumulate_fit(fit, tree.value, tree.assign_slots(XT))
            start += size
        return fit

    def evaluate_all(self, X):
        return np.stack([self.evaluate(X, d) for d in range(len(self.draws))])


@dataclass
class AuxModel:
    """A retained auxiliary fit usable for out-of-sample point estimates."""

    kind: str  # "continuous" or "probit"
    draws: ForestDraws
    y_mean: float = 0.0
    y_sd: float = 1.0

    def predict(self, X):
        acc = np.zeros(np.asarray(X).shape[0])
        n_draws = self.draws.n_draws()
        for d in range(n_draws):
            fit = self.draws.evaluate(X, d)
            acc += ndtr(fit) if self.kind == "probit" else fit
        acc /= n_draws
        if self.kind == "continuous":
            acc = acc * self.y_sd + self.y_mean
        return acc


@dataclass
class CleverModels:
    propensity: AuxModel
    arm0: AuxModel
    arm1: AuxModel

    def covariates(self, X):
        lo, hi = PROPENSITY_CLIP
        pi = np.clip(self.propensity.predict(X), lo, hi)
        return CleverCovariates(pi, self.arm0.predict(X), self.arm1.predict(X))


@dataclass
class MediationFit:
    """Posterior draws of the five functions plus everything needed to reuse them.

    Function draws are stored on the internal (standardized / latent)
    scale together with the standardization constants; accessors
    back-transform.  ``forests`` and ``clever_models`` are retained when
    the configuration asks for them and enable out-of-sample prediction.
    """

    config: BCMFConfig
    columns: list
    y_mean: float
    y_sd: float
    m_mean: float
    m_sd: float
    functions: dict  # name -> (n_draws, n_train) internal scale
    sigma2: np.ndarray
    sigma2_m: np.ndarray
    chain_id: np.ndarray
    clever: CleverCovariates
    train_x: np.ndarray = None
    forests: dict = None  # name -> ForestDraws
    clever_models: CleverModels = None

    @property
    def outcome_kind(self):
        return self.config.outcome_kind

    @property
    def mediator_kind(self):
        return self.config.mediator_kind

    @property
    def n_draws(self):
        return self.sigma2.shape[0]

    @property
    def n_train(self):
        return self.functions["prognostic"].shape[1]

    def original_scale(self, internal):
        """Back-transform a dict of internal-scale function draws."""
        prog = internal["prognostic"]
        treat = internal["treat_effect"]
        mslope = internal["mediator_slope"]
        mbase = internal["mediator_baseline"]
        meff = internal["mediator_effect"]
        d_orig = mslope * (self.y_sd / self.m_sd)
        return {
            "prognostic": self.y_mean + self.y_sd * prog - self.m_mean * d_orig,
            "treat_effect": self.y_sd * treat,
            "mediator_slope": d_orig,
            "mediator_baseline": self.m_mean + self.m_sd * mbase,
            "mediator_effect": self.m_sd * meff,
        }

    def training_functions(self):
        """Original-scale function draws evaluated at the training rows."""
        return self.original_scale(self.functions)


def _standardize(v, label):
    mean = float(np.mean(v))
    sd = float(np.std(v))
    if sd <= 0:
        raise DataError(f"{label} has zero variance")
    return (v - mean) / sd, mean, sd


def _snapshot_config(cfg):
    # configs are lightweight; keep an immutable echo alongside the draws
    return replace(cfg)


# ---------------------------------------------------------------------------
# Auxiliary fits for the correction covariates
# ---------------------------------------------------------------------------

def _bart_point_fit(X_fit, y_fit, kind, cfg, noise_nu, rng, X_eval,
                    keep_model):
    """Posterior-mean prediction of a single-ensemble fit on ``X_eval``.

    ``kind`` selects the Gaussian or probit likelihood.  Returns the
    point estimates and, when requested, an :class:`AuxModel` with the
    retained ensemble snapshots.
    """
    forest_cfg = cfg.forest
    sampler = ForestSampler(X_fit, forest_cfg.m, forest_cfg.tree_prior,
                            forest_cfg.leaf_sd)
    n = X_fit.shape[0]
    ones = np.ones(n)
    acc = np.zeros(np.asarray(X_eval).shape[0])
    snapshots = []
    if kind == "continuous":
        if np.std(y_fit) > 0:
            ys, y_mean, y_sd = _standardize(y_fit, "auxiliary response")
        else:
            # constant response: fit residuals of zero, predict the constant
            y_mean, y_sd = float(np.mean(y_fit)), 1.0
            ys = y_fit - y_mean
        prior = NoisePrior(noise_nu, calibrate_noise_lambda(ys, X_fit, noise_nu))
        sigma2 = 1.0
        for it in range(cfg.burn_in + cfg.n_samples):
            sampler.sweep(ys, ones, sigma2, rng)
            sigma2 = sample_noise_var(ys, ones, sampler.full_fit, prior, rng)
            if it >= cfg.burn_in:
                acc += sampler.predict(X_eval)
                if keep_model:
                    snapshots.append(sampler.snapshot())
        acc /= cfg.n_samples
        point = acc * y_sd + y_mean
        model = None
        if keep_model:
            model = AuxModel("continuous",
                             ForestDraws(X_fit.shape[1], snapshots),
                             y_mean, y_sd)
        return point, model
    # probit
    y01 = y_fit
    for it in range(cfg.burn_in + cfg.n_samples):
        latents = sample_probit_latents(y01, sampler.full_fit, rng)
        sampler.sweep(latents, ones, 1.0, rng)
        if it >= cfg.burn_in:
            acc += ndtr(sampler.predict(X_eval))
            if keep_model:
                snapshots.append(sampler.snapshot())
    acc /= cfg.n_samples
    model = None
    if keep_model:
        model = AuxModel("probit", ForestDraws(X_fit.shape[1], snapshots))
    return acc, model


def _build_clever(data, cfg, rng, keep_models):
    n1 = int(data.a.sum())
    n0 = data.n - n1
    if min(n0, n1) < 10:
        raise DataError("each treatment arm needs at least 10 observations "
                        "to estimate the arm regressions")
    pi_raw, prop_model = _bart_point_fit(
        data.x, data.a, "probit", cfg.clever, cfg.noise_nu, rng, data.x,
        keep_models)
    pi_hat = np.clip(pi_raw, *PROPENSITY_CLIP)

    med_kind = "probit" if cfg.mediator_kind == "binary" else "continuous"
    arm_models = []
    arm_preds = []
    for arm in (0.0, 1.0):
        rows = data.a == arm
        pred, model = _bart_point_fit(
            data.x[rows], data.m[rows], med_kind, cfg.clever, cfg.noise_nu,
            rng, data.x, keep_models)
        arm_preds.append(pred)
        arm_models.append(model)
    clever = CleverCovariates(pi_hat, arm_preds[0], arm_preds[1])
    models = None
    if keep_models:
        models = CleverModels(prop_model, arm_models[0], arm_models[1])
    return clever, models


def build_clever_covariates(data, cfg, rng):
    """Point estimates of the propensity score and arm-wise mediator means.

    The propensity fit uses only (A, X); each mediator regression is fit
    within its own treatment arm and evaluated on every row.
    """
    clever, _ = _build_clever(data, cfg, rng, keep_models=False)
    return clever


# ---------------------------------------------------------------------------
# The main Gibbs loop
# ---------------------------------------------------------------------------

def _run_chain(env, cfg, seed, keep_forests):
    rng = np.random.default_rng(seed)
    n = env["n"]
    ones = np.ones(n)
    a = env["a"]
    m_reg = env["m_reg"]
    y_cont = env["y_std"]
    m_cont = env["m_std"]
    y01 = env["y01"]
    m01 = env["m01"]
    X_out, X_med = env["X_out"], env["X_med"]
    binary_y = cfg.outcome_kind == "binary"
    binary_m = cfg.mediator_kind == "binary"

    samplers = {}
    for name in OUTCOME_FOREST_NAMES:
        fc = cfg.forest_config(name)
        samplers[name] = ForestSampler(X_out, fc.m, fc.tree_prior, fc.leaf_sd)
    for name in MEDIATOR_FOREST_NAMES:
        fc = cfg.forest_config(name)
        samplers[name] = ForestSampler(X_med, fc.m, fc.tree_prior, fc.leaf_sd)
    prog, treat, mslope = (samplers[k] for k in OUTCOME_FOREST_NAMES)
    mbase, meff = (samplers[k] for k in MEDIATOR_FOREST_NAMES)

    sigma2 = 1.0
    sigma2_m = 1.0
    prior_y = prior_m = None
    if not binary_y:
        prior_y = NoisePrior(cfg.noise_nu,
                             calibrate_noise_lambda(y_cont, X_out, cfg.noise_nu))
    if not binary_m:
        prior_m = NoisePrior(cfg.noise_nu,
                             calibrate_noise_lambda(m_cont, X_med, cfg.noise_nu))

    keep = cfg.n_samples
    rec = {name: np.empty((keep, n)) for name in FOREST_NAMES}
    rec_sigma2 = np.empty(keep)
    rec_sigma2_m = np.empty(keep)
    snapshots = {name: [] for name in FOREST_NAMES} if keep_forests else None

    y_eff = y_cont
    m_eff = m_cont
    for it in range(cfg.burn_in + keep):
        if binary_y:
            pred = prog.full_fit + a * treat.full_fit + m_reg * mslope.full_fit
            y_eff = sample_probit_latents(y01, pred, rng)
        prog.sweep(y_eff - a * treat.full_fit - m_reg * mslope.full_fit,
                   ones, sigma2, rng)
        treat.sweep(y_eff - prog.full_fit - m_reg * mslope.full_fit,
                    a, sigma2, rng)
        mslope.sweep(y_eff - prog.full_fit - a * treat.full_fit,
                     m_reg, sigma2, rng)
        if not binary_y:
            total = prog.full_fit + a * treat.full_fit + m_reg * mslope.full_fit
            sigma2 = sample_noise_var(y_eff, ones, total, prior_y, rng)

        if binary_m:
            m_eff = sample_probit_latents(
                m01, mbase.full_fit + a * meff.full_fit, rng)
        mbase.sweep(m_eff - a * meff.full_fit, ones, sigma2_m, rng)
        meff.sweep(m_eff - mbase.full_fit, a, sigma2_m, rng)
        if not binary_m:
            total_m = mbase.full_fit + a * meff.full_fit
            sigma2_m = sample_noise_var(m_eff, ones, total_m, prior_m, rng)

        j = it - cfg.burn_in
        if j >= 0:
            for name in FOREST_NAMES:
                rec[name][j] = samplers[name].full_fit
            rec_sigma2[j] = sigma2
            rec_sigma2_m[j] = sigma2_m
            if keep_forests:
                for name in FOREST_NAMES:
                    snapshots[name].append(samplers[name].snapshot())
    counters = {name: dict(samplers[name].counters) for name in FOREST_NAMES}
    return rec, rec_sigma2, rec_sigma2_m, snapshots, counters


def fit_bcmf(data, cfg):
    """Run the full sampler and collect posterior draws.

    Clever covariates are estimated once up front, appended to the
    ensemble inputs, and held fixed; each chain then runs the
    five-ensemble backfitting loop with its own seeded stream.
    """
    if not isinstance(data, MediationData):
        raise DataError("data must be a MediationData instance")
    if cfg.mediator_kind == "binary" and not np.all(np.isin(data.m, (0.0, 1.0))):
        raise DataError("binary mediator values must be 0 or 1")
    if cfg.outcome_kind == "binary" and not np.all(np.isin(data.y, (0.0, 1.0))):
        raise DataError("binary outcome values must be 0 or 1")

    root = np.random.SeedSequence(cfg.seed)
    clever_seed, *chain_seeds = root.spawn(cfg.n_chains + 1)
    log.info("estimating clever covariates")
    clever, clever_models = _build_clever(
        data, cfg, np.random.default_rng(clever_seed), cfg.keep_forests)

    X_out = np.column_stack([data.x, clever.pi_hat, clever.m0_hat, clever.m1_hat])
    X_med = np.column_stack([data.x, clever.pi_hat])

    if cfg.outcome_kind == "binary":
        y_std, y_mean, y_sd = data.y, 0.0, 1.0
    else:
        y_std, y_mean, y_sd = _standardize(data.y, "outcome")
    if cfg.mediator_kind == "binary":
        m_std, m_mean, m_sd = data.m, 0.0, 1.0
        m_reg = data.m
    else:
        m_std, m_mean, m_sd = _standardize(data.m, "mediator")
        m_reg = m_std

    env = {
        "n": data.n,
        "a": data.a,
        "m_reg": m_reg,
        "y_std": y_std,
        "m_std": m_std,
        "y01": data.y if cfg.outcome_kind == "binary" else None,
        "m01": data.m if cfg.mediator_kind == "binary" else None,
        "X_out": X_out,
        "X_med": X_med,
    }

    pieces = []
    for c, seed in enumerate(chain_seeds):
        log.info("running chain %d/%d", c + 1, cfg.n_chains)
        pieces.append(_run_chain(env, cfg, seed, cfg.keep_forests))

    functions = {
        name: np.concatenate([p[0][name] for p in pieces], axis=0)
        for name in FOREST_NAMES
    }
    sigma2 = np.concatenate([p[1] for p in pieces])
    sigma2_m = np.concatenate([p[2] for p in pieces])
    chain_id = np.repeat(np.arange(cfg.n_chains, dtype=np.int32), cfg.n_samples)

    forests = None
    if cfg.keep_forests:
        forests = {}
        for name in FOREST_NAMES:
            width = X_out.shape[1] if name in OUTCOME_FOREST_NAMES else X_med.shape[1]
            draws = []
            for p in pieces:
                draws.extend(p[3][name])
            forests[name] = ForestDraws(width, draws)

    return MediationFit(
        config=_snapshot_config(cfg),
        columns=list(data.columns),
        y_mean=y_mean, y_sd=y_sd, m_mean=m_mean, m_sd=m_sd,
        functions=functions,
        sigma2=sigma2, sigma2_m=sigma2_m,
        chain_id=chain_id,
        clever=clever,
        train_x=data.x.copy(),
        forests=forests,
        clever_models=clever_models,
    )


def predict_functions(fit, X_new):
    """Original-scale function draws at new covariate rows.

    Clever covariates for the new rows come from the retained auxiliary
    fits, so predictions are deterministic given the stored draws.
    """
    if fit.forests is None or fit.clever_models is None:
        raise ValueError("fit was run with keep_forests=False; "
                         "serialized ensembles are unavailable")
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim != 2 or X_new.shape[1] != len(fit.columns):
        raise ValueError("X_new must have the training covariate columns")
    clever = fit.clever_models.covariates(X_new)
    X_out = np.column_stack([X_new, clever.pi_hat, clever.m0_hat, clever.m1_hat])
    X_med = np.column_stack([X_new, clever.pi_hat])
    internal = {}
    for name in FOREST_NAMES:
        mat = X_out if name in OUTCOME_FOREST_NAMES else X_med
        internal[name] = fit.forests[name].evaluate_all(mat)
    return fit.original_scale(internal)
