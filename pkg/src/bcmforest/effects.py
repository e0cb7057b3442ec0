"""Turn posterior function draws into direct / indirect / total effects.

With a continuous outcome the varying-coefficient parameterization makes
the conditional effects products of coefficients: the direct effect is
the treatment coefficient itself, and the indirect effect is the
treatment-on-mediator effect times the mediator slope.  Probit variants
replace those products with normal-CDF expressions on the latent scale;
binary-outcome effects are reported as risk differences.

Averages over the covariate distribution use Dirichlet(1, ..., 1)
resampling weights (one weight vector per posterior draw), with the
equal-weight empirical average available alongside.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .model import predict_functions


@dataclass
class EffectDraws:
    """Per-draw, per-row conditional effects on the reporting scale."""

    direct: np.ndarray
    indirect: np.ndarray
    total: np.ndarray
    outcome_kind: str = "continuous"
    mediator_kind: str = "continuous"

    def __post_init__(self):
        if not (self.direct.shape == self.indirect.shape == self.total.shape):
            raise ValueError("effect matrices must share a shape")

    @property
    def n_draws(self):
        return self.direct.shape[0]

    @property
    def n(self):
        return self.direct.shape[1]


@dataclass
class BBWeights:
    """Dirichlet(1, ..., 1) observation weights, one row per draw."""

    omega: np.ndarray

    def __post_init__(self):
        if np.any(self.omega < 0):
            raise ValueError("weights must be nonnegative")
        if np.max(np.abs(self.omega.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("weight rows must sum to one")


@dataclass
class AverageEffects:
    """Per-draw averages of the conditional effects."""

    direct: np.ndarray
    indirect: np.ndarray
    total: np.ndarray
    weights: BBWeights = None


def _functions_for(fit, X_new):
    if X_new is None:
        return fit.training_functions()
    return predict_functions(fit, X_new)


def conditional_effects_continuous(fit, X_new=None):
    """Effects for a continuous outcome and continuous mediator."""
    if fit.outcome_kind != "continuous" or fit.mediator_kind != "continuous":
        raise ValueError("fit is not continuous/continuous")
    fn = _functions_for(fit, X_new)
    direct = fn["treat_effect"]
    indirect = fn["mediator_effect"] * fn["mediator_slope"]
    return EffectDraws(direct, indirect, direct + indirect,
                       "continuous", "continuous")


def conditional_effects_binary_mediator(fit, X_new=None):
    """Effects when the mediator is binary (latent probit mediator model).

    The mediated effect is the mediator slope times the shift in the
    success probability induced by treatment.
    """
    if fit.mediator_kind != "binary" or fit.outcome_kind != "continuous":
        raise ValueError("fit is not continuous-outcome / binary-mediator")
    fn = _functions_for(fit, X_new)
    bump = ndtr(fn["mediator_baseline"] + fn["mediator_effect"]) \
        - ndtr(fn["mediator_baseline"])
    direct = fn["treat_effect"]
    indirect = fn["mediator_slope"] * bump
    return EffectDraws(direct, indirect, direct + indirect,
                       "continuous", "binary")


def counterfactual_mean_binary_outcome(mu, zeta, d, mu_m, tau_m, sigma_m,
                                       a, a_prime):
    """P(Y = 1) under treatment ``a`` with the mediator set to its
    potential distribution under ``a_prime`` (continuous mediator).

    Integrating the normal mediator through the probit link gives
    ``Phi((mu + a*zeta + (mu_m + a'*tau_m) * d) / sqrt(1 + d^2 sigma_m^2))``.
    Broadcasts over array inputs.
    """
    sigma_m = np.asarray(sigma_m, dtype=np.float64)
    if np.any(sigma_m < 0):
        raise ValueError("sigma_m must be nonnegative")
    num = (np.asarray(mu) + a * np.asarray(zeta)
           + (np.asarray(mu_m) + a_prime * np.asarray(tau_m)) * np.asarray(d))
    den = np.sqrt(1.0 + np.asarray(d) ** 2 * sigma_m ** 2)
    out = ndtr(num / den)
    return float(out) if np.isscalar(mu) else out


def counterfactual_mean_binary_both(mu, zeta, d, mu_m, tau_m, a, a_prime):
    """P(Y = 1) when both outcome and mediator are binary probit models."""
    q = ndtr(np.asarray(mu_m) + a_prime * np.asarray(tau_m))
    base = np.asarray(mu) + a * np.asarray(zeta)
    return (1.0 - q) * ndtr(base) + q * ndtr(base + np.asarray(d))


def conditional_effects_binary_outcome(fit, X_new=None):
    """Risk-difference effects for a binary outcome.

    Reports the control-arm direct effect and treated-arm indirect
    effect, whose sum is exactly the total risk difference.
    """
    if fit.outcome_kind != "binary":
        raise ValueError("fit does not have a binary outcome")
    fn = _functions_for(fit, X_new)
    mu, zeta, d = fn["prognostic"], fn["treat_effect"], fn["mediator_slope"]
    mu_m, tau_m = fn["mediator_baseline"], fn["mediator_effect"]
    if fit.mediator_kind == "continuous":
        sigma_m = fit.m_sd * np.sqrt(fit.sigma2_m)[:, None]

        def p(a, ap):
            return counterfactual_mean_binary_outcome(
                mu, zeta, d, mu_m, tau_m, sigma_m, a, ap)
    else:
        def p(a, ap):
            return counterfactual_mean_binary_both(mu, zeta, d, mu_m, tau_m, a, ap)
    p00, p10, p11 = p(0, 0), p(1, 0), p(1, 1)
    return EffectDraws(p10 - p00, p11 - p10, p11 - p00,
                       "binary", fit.mediator_kind)


def conditional_effects(fit, X_new=None):
    """Dispatch on the fit's outcome/mediator kinds."""
    if fit.outcome_kind == "binary":
        return conditional_effects_binary_outcome(fit, X_new)
    if fit.mediator_kind == "binary":
        return conditional_effects_binary_mediator(fit, X_new)
    return conditional_effects_continuous(fit, X_new)


def bayesian_bootstrap_averages(effects, rng):
    """Weighted averages with one Dirichlet weight vector per draw."""
    n_draws, n = effects.direct.shape
    omega = rng.dirichlet(np.ones(n), size=n_draws)
    weights = BBWeights(omega)
    return AverageEffects(
        direct=np.sum(omega * effects.direct, axis=1),
        indirect=np.sum(omega * effects.indirect, axis=1),
        total=np.sum(omega * effects.total, axis=1),
        weights=weights,
    )


def equal_weight_averages(effects):
    """Empirical-distribution averages (uniform weights)."""
    return AverageEffects(
        direct=effects.direct.mean(axis=1),
        indirect=effects.indirect.mean(axis=1),
        total=effects.total.mean(axis=1),
    )


def subgroup_averages(effects, groups):
    """Per-draw unweighted group means of the conditional effects.

    ``groups`` maps a group label to a boolean membership vector (or an
    integer/str label array, in which case one group per distinct label
    is formed).  Every group must be nonempty.
    """
    if not isinstance(groups, dict):
        labels = np.asarray(groups)
        groups = {str(v): labels == v for v in np.unique(labels)}
    out = {}
    for name, mask in groups.items():
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != effects.n or not mask.any():
            raise ValueError(f"group {name!r} is empty or misshapen")
        out[name] = AverageEffects(
            direct=effects.direct[:, mask].mean(axis=1),
            indirect=effects.indirect[:, mask].mean(axis=1),
            total=effects.total[:, mask].mean(axis=1),
        )
    return out
