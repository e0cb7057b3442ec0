import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.stats import norm

from bcmforest.effects import (
    BBWeights,
    EffectDraws,
    bayesian_bootstrap_averages,
    conditional_effects,
    conditional_effects_binary_mediator,
    conditional_effects_continuous,
    counterfactual_mean_binary_outcome,
    equal_weight_averages,
    subgroup_averages,
)
from bcmforest.model import BCMFConfig, CleverCovariates, MediationFit


def synthetic_fit(rng, n_draws=6, n=10, outcome_kind="continuous",
                  mediator_kind="continuous", y_sd=1.0, m_sd=1.0,
                  functions=None):
    if functions is None:
        functions = {
            name: rng.standard_normal((n_draws, n))
            for name in ("prognostic", "treat_effect", "mediator_slope",
                         "mediator_baseline", "mediator_effect")
        }
    ones = np.ones(n)
    return MediationFit(
        config=BCMFConfig(outcome_kind=outcome_kind,
                          mediator_kind=mediator_kind,
                          n_samples=n_draws, n_chains=1),
        columns=[f"x{j}" for j in range(3)],
        y_mean=0.0, y_sd=y_sd, m_mean=0.0, m_sd=m_sd,
        functions=functions,
        sigma2=np.full(n_draws, 0.5),
        sigma2_m=np.full(n_draws, 0.8),
        chain_id=np.zeros(n_draws, dtype=np.int32),
        clever=CleverCovariates(0.5 * ones, 0.0 * ones, 0.0 * ones),
    )


def constant_functions(n_draws, n, **values):
    out = {}
    for name in ("prognostic", "treat_effect", "mediator_slope",
                 "mediator_baseline", "mediator_effect"):
        out[name] = np.full((n_draws, n), values.get(name, 0.0))
    return out


# ---------------------------------------------------------------------------
# continuous-case products
# ---------------------------------------------------------------------------

def test_continuous_effects_product_of_constants():
    fit = synthetic_fit(np.random.default_rng(0),
                        functions=constant_functions(
                            4, 7, mediator_effect=0.5, mediator_slope=0.2))
    eff = conditional_effects_continuous(fit)
    assert_allclose(eff.indirect, 0.1, rtol=1e-12)


def test_continuous_effects_annihilation():
    rng = np.random.default_rng(1)
    functions = constant_functions(4, 7, mediator_effect=3.0)
    functions["mediator_slope"][:] = 0.0
    functions["treat_effect"] = rng.standard_normal((4, 7))
    fit = synthetic_fit(rng, functions=functions)
    eff = conditional_effects_continuous(fit)
    assert np.all(eff.indirect == 0.0)


def test_continuous_effects_match_recomputed_product():
    rng = np.random.default_rng(2)
    fit = synthetic_fit(rng, y_sd=2.5, m_sd=0.7)
    eff = conditional_effects_continuous(fit)
    fn = fit.training_functions()
    assert np.array_equal(eff.indirect,
                          fn["mediator_effect"] * fn["mediator_slope"])
    assert np.array_equal(eff.direct, fn["treat_effect"])
    assert np.max(np.abs(eff.total - (eff.direct + eff.indirect))) == 0.0


def test_continuous_effects_kind_mismatch():
    fit = synthetic_fit(np.random.default_rng(3), mediator_kind="binary")
    with pytest.raises(ValueError):
        conditional_effects_continuous(fit)


def test_sign_invariance_of_indirect_effect():
    rng = np.random.default_rng(4)
    functions = {k: rng.standard_normal((5, 8)) for k in
                 ("prognostic", "treat_effect", "mediator_slope",
                  "mediator_baseline", "mediator_effect")}
    flipped = dict(functions)
    flipped["mediator_slope"] = -functions["mediator_slope"]
    flipped["mediator_effect"] = -functions["mediator_effect"]
    f1 = synthetic_fit(rng, functions=functions)
    f2 = synthetic_fit(rng, functions=flipped)
    assert np.array_equal(conditional_effects_continuous(f1).indirect,
                          conditional_effects_continuous(f2).indirect)


# ---------------------------------------------------------------------------
# binary-mediator formula
# ---------------------------------------------------------------------------

def test_binary_mediator_zero_shift():
    fit = synthetic_fit(np.random.default_rng(5), mediator_kind="binary",
                        functions=constant_functions(
                            3, 5, mediator_slope=2.0, mediator_baseline=0.3))
    eff = conditional_effects_binary_mediator(fit)
    assert_allclose(eff.indirect, 0.0, atol=1e-15)


def test_binary_mediator_cdf_example():
    fit = synthetic_fit(np.random.default_rng(6), mediator_kind="binary",
                        functions=constant_functions(
                            3, 5, mediator_slope=0.2, mediator_baseline=0.0,
                            mediator_effect=1.6449))
    eff = conditional_effects_binary_mediator(fit)
    expected = 0.2 * (norm.cdf(1.6449) - 0.5)
    assert_allclose(eff.indirect, expected, rtol=1e-12)
    assert_allclose(eff.indirect, 0.0900, atol=1e-4)


def test_binary_mediator_cdf_limit():
    fit = synthetic_fit(np.random.default_rng(7), mediator_kind="binary",
                        functions=constant_functions(
                            3, 5, mediator_slope=0.4, mediator_baseline=0.0,
                            mediator_effect=40.0))
    eff = conditional_effects_binary_mediator(fit)
    assert_allclose(eff.indirect, 0.5 * 0.4, rtol=1e-9)


def test_binary_mediator_delta_bounded_by_slope():
    rng = np.random.default_rng(8)
    fit = synthetic_fit(rng, mediator_kind="binary")
    eff = conditional_effects_binary_mediator(fit)
    slope = fit.training_functions()["mediator_slope"]
    assert np.all(np.abs(eff.indirect) <= np.abs(slope) + 1e-15)


# ---------------------------------------------------------------------------
# binary-outcome counterfactual means
# ---------------------------------------------------------------------------

def test_counterfactual_mean_decoupled_mediator():
    for a_prime in (0, 1):
        val = counterfactual_mean_binary_outcome(
            0.2, 0.3, 0.0, -5.0, 2.0, 3.0, a=1, a_prime=a_prime)
        assert_allclose(val, norm.cdf(0.5), rtol=1e-12)


def test_counterfactual_mean_symmetric_zero():
    val = counterfactual_mean_binary_outcome(
        0.0, 0.0, 1.0, 0.0, 0.0, np.sqrt(3.0), a=1, a_prime=1)
    assert_allclose(val, 0.5, rtol=1e-12)


def test_counterfactual_mean_hand_value_and_monte_carlo():
    val = counterfactual_mean_binary_outcome(
        0.2, 0.3, 0.5, -0.1, 0.4, 1.0, a=1, a_prime=1)
    assert_allclose(val, norm.cdf(0.65 / np.sqrt(1.25)), rtol=1e-12)
    assert_allclose(val, 0.7195, atol=1e-4)
    rng = np.random.default_rng(9)
    n = 10 ** 6
    m_draw = 0.3 + 1.0 * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    mc = np.mean(eps <= 0.2 + 0.3 + 0.5 * m_draw)
    assert abs(val - mc) < 3.0 * np.sqrt(val * (1 - val) / n)


def test_counterfactual_mean_rejects_negative_sigma():
    with pytest.raises(ValueError):
        counterfactual_mean_binary_outcome(0, 0, 1, 0, 0, -1.0, 1, 1)


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(-2, 2), bump=st.floats(0.01, 2), d=st.floats(0.05, 2),
       tau=st.floats(-1, 1), sm=st.floats(0, 2))
def test_counterfactual_mean_monotonicity(mu, bump, d, tau, sm):
    base = counterfactual_mean_binary_outcome(mu, 0.0, d, 0.0, tau, sm, 1, 0)
    higher = counterfactual_mean_binary_outcome(mu + bump, 0.0, d, 0.0, tau,
                                                sm, 1, 0)
    assert higher >= base
    # for positive d, increasing the a'-indexed mediator shift raises the mean
    up = counterfactual_mean_binary_outcome(mu, 0.0, d, 0.0, abs(tau) + bump,
                                            sm, 1, 1)
    down = counterfactual_mean_binary_outcome(mu, 0.0, d, 0.0, abs(tau), sm, 1, 1)
    assert up >= down


def test_binary_outcome_dispatch_total_decomposition():
    rng = np.random.default_rng(10)
    fit = synthetic_fit(rng, outcome_kind="binary")
    eff = conditional_effects(fit)
    assert np.max(np.abs(eff.total - (eff.direct + eff.indirect))) < 1e-12
    assert np.all(np.abs(eff.total) <= 1.0)
    fit_bb = synthetic_fit(rng, outcome_kind="binary", mediator_kind="binary")
    eff_bb = conditional_effects(fit_bb)
    assert np.max(np.abs(eff_bb.total - (eff_bb.direct + eff_bb.indirect))) < 1e-12


# ---------------------------------------------------------------------------
# averaging
# ---------------------------------------------------------------------------

def test_bb_average_single_observation():
    rng = np.random.default_rng(11)
    eff = EffectDraws(np.array([[1.5], [2.5]]), np.array([[0.5], [0.25]]),
                      np.array([[2.0], [2.75]]))
    avg = bayesian_bootstrap_averages(eff, rng)
    assert np.array_equal(avg.direct, np.array([1.5, 2.5]))
    assert np.array_equal(avg.weights.omega, np.ones((2, 1)))


def test_bb_average_constant_effect():
    rng = np.random.default_rng(12)
    eff = EffectDraws(np.full((4, 9), 0.3), np.full((4, 9), -0.1),
                      np.full((4, 9), 0.2))
    avg = bayesian_bootstrap_averages(eff, rng)
    assert_allclose(avg.indirect, -0.1, rtol=1e-12)


def test_bb_average_symmetry_matches_equal_weights():
    rng = np.random.default_rng(13)
    values = rng.standard_normal(12)
    n_draws = 100_000
    eff = EffectDraws(np.tile(values, (n_draws, 1)),
                      np.tile(values, (n_draws, 1)),
                      np.tile(2 * values, (n_draws, 1)))
    avg = bayesian_bootstrap_averages(eff, rng)
    # E over weight draws of the weighted mean equals the plain mean
    se = values.std() / np.sqrt(12 + 1) / np.sqrt(n_draws)
    assert abs(avg.indirect.mean() - values.mean()) < 3.0 * se


def test_bb_weights_validated():
    with pytest.raises(ValueError):
        BBWeights(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        BBWeights(np.array([[1.2, -0.2]]))


def test_equal_weight_average():
    eff = EffectDraws(np.array([[1.0, 3.0]]), np.array([[0.0, 1.0]]),
                      np.array([[1.0, 4.0]]))
    avg = equal_weight_averages(eff)
    assert_allclose(avg.direct, [2.0])
    assert_allclose(avg.indirect, [0.5])


# ---------------------------------------------------------------------------
# subgroup averages
# ---------------------------------------------------------------------------

def test_subgroup_full_group_equals_average():
    rng = np.random.default_rng(14)
    mat = rng.standard_normal((5, 8))
    eff = EffectDraws(mat, mat, 2 * mat)
    groups = subgroup_averages(eff, {"all": np.ones(8, dtype=bool)})
    assert_allclose(groups["all"].indirect, mat.mean(axis=1), rtol=1e-12)


def test_subgroup_piecewise_constants():
    labels = np.array([0, 0, 1, 1])
    ind = np.array([[1.0, 1.0, 5.0, 5.0]])
    eff = EffectDraws(ind, ind, 2 * ind)
    groups = subgroup_averages(eff, labels)
    assert_allclose(groups["0"].indirect, [1.0])
    assert_allclose(groups["1"].indirect, [5.0])


def test_subgroup_random_matches_recomputation():
    rng = np.random.default_rng(15)
    mat = rng.standard_normal((6, 20))
    eff = EffectDraws(mat, -mat, 0 * mat)
    labels = rng.integers(0, 3, size=20)
    groups = subgroup_averages(eff, labels)
    for g in range(3):
        mask = labels == g
        assert_allclose(groups[str(g)].indirect, (-mat)[:, mask].mean(axis=1),
                        rtol=1e-12)


def test_subgroup_empty_group_errors():
    eff = EffectDraws(np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        subgroup_averages(eff, {"none": np.zeros(4, dtype=bool)})
