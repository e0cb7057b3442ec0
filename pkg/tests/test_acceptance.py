"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The three simulation-based criteria run 100-replication desk-scale
studies and dominate the suite's runtime (several minutes each on two
workers); everything else completes in seconds.  Run with ``pytest -v
tests/test_acceptance.py`` (add ``-s`` to stream the PASS lines).
"""

import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from bcmforest.effects import counterfactual_mean_binary_outcome
from bcmforest.model import BCMFConfig, CleverConfig, ForestConfig, fit_bcmf
from bcmforest.simulate import (
    DESK_SCALE_LABEL,
    StudySpec,
    generate_dataset,
    make_truth,
    run_study,
)
from bcmforest.summaries import (
    AdditiveSummaryConfig,
    CartSummaryConfig,
    cart_projection,
    posterior_summary_distribution,
    summary_r_squared,
)
from bcmforest.trees import (
    ForestSampler,
    Tree,
    TreePrior,
    leaf_log_marginal,
    leaf_scale,
    sample_noise_var,
    sample_tree_from_prior,
)
from bcmforest.trees import NoisePrior, _update_tree


def report(num, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 1: conjugate marginal vs adaptive quadrature
# ---------------------------------------------------------------------------

def test_criterion_01_conjugate_oracle_equivalence():
    rng = np.random.default_rng(1001)
    cases = []
    for i in range(100):
        n = int(rng.integers(1, 8))
        r = rng.standard_normal(n) * rng.uniform(0.3, 2.0)
        regime = i % 3
        if regime == 0:
            s = np.zeros(n)
            s[: max(0, n - 2)] = rng.uniform(0.0, 1.5, size=max(0, n - 2))
        elif regime == 1:
            s = rng.uniform(0.05, 0.95, size=n)
        else:
            s = rng.uniform(1.0, 3.0, size=n)
        cases.append((r, s, rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)))

    start = time.perf_counter()
    worst = 0.0
    for r, s, noise_var, leaf_var in cases:
        core = leaf_log_marginal(np.sum(s * r), np.sum(s * s), r.size,
                                 noise_var, leaf_var)
        closed_form = core - np.sum(r * r) / (2.0 * noise_var)

        def integrand(mu, r=r, s=s, nv=noise_var, lv=leaf_var):
            return np.exp(
                np.sum(norm.logpdf(r, loc=s * mu, scale=np.sqrt(nv)))
                + norm.logpdf(mu, scale=np.sqrt(lv)))

        val, _ = quad(integrand, -np.inf, np.inf, limit=200)
        worst = max(worst, abs(closed_form - np.log(val)) / abs(np.log(val)))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-8 and elapsed < 1.0,
           f"max relative error {worst:.2e} over 100 inputs in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: prior tree frequencies
# ---------------------------------------------------------------------------

def test_criterion_02_prior_split_frequencies():
    rng = np.random.default_rng(1002)
    X = rng.uniform(size=(500, 3))
    prior = TreePrior(0.95, 2.0)
    n_draws = 10_000
    root_splits = 0
    depth1_nodes = 0
    depth1_splits = 0
    for _ in range(n_draws):
        tree = sample_tree_from_prior(X, prior, rng)
        if tree.is_stump():
            continue
        root_splits += 1
        for child in (tree.left[0], tree.right[0]):
            depth1_nodes += 1
            if tree.var[child] >= 0:
                depth1_splits += 1
    root_frac = root_splits / n_draws
    root_tol = 3.0 * np.sqrt(0.95 * 0.05 / n_draws)
    d1_frac = depth1_splits / depth1_nodes
    d1_target = 0.95 / 4.0
    d1_tol = 3.0 * np.sqrt(d1_target * (1 - d1_target) / depth1_nodes)
    ok = abs(root_frac - 0.95) < root_tol and abs(d1_frac - d1_target) < d1_tol
    report(2, ok,
           f"root split {root_frac:.4f} (target 0.95 +/- {root_tol:.4f}); "
           f"depth-1 split {d1_frac:.4f} (target {d1_target:.4f} +/- {d1_tol:.4f})")


# ---------------------------------------------------------------------------
# criterion 3: exact posterior on the enumerable space
# ---------------------------------------------------------------------------

def test_criterion_03_exact_posterior_mh():
    X = np.array([[0.0], [1.0]])
    XT = np.ascontiguousarray(X.T)
    y = np.array([0.4, -0.3])
    s = np.ones(2)
    noise_var = 1.0
    prior = TreePrior(0.7, 1.5)
    leaf_var = leaf_scale(2.0, 1) ** 2

    def llm(sr, s2, cnt):
        return leaf_log_marginal(sr, s2, cnt, noise_var, leaf_var)

    log_w_stump = np.log1p(-prior.split_prob(0)) + llm(y.sum(), 2.0, 2)
    log_w_split = (np.log(prior.split_prob(0))
                   + 2.0 * np.log1p(-prior.split_prob(1))
                   + llm(y[0], 1.0, 1) + llm(y[1], 1.0, 1))
    exact = 1.0 / (1.0 + np.exp(log_w_stump - log_w_split))

    rng = np.random.default_rng(1003)
    tree = Tree(1)
    leaf_idx = np.zeros(2, dtype=np.int32)
    iters = 10 ** 6
    states = np.empty(iters, dtype=np.int8)
    start = time.perf_counter()
    for i in range(iters):
        _update_tree(tree, XT, y, s, noise_var, leaf_var, prior, rng, leaf_idx)
        states[i] = 0 if tree.is_stump() else 1
    elapsed = time.perf_counter() - start

    kept = states[10_000:].astype(np.float64)
    frac = kept.mean()
    n_batches = 1000
    batch = kept[: (kept.size // n_batches) * n_batches]
    means = batch.reshape(n_batches, -1).mean(axis=1)
    mcse = means.std(ddof=1) / np.sqrt(n_batches)
    ok = abs(frac - exact) < 3.0 * mcse and elapsed < 120.0
    report(3, ok,
           f"split frequency {frac:.5f} vs exact {exact:.5f} "
           f"(3*MCSE {3 * mcse:.5f}), {elapsed:.0f}s for 1e6 iterations")


# ---------------------------------------------------------------------------
# criterion 4: probit counterfactual mean vs Monte Carlo
# ---------------------------------------------------------------------------

def test_criterion_04_probit_formula_monte_carlo():
    rng = np.random.default_rng(1004)
    n_mc = 10 ** 6
    worst = 0.0
    for _ in range(20):
        mu = rng.uniform(-1.0, 1.0)
        zeta = rng.uniform(-0.6, 0.6)
        d = rng.uniform(-1.0, 1.0)
        mu_m = rng.uniform(-1.0, 1.0)
        tau_m = rng.uniform(-0.6, 0.6)
        sigma_m = rng.uniform(0.0, 2.0)
        a = int(rng.integers(2))
        a_prime = int(rng.integers(2))
        closed = counterfactual_mean_binary_outcome(
            mu, zeta, d, mu_m, tau_m, sigma_m, a, a_prime)
        m_draw = mu_m + a_prime * tau_m + sigma_m * rng.standard_normal(n_mc)
        eps = rng.standard_normal(n_mc)
        mc = np.mean(eps <= mu + a * zeta + d * m_draw)
        se = max(np.sqrt(mc * (1.0 - mc) / n_mc), 1e-6)
        worst = max(worst, abs(closed - mc) / se)
    report(4, worst < 3.0, f"max |closed - MC| = {worst:.2f} MC standard errors "
                           f"over 20 settings")


# ---------------------------------------------------------------------------
# criterion 5: heteroskedastic degeneracy at unit scales
# ---------------------------------------------------------------------------

def test_criterion_05_unit_scale_degeneracy():
    def run(scales):
        rng = np.random.default_rng(1005)
        X = np.random.default_rng(7).uniform(size=(300, 4))
        resp = np.where(X[:, 0] > 0.5, 1.0, -1.0) \
            + 0.4 * np.random.default_rng(8).standard_normal(300)
        sampler = ForestSampler(X, 20, TreePrior(), leaf_scale(2.0, 20))
        prior = NoisePrior(3.0, 0.2)
        sig2 = 1.0
        draws = []
        for _ in range(80):
            sampler.sweep(resp, scales, sig2, rng)
            sig2 = sample_noise_var(resp, scales, sampler.full_fit, prior, rng)
            draws.append(sampler.full_fit.copy())
        return np.asarray(draws)

    mediator_all_ones = np.ones(300)   # the coefficient-on-mediator update
    plain_unit_scales = np.ones(300)   # the homoskedastic update
    diff = np.max(np.abs(run(mediator_all_ones) - run(plain_unit_scales)))
    report(5, diff <= 1e-12, f"max draw-stream difference {diff:.1e}")


# ---------------------------------------------------------------------------
# criterion 10: summary correctness (cheap, run before the studies)
# ---------------------------------------------------------------------------

def test_criterion_10_summary_correctness():
    hand = (summary_r_squared(np.array([1.0, 2, 3, 4]),
                              np.array([1.0, 2, 3, 5])) == 0.8
            and summary_r_squared(np.zeros(3), np.zeros(3)) == 0.0)

    rng = np.random.default_rng(1010)
    n = 300
    X = rng.uniform(-1, 1, size=(n, 4))
    step = np.where(X[:, 1] <= 0.2, 1.0, 0.0)
    cart = cart_projection(step, X, CartSummaryConfig(max_depth=1, min_leaf=20))
    cart_ok = (cart.surrogate.root.var == 1 and cart.r_squared >= 0.99)

    surface = 1.5 * X[:, 0] + np.sin(3 * X[:, 2])
    draws = surface + 0.02 * rng.standard_normal((8, n))
    dist = posterior_summary_distribution(
        draws, X, AdditiveSummaryConfig(penalty_lambda=0.01), "gam")
    gam_ok = bool(np.all(dist.r_squared >= 0.95))

    report(10, hand and cart_ok and gam_ok,
           f"hand R2 exact; CART split var 1 with R2 {cart.r_squared:.3f}; "
           f"GAM per-draw min R2 {dist.r_squared.min():.3f}")


# ---------------------------------------------------------------------------
# criterion 9: shrink-to-homogeneity
# ---------------------------------------------------------------------------

def test_criterion_09_shrink_to_homogeneity():
    rng = np.random.default_rng(1009)
    truth = make_truth("lsem", rng)  # mildly heterogeneous moderators
    data, _ = generate_dataset(truth, 500, np.random.default_rng(1109))

    def fit_with(treat_cfg):
        cfg = BCMFConfig(
            prognostic=ForestConfig(50, 0.95, 2.0, 2.0),
            treat_effect=treat_cfg,
            mediator_slope=ForestConfig(10, 0.5, 2.0, 2.0),
            mediator_baseline=ForestConfig(50, 0.95, 2.0, 2.0),
            mediator_effect=ForestConfig(10, 0.5, 2.0, 2.0),
            clever=CleverConfig(m=25, burn_in=150, n_samples=150),
            burn_in=300, n_samples=300, n_chains=1, seed=77,
            keep_forests=False)
        fit = fit_bcmf(data, cfg)
        draws = fit.training_functions()["treat_effect"]
        return float(np.mean(np.std(draws, axis=1)))

    narrow = fit_with(ForestConfig(5, 0.05, 2.0, 2.0))
    wide = fit_with(ForestConfig(200, 0.95, 2.0, 2.0))
    report(9, narrow < wide,
           f"within-draw sd of the direct-effect surface: "
           f"{narrow:.4f} (alpha=0.05, m=5) vs {wide:.4f} (alpha=0.95, m=200)")


# ---------------------------------------------------------------------------
# criteria 6-8 + 11: desk-scale studies
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def null_study():
    spec = StudySpec(truth_kind="lsem", null_effects=True, methods=("bcmf",),
                     n_train=500, n_test=500, replications=100, seed=601,
                     workers=2)
    start = time.perf_counter()
    out = run_study(spec)
    out.elapsed = time.perf_counter() - start
    return out


@pytest.fixture(scope="module")
def homogeneous_study():
    spec = StudySpec(truth_kind="lsem", homogeneous=True,
                     methods=("bcmf", "lsem"), n_train=500, n_test=500,
                     replications=100, seed=602, workers=2)
    return run_study(spec)


@pytest.fixture(scope="module")
def sparse_study():
    spec = StudySpec(truth_kind="sparse-linear", methods=("bcmf", "lsem"),
                     n_train=500, n_test=500, replications=100, seed=603,
                     workers=2)
    return run_study(spec)


def test_criterion_06_null_calibration(null_study):
    assert not null_study.failures, null_study.failures
    counts = {}
    for target in ("direct_avg", "indirect_avg"):
        recs = [r for r in null_study.records if r["target"] == target]
        counts[target] = sum(r["lo"] <= 0.0 <= r["hi"] for r in recs)
    ok = all(c >= 90 for c in counts.values()) and null_study.elapsed < 1800
    report(6, ok,
           f"zero covered in {counts['direct_avg']}/100 (direct) and "
           f"{counts['indirect_avg']}/100 (indirect) replications; "
           f"{null_study.elapsed / 60:.1f} min")


def test_criterion_07_homogeneous_truth_recovery(homogeneous_study):
    assert not homogeneous_study.failures
    agg = {(a["method"], a["target"]): a for a in homogeneous_study.aggregates}
    cov = agg[("bcmf", "indirect_row")]["coverage"]
    bcmf_len = agg[("bcmf", "indirect_row")]["length"]
    lsem_len = agg[("lsem", "indirect_row")]["length"]
    ok = 0.90 <= cov <= 0.99 and bcmf_len < lsem_len
    report(7, ok,
           f"per-row indirect coverage {cov:.3f} (need [0.90, 0.99]); "
           f"mean length {bcmf_len:.3f} vs linear baseline {lsem_len:.3f}")


def test_criterion_08_regularization_advantage(sparse_study):
    assert not sparse_study.failures
    reps = sorted({r["rep"] for r in sparse_study.records})
    wins = 0
    for rep in reps:
        rmse = {}
        for method in ("bcmf", "lsem"):
            errs = np.array([
                r["estimate"] - r["truth"] for r in sparse_study.records
                if r["rep"] == rep and r["method"] == method
                and r["target"] == "indirect_row"
            ])
            rmse[method] = np.sqrt(np.mean(errs ** 2))
        wins += rmse["bcmf"] <= rmse["lsem"]
    ok = wins >= 0.8 * len(reps)
    report(8, ok, f"tree-ensemble RMSE <= linear-baseline RMSE in "
                  f"{wins}/{len(reps)} replications (need >= {int(0.8 * len(reps))})")


def test_criterion_11_desk_scale_labelling(null_study):
    ok = (null_study.label == DESK_SCALE_LABEL
          and "desk-scale" in null_study.label
          and null_study.spec_echo["replications"] == 100)
    report(11, ok, "reports are explicitly labelled desk-scale analogues; "
                   "paper-scale tables are out of scope by design")
