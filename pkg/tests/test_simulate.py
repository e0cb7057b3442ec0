import numpy as np
import pytest
from numpy.testing import assert_allclose

from bcmforest.model import BCMFConfig, CleverConfig, ForestConfig
from bcmforest.simulate import (
    FixedGroup,
    StudySpec,
    aggregate_records,
    fit_lsem,
    generate_dataset,
    lsem_residual_bootstrap,
    make_truth,
    run_study,
    score_rows,
)


def tiny_bcmf_config():
    return BCMFConfig(
        prognostic=ForestConfig(15, 0.95, 2.0, 2.0),
        treat_effect=ForestConfig(5, 0.5, 2.0, 2.0),
        mediator_slope=ForestConfig(5, 0.5, 2.0, 2.0),
        mediator_baseline=ForestConfig(15, 0.95, 2.0, 2.0),
        mediator_effect=ForestConfig(5, 0.5, 2.0, 2.0),
        clever=CleverConfig(m=10, burn_in=30, n_samples=30),
        burn_in=40, n_samples=40, n_chains=1,
    )


def tiny_spec(**overrides):
    base = dict(
        truth_kind="lsem",
        n_train=150, n_test=80, replications=2, seed=5,
        bcmf=tiny_bcmf_config(), bootstrap_b=100,
        fixed_groups=(FixedGroup("x0_low", ((0, "le", 0.5),)),
                      FixedGroup("x0_high", ((0, "gt", 0.5),))),
        dynamic_group_depth=1,
    )
    base.update(overrides)
    return StudySpec(**base)


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------

def test_noiseless_generation_reproduces_formulas():
    rng = np.random.default_rng(0)
    truth = make_truth("lsem", rng)
    truth.sigma = 0.0
    truth.sigma_m = 0.0
    data, effects = generate_dataset(truth, 100, np.random.default_rng(1))
    X = data.x
    m_expected = truth.mediator_baseline(X) + data.a * truth.mediator_effect(X)
    y_expected = (truth.prognostic(X) + data.a * truth.direct_effect(X)
                  + data.m * truth.mediator_slope(X))
    assert np.array_equal(data.m, m_expected)
    assert np.array_equal(data.y, y_expected)
    assert np.array_equal(effects.direct, truth.direct_effect(X))


def test_null_truth_has_zero_indirect_effects():
    rng = np.random.default_rng(2)
    truth = make_truth("lsem", rng, null=True)
    data, effects = generate_dataset(truth, 200, np.random.default_rng(3))
    assert np.all(effects.indirect == 0.0)
    assert np.all(effects.direct == 0.0)


def test_generated_noise_scale():
    rng = np.random.default_rng(4)
    truth = make_truth("lsem", rng)
    data, _ = generate_dataset(truth, 10_000, np.random.default_rng(5))
    resid = data.y - (truth.prognostic(data.x)
                      + data.a * truth.direct_effect(data.x)
                      + data.m * truth.mediator_slope(data.x))
    assert abs(resid.std() - truth.sigma) / truth.sigma < 0.05


def test_sparse_truth_zeroes_moderators():
    rng = np.random.default_rng(6)
    truth = make_truth("sparse-linear", rng, zero_frac=0.8)
    zeroed = (np.sum(truth.gy == 0) + np.sum(truth.gm == 0)
              + np.sum(truth.xi == 0))
    assert zeroed >= 0.5 * 3 * truth.sampler.p


def test_bcmf_like_truth_evaluates():
    rng = np.random.default_rng(7)
    truth = make_truth("bcmf-like", rng)
    X = truth.sample_x(50, rng)
    for fn in (truth.prognostic, truth.direct_effect, truth.indirect_effect):
        vals = fn(X)
        assert vals.shape == (50,)
        assert np.all(np.isfinite(vals))


def test_generate_requires_minimum_n():
    rng = np.random.default_rng(8)
    truth = make_truth("lsem", rng)
    with pytest.raises(ValueError):
        generate_dataset(truth, 10, rng)


# ---------------------------------------------------------------------------
# the linear baseline
# ---------------------------------------------------------------------------

def test_lsem_noiseless_recovery():
    # A fully noiseless system makes the mediator an exact linear function
    # of the outcome design, so recovery is checked per equation: the
    # outcome with mediator noise present, the mediator with sigma_m = 0.
    rng = np.random.default_rng(9)
    truth = make_truth("lsem", rng)
    truth.sigma = 0.0
    data, _ = generate_dataset(truth, 300, np.random.default_rng(10))
    fit = fit_lsem(data)
    assert_allclose(fit.g0y, truth.g0y, atol=1e-8)
    assert_allclose(fit.gy, truth.gy, atol=1e-8)
    assert_allclose(fit.xi0, truth.xi0, atol=1e-8)
    assert_allclose(fit.xi, truth.xi, atol=1e-8)
    assert not fit.ridged

    truth.sigma = 0.7
    truth.sigma_m = 0.0
    data, _ = generate_dataset(truth, 300, np.random.default_rng(10))
    fit = fit_lsem(data)
    assert_allclose(fit.g0m, truth.g0m, atol=1e-8)
    assert_allclose(fit.gm, truth.gm, atol=1e-8)


def test_lsem_intercept_only_effects():
    rng = np.random.default_rng(11)
    truth = make_truth("lsem", rng, homogeneous=True)
    truth.by[:] = 0.0
    truth.bm[:] = 0.0
    truth.sigma = 0.0
    data, _ = generate_dataset(truth, 200, np.random.default_rng(12))
    fit = fit_lsem(data)
    est = fit.direct_effect(data.x)
    assert np.ptp(est) < 1e-8
    assert_allclose(est, truth.g0y, atol=1e-8)


def test_lsem_effects_match_symbolic_product():
    rng = np.random.default_rng(13)
    truth = make_truth("lsem", rng)
    data, _ = generate_dataset(truth, 300, np.random.default_rng(14))
    fit = fit_lsem(data)
    X = data.x
    expected = (fit.g0m + X @ fit.gm) * (fit.xi0 + X @ fit.xi)
    assert np.array_equal(fit.indirect_effect(X), expected)


def test_lsem_rank_deficiency_flags_ridge():
    rng = np.random.default_rng(15)
    truth = make_truth("lsem", rng)
    data, _ = generate_dataset(truth, 200, np.random.default_rng(16))
    data.x[:, 1] = data.x[:, 0]  # exact collinearity
    fit = fit_lsem(data)
    assert fit.ridged


def test_bootstrap_noiseless_zero_width():
    # Residuals of an interpolating fit are ~1e-13, not exactly zero, and
    # the fully-noiseless system is rank-deficient (the mediator is an
    # exact function of the outcome design), so the ridge fallback
    # amplifies them by its condition number; widths are zero up to that.
    rng = np.random.default_rng(17)
    truth = make_truth("lsem", rng)
    truth.sigma = 0.0
    truth.sigma_m = 0.0
    data, _ = generate_dataset(truth, 200, np.random.default_rng(18))
    boot = lsem_residual_bootstrap(data, 100, np.random.default_rng(19))
    assert np.max(boot.direct.max(axis=0) - boot.direct.min(axis=0)) < 1e-5
    assert np.max(boot.indirect.max(axis=0) - boot.indirect.min(axis=0)) < 1e-5


def test_bootstrap_intervals_contain_point_estimates():
    rng = np.random.default_rng(20)
    truth = make_truth("lsem", rng)
    data, _ = generate_dataset(truth, 300, np.random.default_rng(21))
    boot = lsem_residual_bootstrap(data, 200, np.random.default_rng(22))
    for draws, base in ((boot.direct, boot.base.direct_effect(data.x)),
                        (boot.indirect, boot.base.indirect_effect(data.x))):
        lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
        frac = np.mean((lo <= base) & (base <= hi))
        assert frac >= 0.99


def test_bootstrap_requires_minimum_b():
    rng = np.random.default_rng(23)
    truth = make_truth("lsem", rng)
    data, _ = generate_dataset(truth, 100, np.random.default_rng(24))
    with pytest.raises(ValueError):
        lsem_residual_bootstrap(data, 50, rng)


def test_bootstrap_average_effect_calibration_small():
    # reduced-size calibration: 40 replications of a homogeneous truth
    rng = np.random.default_rng(25)
    truth = make_truth("lsem", rng, homogeneous=True)
    covered = 0
    reps = 40
    for r in range(reps):
        data, effects = generate_dataset(
            truth, 300, np.random.default_rng((26, r)))
        boot = lsem_residual_bootstrap(data, 150,
                                       np.random.default_rng((27, r)))
        avg = boot.indirect.mean(axis=1)
        lo, hi = np.quantile(avg, [0.025, 0.975])
        covered += lo <= effects.indirect.mean() <= hi
    assert covered / reps >= 0.80


# ---------------------------------------------------------------------------
# scoring and aggregation
# ---------------------------------------------------------------------------

def test_scorer_identity_full_coverage():
    recs = score_rows(0, "m", "t", np.zeros(5), -np.ones(5), np.ones(5),
                      np.zeros(5))
    agg = aggregate_records(recs, setting="demo")
    assert agg[0]["coverage"] == 1.0
    assert agg[0]["length"] == 2.0
    assert list(agg[0])[:3] == ["setting", "method", "target"]


def test_aggregate_matches_independent_recomputation():
    rng = np.random.default_rng(28)
    records = []
    for rep in range(4):
        est = rng.standard_normal(30)
        truth = rng.standard_normal(30)
        records += score_rows(rep, "m", "row", est, est - 1.0, est + 1.0, truth)
    agg = aggregate_records(records)[0]
    err = np.array([r["estimate"] - r["truth"] for r in records])
    assert abs(agg["rmse"] - np.sqrt(np.mean(err ** 2))) < 1e-12
    assert abs(agg["bias"] - abs(np.mean(err))) < 1e-12
    assert abs(agg["coverage"]
               - np.mean([r["covered"] for r in records])) < 1e-12
    assert abs(agg["length"] - np.mean([r["length"] for r in records])) < 1e-12
    assert agg["rmse"] >= agg["bias"]


def test_run_study_smoke_and_determinism():
    spec = tiny_spec()
    report = run_study(spec)
    assert report.label.startswith("desk-scale analogue")
    assert not report.failures
    methods = {r["method"] for r in report.records}
    assert methods == {"bcmf", "lsem"}
    targets = {r["target"] for r in report.records}
    assert {"direct_row", "indirect_row", "direct_avg", "indirect_avg"} <= targets
    assert any(t.startswith("indirect_sub_fixed:") for t in targets)
    assert any(t.startswith("indirect_sub_dynamic:") for t in targets)
    # per-row records cover every test row in every replication
    row_recs = [r for r in report.records
                if r["method"] == "bcmf" and r["target"] == "indirect_row"]
    assert len(row_recs) == spec.replications * spec.n_test
    for agg in report.aggregates:
        assert agg["rmse"] >= agg["bias"] - 1e-12
        assert 0.0 <= agg["coverage"] <= 1.0
    # rerunning the identical spec reproduces every record exactly
    report2 = run_study(spec)
    assert report.records == report2.records
    assert report.aggregates == report2.aggregates
    assert report.heldout == report2.heldout


def test_run_study_parallel_matches_serial():
    spec = tiny_spec(methods=("lsem",), replications=3)
    serial = run_study(spec)
    par = run_study(tiny_spec(methods=("lsem",), replications=3, workers=2))
    assert serial.records == par.records
    assert serial.aggregates == par.aggregates


def test_fixed_group_membership():
    g = FixedGroup("g", ((0, "le", 0.5), (1, "gt", 0.0)))
    X = np.array([[0.4, 1.0], [0.6, 1.0], [0.4, -1.0]])
    assert g.membership(X).tolist() == [True, False, False]


def test_run_study_records_per_replication_failures(monkeypatch):
    import bcmforest.simulate as sim

    real = sim._run_replication

    def flaky(spec, truth, X_train, X_test, rep):
        if rep == 1:
            raise RuntimeError("synthetic failure")
        return real(spec, truth, X_train, X_test, rep)

    monkeypatch.setattr(sim, "_run_replication", flaky)
    report = run_study(tiny_spec(methods=("lsem",), replications=3))
    assert report.failures == [{"rep": 1,
                                "error": "RuntimeError: synthetic failure"}]
    reps_present = {r["rep"] for r in report.records}
    assert reps_present == {0, 2}
