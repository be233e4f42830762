import statistics
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from coxnnmi.errors import DegenerateScore, ImputationFailed
from coxnnmi.glm import GlmFit
from coxnnmi.nnmi import (
    ImputationConfig,
    ScorePair,
    fit_score_models,
    impute_once,
    imputing_sets,
    nn_distance,
    nnmi_estimate,
    rubin_pool,
    score_original,
    select_imputing_set,
)
from coxnnmi.survival_core import (
    StepFunction,
    SurvivalData,
    SurvivalRecord,
    fit_cox,
    nelson_aalen,
)


def glm(coef, link="logit"):
    coef = np.asarray(coef, dtype=float)
    return GlmFit(coef=coef, link=link, converged=True, covariance=np.eye(coef.size))


def bootstrap(data, seed):
    return data.take(np.random.default_rng(seed).integers(0, len(data), len(data)))


# ------------------------------------------------------------------ config


def test_config_validation():
    with pytest.raises(ValueError):
        ImputationConfig(w1=0.5, w2=0.4)
    with pytest.raises(ValueError):
        ImputationConfig(w1=1.2, w2=-0.2)
    with pytest.raises(ValueError):
        ImputationConfig(nn=0)
    with pytest.raises(ValueError):
        ImputationConfig(m=1)


# ------------------------------------------------------------------ scores


def test_standardized_scores_have_unit_moments(table4_400):
    observed, _ = table4_400
    boot = bootstrap(observed, 1)
    models = fit_score_models(boot, cumhaz=nelson_aalen(observed))
    s = models.scores(boot)
    assert np.allclose(s.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(s.std(axis=0, ddof=1), 1.0, atol=1e-10)


def test_duplicated_rows_get_identical_scores(table4_400):
    observed, _ = table4_400
    data = observed.take(np.r_[np.arange(50), [3, 3, 7]])
    models = fit_score_models(data)
    s = models.scores(data)
    assert np.array_equal(s[3], s[50]) and np.array_equal(s[3], s[51])
    assert np.array_equal(s[7], s[52])


def test_score_at_mean_covariates_is_zero():
    # continuous x with an identity-link model: the score is linear in (z, y)
    rng = np.random.default_rng(4)
    n = 300
    z = rng.uniform(size=n)
    y = rng.exponential(size=n)
    x = 1.0 + 2.0 * z + rng.normal(size=n)
    x[rng.uniform(size=n) < 0.4] = np.nan
    boot = SurvivalData(y, np.ones(n, dtype=int), z[:, None], x)
    spec = ("z", "y")
    models = fit_score_models(boot, spec, spec, x_link="identity")
    record = SurvivalRecord(float(y.mean()), 1, (float(z.mean()),))
    s = score_original(record, models.x_model, models.miss_model, models.standardizers,
                       cumhaz=models.cumhaz, spec_x=spec, spec_miss=spec)
    assert abs(s.s_x) < 1e-10 and abs(s.s_miss) < 1e-10


def test_score_original_hand_computed():
    cumhaz = StepFunction(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.4, 0.9]))
    x_model = glm([0.3, -1.2, 0.7, 2.5])  # (intercept, z, delta_t, h0)
    miss_model = glm([-1.0, 0.5, 2.0])  # (intercept, z, y)
    record = SurvivalRecord(2.5, 1, (0.6,))
    # raw x score 0.3 - 0.72 + 0.7 + 1.0 = 1.28; raw miss score -1 + 0.3 + 5 = 4.3
    s = score_original(record, x_model, miss_model, ((0.28, 0.3), (2.0, 4.0)), cumhaz=cumhaz)
    assert s.s_x == pytest.approx(0.5, abs=1e-12)
    assert s.s_miss == pytest.approx(1.0, abs=1e-12)


def test_zero_standardizer_raises():
    cumhaz = StepFunction(np.array([1.0]), np.array([0.5]))
    with pytest.raises(DegenerateScore):
        score_original(SurvivalRecord(1.0, 1, (0.2,)), glm([0, 0, 0, 0]), glm([0, 0, 0]),
                       ((0.0, 0.0), (0.0, 1.0)), cumhaz=cumhaz)


def test_constant_score_in_bootstrap_raises():
    # z and y identical in every row, so the missingness score cannot vary
    n = 20
    x = np.tile([0.0, 1.0, np.nan, np.nan], 5)
    data = SurvivalData(np.ones(n), np.ones(n, dtype=int), np.full((n, 1), 0.5), x)
    with pytest.raises(DegenerateScore):
        fit_score_models(data, ("z", "y"), ("z", "y"), x_link="logit")


# ------------------------------------------------------------------ distance


def test_distance_examples():
    a = ScorePair(1.0, 0.0)
    b = ScorePair(0.0, 0.0)
    assert nn_distance(a, a) == 0.0
    assert nn_distance(a, b) == pytest.approx(np.sqrt(0.8), abs=1e-15)
    c, d = ScorePair(0.3, 5.0), ScorePair(-0.4, -2.0)
    assert nn_distance(c, d, 1.0, 0.0) == pytest.approx(0.7, abs=1e-15)


def test_imputing_set_examples():
    target = ScorePair(0.0, 0.0)
    w = 1.0, 0.0
    donors = [(k, ScorePair(d, 9.0)) for k, d in zip([10, 11, 12, 13, 14], [0.3, 0.1, 0.5, 0.2, 0.4])]
    assert sorted(select_imputing_set(target, donors, nn=7, w1=w[0], w2=w[1])) == [10, 11, 12, 13, 14]
    assert select_imputing_set(target, donors, nn=2, w1=w[0], w2=w[1]) == [11, 13]
    tied = [(5, ScorePair(0.1, 0.0)), (2, ScorePair(-0.2, 0.0)), (4, ScorePair(0.2, 0.0))]
    assert select_imputing_set(target, tied, nn=2, w1=w[0], w2=w[1]) == [5, 2]


# ------------------------------------------------------------------ imputation


def test_no_missing_returns_input(table4_400):
    _, complete = table4_400
    out = impute_once(complete, ImputationConfig(), np.random.default_rng(0))
    assert out is complete


def test_donor_provenance_binary(table4_400):
    observed, _ = table4_400
    for seed in range(5):
        tr = impute_once(observed, ImputationConfig(), np.random.default_rng(seed),
                         return_trace=True)
        filled = tr.completed.x[tr.imputed_rows]
        assert set(np.unique(filled)) <= {0.0, 1.0}
        assert np.all(observed.delta_x[tr.donor_rows] == 1)
        assert np.array_equal(filled, observed.x[tr.donor_rows])
        assert np.all(np.isin(tr.donor_rows, tr.boot_index))
        # every draw lies in the imputing set of its row
        chosen_pos = [tr.boot_index[s] for s in tr.imputing_sets]
        assert all(d in pos for d, pos in zip(tr.donor_rows, chosen_pos))
        # observed values are untouched
        keep = observed.delta_x == 1
        assert np.array_equal(tr.completed.x[keep], observed.x[keep])


def test_donor_provenance_continuous():
    rng = np.random.default_rng(8)
    n = 200
    z = rng.uniform(size=n)
    x = z + rng.normal(scale=0.5, size=n)
    y = rng.exponential(size=n) / np.exp(0.5 * x)
    miss = rng.uniform(size=n) < 0.4
    data = SurvivalData(y, np.ones(n, dtype=int), z[:, None], np.where(miss, np.nan, x))
    tr = impute_once(data, ImputationConfig(), rng, return_trace=True)
    assert np.array_equal(tr.completed.x[tr.imputed_rows], data.x[tr.donor_rows])
    assert tr.models.x_model.link == "identity"


def test_exact_duplicate_is_nearest_donor(table4_400):
    observed, _ = table4_400
    j = int(np.flatnonzero(observed.delta_x == 0)[0])
    # append a complete case sharing (y, delta_t, z) with missing row j
    data = SurvivalData(np.r_[observed.y, observed.y[j]], np.r_[observed.delta_t, observed.delta_t[j]],
                        np.vstack([observed.z, observed.z[j]]), np.r_[observed.x, 1.0])
    k = len(data) - 1
    config = ImputationConfig(nn=1)
    cumhaz = nelson_aalen(data)
    hits = 0
    for seed in range(20):
        tr = impute_once(data, config, np.random.default_rng(seed), cumhaz=cumhaz,
                         return_trace=True)
        if k not in tr.boot_index:
            continue
        boot = data.take(tr.boot_index)
        s = tr.models.scores(boot)
        target = tr.models.scores(data.take([j]))[0]
        d = np.sqrt(0.8 * (s[:, 0] - target[0]) ** 2 + 0.2 * (s[:, 1] - target[1]) ** 2)
        donors = boot.delta_x == 1
        others = donors & (tr.boot_index != k)
        # unique minimum: the duplicate sits at rounding distance, everyone else is far
        assert d[tr.boot_index == k].max() < 1e-12 and d[others].min() > 1e-8
        row = int(np.flatnonzero(tr.imputed_rows == j)[0])
        assert tr.donor_rows[row] == k
        assert tr.completed.x[j] == 1.0
        hits += 1
    assert hits > 5


def test_redraw_and_sets_match_helper(table4_400):
    observed, _ = table4_400
    tr = impute_once(observed, ImputationConfig(), np.random.default_rng(3), return_trace=True)
    boot = observed.take(tr.boot_index)
    again = imputing_sets(observed.take(tr.imputed_rows), boot, tr.models, ImputationConfig())
    assert np.array_equal(again, tr.imputing_sets)


def restandardized(models, boot, **changes):
    out = replace(models, **changes)
    raw = out.raw_scores(boot)
    out.mean, out.sd = raw.mean(axis=0), raw.std(axis=0, ddof=1)
    return out


def test_affine_score_transform_leaves_sets_unchanged(table4_400):
    observed, _ = table4_400
    tr = impute_once(observed, ImputationConfig(), np.random.default_rng(11), return_trace=True)
    boot = observed.take(tr.boot_index)
    m = tr.models

    def affine(fit, a, b):
        coef = a * fit.coef
        coef[0] += b
        return replace(fit, coef=coef)

    moved = restandardized(m, boot, x_model=affine(m.x_model, 3.7, -2.1),
                           miss_model=affine(m.miss_model, 0.4, 5.0))
    targets = observed.take(tr.imputed_rows)
    config = ImputationConfig()
    assert np.array_equal(imputing_sets(targets, boot, moved, config),
                          imputing_sets(targets, boot, m, config))


def test_w2_zero_ignores_missingness_model(table4_400):
    observed, _ = table4_400
    config = ImputationConfig(w1=1.0, w2=0.0)
    tr = impute_once(observed, config, np.random.default_rng(12), return_trace=True)
    boot = observed.take(tr.boot_index)
    targets = observed.take(tr.imputed_rows)
    rng = np.random.default_rng(0)
    for _ in range(5):
        coef = tr.models.miss_model.coef + rng.normal(scale=2.0, size=3)
        moved = restandardized(tr.models, boot, miss_model=replace(tr.models.miss_model, coef=coef))
        assert np.array_equal(imputing_sets(targets, boot, moved, config), tr.imputing_sets)


def test_impute_once_deterministic(table4_400):
    observed, _ = table4_400
    a = impute_once(observed, ImputationConfig(), np.random.default_rng(21))
    b = impute_once(observed, ImputationConfig(), np.random.default_rng(21))
    assert np.array_equal(a.x, b.x)


# ------------------------------------------------------------------ pooling


def test_rubin_worked_example():
    out = rubin_pool([[1.0], [2.0], [3.0]], [[1.0], [1.0], [1.0]])
    assert out.beta[0] == 2.0
    assert out.between[0] == pytest.approx(1.0) and out.within[0] == pytest.approx(1.0)
    assert out.variance[0] == pytest.approx(1 + 4 / 3, abs=1e-12)
    assert out.df[0] == pytest.approx(2 * (1 + 3 / 4) ** 2, abs=1e-12)
    assert out.df[0] == pytest.approx(6.125)
    q = stats.t.ppf(0.975, 6.125)
    assert out.ci_upper[0] == pytest.approx(2 + q * np.sqrt(7 / 3), abs=1e-12)


def test_rubin_degenerate_between():
    out = rubin_pool([[0.7, 1.0], [0.7, 2.0]], [[0.3, 1.0], [0.3, 1.0]])
    assert out.beta[0] == 0.7 and out.variance[0] == pytest.approx(0.3)
    assert out.degenerate_b[0] and not out.degenerate_b[1]
    assert np.isinf(out.df[0])
    assert out.ci_upper[0] == pytest.approx(0.7 + stats.norm.ppf(0.975) * np.sqrt(0.3))


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 12), st.integers(1, 3), st.integers(0, 10_000))
def test_total_variance_at_least_within(m, p, seed):
    rng = np.random.default_rng(seed)
    est = rng.normal(size=(m, p))
    if seed % 3 == 0:
        est[:, 0] = est[0, 0]
    var = rng.uniform(0.01, 2.0, size=(m, p))
    out = rubin_pool(est, var)
    assert np.all(out.variance >= out.within)
    assert np.all((out.variance == out.within) == (out.between == 0))
    assert np.all(out.df > 0)


def test_pooled_output_matches_step_by_step(table4_400):
    observed, _ = table4_400
    config = ImputationConfig(m=10)
    pooled = nnmi_estimate(observed, config, seed=314)
    cumhaz = nelson_aalen(observed)
    fits = [fit_cox(impute_once(observed, config, np.random.default_rng(child), cumhaz=cumhaz))
            for child in np.random.SeedSequence(314).spawn(10)]
    for k in range(2):
        b = [float(f.beta[k]) for f in fits]
        u = [float(f.covariance[k, k]) for f in fits]
        qbar = statistics.fmean(b)
        between = statistics.variance(b)
        within = statistics.fmean(u)
        total = within + (1 + 1 / 10) * between
        df = 9 * (1 + within * 10 / (11 * between)) ** 2
        assert pooled.beta[k] == pytest.approx(qbar, abs=1e-12)
        assert pooled.between[k] == pytest.approx(between, abs=1e-12)
        assert pooled.within[k] == pytest.approx(within, abs=1e-12)
        assert pooled.variance[k] == pytest.approx(total, abs=1e-12)
        assert pooled.df[k] == pytest.approx(df, rel=1e-12)


def test_no_missing_pooled_equals_full_data(table4_400):
    _, complete = table4_400
    pooled = nnmi_estimate(complete, ImputationConfig(m=5), seed=1)
    fo = fit_cox(complete)
    assert np.array_equal(pooled.beta, fo.beta)
    assert np.all(pooled.between == 0) and np.all(pooled.degenerate_b)
    assert np.allclose(pooled.variance, np.diag(fo.covariance))


def test_nnmi_deterministic_and_worker_independent(table4_400):
    observed, _ = table4_400
    config = ImputationConfig(m=4)
    a = nnmi_estimate(observed, config, seed=99)
    b = nnmi_estimate(observed, config, seed=99)
    c = nnmi_estimate(observed, config, seed=99, workers=2)
    for other in (b, c):
        assert np.array_equal(a.beta, other.beta) and np.array_equal(a.variance, other.variance)


def test_failed_imputation_names_replicate():
    # two complete cases cannot supply nn = 5 donors
    data = SurvivalData([1.0, 2.0, 3.0, 4.0], [1, 1, 0, 1], np.arange(4.0)[:, None],
                        [0.0, 1.0, np.nan, np.nan])
    with pytest.raises(ImputationFailed) as info:
        nnmi_estimate(data, ImputationConfig(m=2), seed=0)
    assert info.value.replicate == 0
