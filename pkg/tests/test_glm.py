import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coxnnmi.errors import DegenerateOutcome, DimensionMismatch, Separation
from coxnnmi.glm import (
    GlmFit,
    fit_glm,
    inverse_link,
    link_function,
    linear_predictor,
    predict_prob,
)


def fixed(coef, link="logit"):
    coef = np.asarray(coef, dtype=float)
    return GlmFit(coef=coef, link=link, converged=True,
                  covariance=np.eye(coef.size))


def test_constant_response_raises():
    z = np.linspace(0, 1, 20)
    with pytest.raises(DegenerateOutcome):
        fit_glm(z, np.ones(20))
    # the degenerate outcome is a separation case
    with pytest.raises(Separation):
        fit_glm(z, np.zeros(20), link="cloglog")


def test_saturated_two_by_two_logit():
    # group 0: 3 of 10 positive; group 1: 7 of 12 positive
    z = np.r_[np.zeros(10), np.ones(12)]
    y = np.r_[np.ones(3), np.zeros(7), np.ones(7), np.zeros(5)]
    fit = fit_glm(z, y)
    o0, o1 = 3 / 7, 7 / 5
    assert fit.converged
    assert fit.coef[0] == pytest.approx(np.log(o0), abs=1e-6)
    assert fit.coef[1] == pytest.approx(np.log(o1 / o0), abs=1e-6)


def test_cloglog_recovers_generative_slope():
    # generative law p(z) = exp(-exp(0.25 - 0.5 z)) is the complement of the
    # standard cloglog mean, so the standard fit is applied to 1 - response
    rng = np.random.default_rng(2024)
    z = rng.normal(size=20000)
    r = (rng.uniform(size=20000) < np.exp(-np.exp(0.25 - 0.5 * z))).astype(float)
    fit = fit_glm(z, 1.0 - r, link="cloglog")
    assert fit.converged
    assert abs(fit.coef[1] + 0.5) < 0.1
    assert abs(fit.coef[0] - 0.25) < 0.1


def test_separated_data_is_reported():
    z = np.arange(10.0)
    y = (z > 4.5).astype(float)
    fit = fit_glm(z, y)
    assert fit.separated and not fit.converged


def test_identity_link_is_least_squares():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 2))
    y = 1.0 + X @ [2.0, -1.0] + rng.normal(scale=0.1, size=50)
    fit = fit_glm(X, y, link="identity")
    ref, *_ = np.linalg.lstsq(np.column_stack([np.ones(50), X]), y, rcond=None)
    assert np.allclose(fit.coef, ref, atol=1e-10)


def test_linear_predictor_examples():
    fit = fixed([0.0, 1.0, 2.0])
    assert linear_predictor(fit, [3.0, 4.0]) == 11.0
    assert linear_predictor(fixed([0.7, 1.0, 2.0]), [0.0, 0.0]) == 0.7
    assert np.allclose(linear_predictor(fit, [[3.0, 4.0], [1.0, 0.0]]), [11.0, 1.0])
    with pytest.raises(DimensionMismatch):
        linear_predictor(fit, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("link", ["logit", "cloglog"])
def test_link_round_trip(link):
    rng = np.random.default_rng(3)
    # away from the probability clamp, where the inverse is exact
    for _ in range(20):
        coef = rng.normal(scale=0.5, size=4)
        row = np.clip(rng.normal(size=3), -1.0, 1.0)
        fit = fixed(coef, link)
        eta = linear_predictor(fit, row)
        assert link_function(predict_prob(fit, row), link) == pytest.approx(eta, abs=1e-12)


def test_predict_prob_examples():
    assert predict_prob(fixed([0.0]), np.zeros(0)) == 0.5
    assert inverse_link(0.0, "cloglog") == pytest.approx(1 - np.exp(-1), abs=1e-12)
    assert predict_prob(fixed([-1.5, -0.5, 2.0]), [0.0, 0.0]) == pytest.approx(
        1 / (1 + np.exp(1.5)), abs=1e-12)
    assert 1 / (1 + np.exp(1.5)) == pytest.approx(0.1824, abs=5e-5)


def test_predict_prob_clamped():
    assert predict_prob(fixed([100.0]), np.zeros(0)) == 1 - 1e-10
    assert predict_prob(fixed([-100.0], "cloglog"), np.zeros(0)) == 1e-10


def irls_score(fit, X, y):
    Xi = np.column_stack([np.ones(len(y)), X])
    eta = Xi @ fit.coef
    if fit.link == "logit":
        mu = 1 / (1 + np.exp(-eta))
        return Xi.T @ (y - mu)
    mu = 1 - np.exp(-np.exp(eta))
    dmu = np.exp(eta - np.exp(eta))
    return Xi.T @ ((y - mu) * dmu / (mu * (1 - mu)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["logit", "cloglog"]))
def test_converged_score_is_small(seed, link):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 2))
    y = (rng.uniform(size=200) < 1 / (1 + np.exp(-(0.3 + X @ [0.8, -0.5])))).astype(float)
    fit = fit_glm(X, y, link=link)
    if fit.converged:
        assert np.max(np.abs(irls_score(fit, X, y))) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.floats(-2, 2), st.integers(0, 2), st.sampled_from(["logit", "cloglog"]))
def test_predict_prob_monotone(coef, base, k, link):
    fit = fixed(coef, link)
    lo = np.full(2, base)
    hi = lo.copy()
    if k < 2:
        hi[k] += 0.5
        sign = np.sign(coef[k + 1])
        diff = predict_prob(fit, hi) - predict_prob(fit, lo)
        assert diff * sign >= -1e-15
    p = predict_prob(fit, lo)
    assert 0 < p < 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 10), st.floats(-3, 3))
def test_logit_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=300)
    y = (rng.uniform(size=300) < 1 / (1 + np.exp(-(0.2 + 0.7 * z)))).astype(float)
    a = fit_glm(z, y)
    b = fit_glm(scale * z + shift, y)
    assert a.converged and b.converged  # inputs keep coefficients below the separation bound
    assert b.coef[1] == pytest.approx(a.coef[1] / scale, rel=1e-6, abs=1e-8)
    assert b.coef[0] == pytest.approx(a.coef[0] - a.coef[1] * shift / scale, rel=1e-6, abs=1e-8)
    assert np.allclose(predict_prob(a, z[:, None]), predict_prob(b, (scale * z + shift)[:, None]),
                       atol=1e-8)
