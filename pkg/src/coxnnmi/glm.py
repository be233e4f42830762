"""Working-model regressions: logistic (logit / cloglog links) and linear."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import DegenerateOutcome, DimensionMismatch, SingularDesign

LINKS = ("logit", "cloglog", "identity")
PROB_CLAMP = 1e-10
SEPARATION_BOUND = 15.0


@dataclass
class GlmFit:
    coef: np.ndarray  # intercept first
    link: str
    converged: bool
    covariance: np.ndarray
    n_iter: int = 0
    separated: bool = False

    def linear_predictor(self, rows):
        return linear_predictor(self, rows)

    def predict_prob(self, rows):
        return predict_prob(self, rows)


def _mean_and_deriv(eta, link):
    if link == "logit":
        mu = expit(eta)
        dmu = mu * (1.0 - mu)
    else:
        e = np.exp(np.minimum(eta, 700.0))
        mu = -np.expm1(-e)
        dmu = np.exp(np.minimum(eta, 700.0) - e)
    mu = np.clip(mu, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return mu, dmu


def _binomial_loglik(y, mu):
    return float(np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))


def fit_glm(design, response, link="logit", max_iter=50, tol=1e-8) -> GlmFit:
    """Fit a GLM by IRLS (Fisher scoring); an intercept column is added here.

    A coefficient beyond ``SEPARATION_BOUND`` in absolute value stops the
    iteration and the fit comes back with ``converged=False`` and
    ``separated=True`` rather than raising.
    """
    if link not in LINKS:
        raise ValueError(f"unknown link {link!r}; expected one of {LINKS}")
    design = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).reshape(-1)
    if design.ndim == 1:
        design = design[:, None]
    n = y.shape[0]
    if design.shape[0] != n:
        raise DimensionMismatch("design rows and response length differ")
    X = np.column_stack([np.ones(n), design])
    p = X.shape[1]
    if n < p + 1:
        raise SingularDesign(f"{n} rows cannot support {p} coefficients")
    if link == "identity":
        return _fit_linear(X, y)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("binary response required for logit/cloglog links")
    if y.min() == y.max():
        raise DegenerateOutcome("response takes a single value")

    coef = np.zeros(p)
    ybar = y.mean()
    coef[0] = np.log(ybar / (1 - ybar)) if link == "logit" else np.log(-np.log1p(-ybar))
    mu, dmu = _mean_and_deriv(X @ coef, link)
    loglik = _binomial_loglik(y, mu)
    converged = False
    separated = False
    n_iter = 0
    info = None
    for n_iter in range(1, max_iter + 1):
        var = mu * (1.0 - mu)
        score = X.T @ ((y - mu) * dmu / var)
        w = dmu * dmu / var
        info = (X * w[:, None]).T @ X
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SingularDesign("working-model information matrix is singular") from exc
        if not np.all(np.isfinite(step)):
            raise SingularDesign("working-model information matrix is singular")
        for _ in range(30):
            cand = coef + step
            mu_c, dmu_c = _mean_and_deriv(X @ cand, link)
            ll_c = _binomial_loglik(y, mu_c)
            if ll_c >= loglik - 1e-10 * max(1.0, abs(loglik)):
                break
            step = step / 2
        coef, mu, dmu, loglik = cand, mu_c, dmu_c, ll_c
        if np.max(np.abs(coef)) > SEPARATION_BOUND:
            separated = True
            break
    if converged or separated:
        pass
    elif info is not None:
        var = mu * (1.0 - mu)
        converged = bool(np.max(np.abs(X.T @ ((y - mu) * dmu / var))) < tol)
    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        covariance = np.full((p, p), np.nan)
    return GlmFit(coef=coef, link=link, converged=converged and not separated,
                  covariance=covariance, n_iter=n_iter, separated=separated)


def _fit_linear(X, y):
    gram = X.T @ X
    try:
        factor = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise SingularDesign("design matrix is rank deficient") from exc
    coef = linalg.cho_solve(factor, X.T @ y)
    resid = y - X @ coef
    dof = max(X.shape[0] - X.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    covariance = sigma2 * linalg.cho_solve(factor, np.eye(X.shape[1]))
    return GlmFit(coef=coef, link="identity", converged=True, covariance=covariance, n_iter=1)


def linear_predictor(fit: GlmFit, row):
    """Intercept plus dot product; ``row`` may be one covariate vector or a matrix of rows."""
    row = np.asarray(row, dtype=float)
    k = fit.coef.shape[0] - 1
    if row.shape[-1:] != (k,) and not (k == 0 and row.ndim == 1 and row.size == 0):
        raise DimensionMismatch(f"expected {k} covariates, got shape {row.shape}")
    out = fit.coef[0] + row @ fit.coef[1:]
    return float(out) if np.ndim(out) == 0 else out


def inverse_link(eta, link):
    eta = np.asarray(eta, dtype=float)
    if link == "logit":
        p = expit(eta)
    elif link == "cloglog":
        p = -np.expm1(-np.exp(np.minimum(eta, 700.0)))
    else:
        raise ValueError("probabilities are only defined for logit and cloglog links")
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def link_function(p, link):
    p = np.asarray(p, dtype=float)
    if link == "logit":
        return np.log(p) - np.log1p(-p)
    if link == "cloglog":
        return np.log(-np.log1p(-p))
    raise ValueError(f"no link function for {link!r}")


def predict_prob(fit: GlmFit, row):
    out = inverse_link(linear_predictor(fit, row), fit.link)
    return float(out) if np.ndim(out) == 0 else out
