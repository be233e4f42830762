"""Augmented inverse-probability-weighted Cox regression for a binary missing covariate.

Complete cases enter with weight ``delta_x / pi``; every subject also enters
with weight ``1 - delta_x / pi`` through its conditional expectation given
``(Y, delta_t, Z)``. With binary ``x`` those expectations are exact two-point
sums using ``p = Pr(x = 1 | Y, delta_t, Z)`` from the covariate model.
Because the counting process is observed, the augmentation integral collapses
to the subject's own event time, so the estimating function is

    U(beta) = sum_i delta_t_i [a_i W_i + (1 - a_i) E(W_i | obs) - S1(Y_i) / S0(Y_i)]

with ``a_i = delta_x_i / pi_i`` and risk-set sums built from the same mixture.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .covariates import MISS_MODEL_CORRECT, X_MODEL_CORRECT, cumhaz_at_times, working_design
from .errors import (
    CoxMissError,
    DegenerateOutcome,
    EmptyCompleteSet,
    Separation,
    SingularInformation,
    TooManyFailures,
)
from .glm import GlmFit, fit_glm, predict_prob
from .survival_core import DIVERGENCE_BOUND, RiskSets, as_survival_data

log = logging.getLogger(__name__)

PI_FLOOR = 0.01


@dataclass
class AipwWorkingModels:
    selection_model: GlmFit | None  # None when every x is observed
    covariate_model: GlmFit
    spec_selection: tuple
    spec_covariate: tuple
    pi: np.ndarray  # floored selection probabilities, one per row
    p: np.ndarray  # Pr(x = 1 | Y, delta_t, Z), one per row


@dataclass
class AipwResult:
    beta: np.ndarray
    se: np.ndarray | None = None
    diverged: bool = False
    n_boot_failures: int = 0
    n_iter: int = 0
    residual: float = np.nan
    names: list = field(default_factory=list)


def _require_binary_x(data):
    observed = data.x[data.delta_x == 1]
    if observed.size == 0:
        raise EmptyCompleteSet("no subject has x observed")
    if np.any((observed != 0) & (observed != 1)):
        raise ValueError("AIPW supports binary x only")


def fit_working_models(dataset, spec_selection=MISS_MODEL_CORRECT,
                       spec_covariate=X_MODEL_CORRECT, pi_floor=PI_FLOOR) -> AipwWorkingModels:
    """Logistic selection model on all rows and covariate model on complete cases.

    When ``delta_x`` is identically 1 the selection GLM is degenerate and the
    selection probabilities are set to 1.
    """
    data = as_survival_data(dataset)
    _require_binary_x(data)
    h0 = cumhaz_at_times(data)
    cc = data.delta_x == 1

    design_sel = working_design(data, spec_selection, h0)
    try:
        selection = fit_glm(design_sel, data.delta_x, "logit")
    except DegenerateOutcome:
        if not cc.all():
            raise
        selection = None
    if selection is None:
        pi = np.ones(len(data))
    else:
        if selection.separated:
            raise Separation("selection model separated")
        pi = np.maximum(predict_prob(selection, design_sel), pi_floor)

    design_cov = working_design(data, spec_covariate, h0)
    covariate = fit_glm(design_cov[cc], data.x[cc], "logit")
    if covariate.separated:
        raise Separation("covariate model separated")
    p = predict_prob(covariate, design_cov)
    return AipwWorkingModels(selection, covariate, tuple(spec_selection),
                             tuple(spec_covariate), np.atleast_1d(pi), np.atleast_1d(p))


class _Equation:
    """Vectorised evaluation of the AIPW estimating function."""

    def __init__(self, data, pi, p):
        self.risk = RiskSets(data.y, data.delta_t)
        o = self.risk.order
        a = data.delta_x[o] / pi[o]
        self.a = a
        self.b = 1.0 - a
        self.x = np.where(data.delta_x[o] == 1, np.nan_to_num(data.x[o]), 0.0)
        self.p = p[o]
        self.z = data.z[o]
        ev = self.risk.event_pos
        aug_x = self.a[ev] * self.x[ev] + self.b[ev] * self.p[ev]
        self.numerator = np.concatenate([[aug_x.sum()], self.z[ev].sum(axis=0)])

    def __call__(self, beta):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._evaluate(beta)

    def _evaluate(self, beta):
        bx, bz = beta[0], beta[1:]
        lin = self.z @ bz
        shift = lin.max() + max(bx, 0.0)
        ez = np.exp(lin - shift)
        ebx = np.exp(bx)
        r_obs = ez * np.exp(bx * self.x)
        r0 = self.a * r_obs + self.b * ez * (self.p * ebx + 1.0 - self.p)
        r1 = np.empty((r0.shape[0], 1 + self.z.shape[1]))
        r1[:, 0] = self.a * self.x * r_obs + self.b * self.p * ez * ebx
        r1[:, 1:] = self.z * r0[:, None]
        s0 = self.risk.at_risk_sums(r0)
        s1 = self.risk.at_risk_sums(r1)
        return self.numerator - (s1 / s0[:, None]).sum(axis=0)


def _jacobian(fun, beta):
    p = beta.shape[0]
    jac = np.empty((p, p))
    for k in range(p):
        h = 1e-6 * max(1.0, abs(beta[k]))
        up, dn = beta.copy(), beta.copy()
        up[k] += h
        dn[k] -= h
        jac[:, k] = (fun(up) - fun(dn)) / (2 * h)
    return jac


def aipw_solve(dataset, models: AipwWorkingModels, init=None, max_iter=50, tol=1e-8,
               bound=DIVERGENCE_BOUND) -> AipwResult:
    """Newton root-finding on the AIPW estimating equation.

    Divergence (coefficient bound exceeded, non-finite equation, or iteration
    budget exhausted) is recorded in the result rather than raised.
    """
    data = as_survival_data(dataset)
    equation = _Equation(data, models.pi, models.p)
    p = 1 + data.z.shape[1]
    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    u = equation(beta)
    norm = np.max(np.abs(u))
    names = data.covariate_names
    for it in range(1, max_iter + 1):
        if not np.isfinite(norm):
            break
        if norm < tol:
            return AipwResult(beta=beta, n_iter=it - 1, residual=norm, names=names)
        jac = _jacobian(equation, beta)
        try:
            step = -np.linalg.solve(jac, u)
        except np.linalg.LinAlgError as exc:
            raise SingularInformation("AIPW Jacobian is singular") from exc
        if not np.all(np.isfinite(step)):
            break
        for _ in range(20):
            cand = beta + step
            u_c = equation(cand)
            norm_c = np.max(np.abs(u_c))
            if np.isfinite(norm_c) and norm_c < norm:
                break
            step = step / 2
        beta, u, norm = cand, u_c, norm_c
        if np.max(np.abs(beta)) > bound:
            break
    converged = np.isfinite(norm) and norm < tol
    return AipwResult(beta=beta, diverged=not converged, n_iter=it,
                      residual=float(norm), names=names)


def _bootstrap_one(args):
    data, index, spec_selection, spec_covariate, init = args
    sample = data.take(index)
    try:
        models = fit_working_models(sample, spec_selection, spec_covariate)
        res = aipw_solve(sample, models, init=init)
    except CoxMissError:
        return None
    return None if res.diverged else res.beta


def aipw_bootstrap_se(dataset, spec_selection=MISS_MODEL_CORRECT,
                      spec_covariate=X_MODEL_CORRECT, B=500, rng=None,
                      beta=None, workers=1) -> AipwResult:
    """Bootstrap standard errors: resample rows, refit both working models and beta.

    Diverging resamples are dropped and counted; more than ``B / 2`` of them
    raises :class:`TooManyFailures`. ``beta`` (the full-data estimate) is used
    as the starting value for every resample and returned as the point estimate.
    """
    if B < 2:
        raise ValueError("need at least two bootstrap resamples")
    data = as_survival_data(dataset)
    rng = np.random.default_rng(rng)
    n = len(data)
    indices = rng.integers(0, n, size=(B, n))
    jobs = [(data, idx, spec_selection, spec_covariate, beta) for idx in indices]
    if workers > 1:
        from .parallel import parallel_map
        draws = parallel_map(_bootstrap_one, jobs, workers)
    else:
        draws = [_bootstrap_one(job) for job in jobs]
    kept = np.array([d for d in draws if d is not None])
    failures = B - kept.shape[0]
    if failures > B / 2:
        raise TooManyFailures(f"{failures} of {B} bootstrap resamples diverged")
    se = kept.std(axis=0, ddof=1)
    if beta is None:
        beta = kept.mean(axis=0)
    return AipwResult(beta=np.asarray(beta, dtype=float), se=se, n_boot_failures=failures,
                      names=data.covariate_names)


def fit_aipw(dataset, spec_selection=MISS_MODEL_CORRECT, spec_covariate=X_MODEL_CORRECT,
             n_boot=500, rng=None, workers=1) -> AipwResult:
    """Point estimate plus bootstrap standard errors.

    A diverged point estimate is returned as-is (``se`` is ``None``) without
    spending time on the bootstrap.
    """
    data = as_survival_data(dataset)
    models = fit_working_models(data, spec_selection, spec_covariate)
    point = aipw_solve(data, models)
    if point.diverged:
        log.debug("AIPW point estimate diverged after %d iterations", point.n_iter)
        return point
    boot = aipw_bootstrap_se(data, spec_selection, spec_covariate, B=n_boot, rng=rng,
                             beta=point.beta, workers=workers)
    boot.n_iter = point.n_iter
    boot.residual = point.residual
    return boot
