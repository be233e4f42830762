"""Cox partial-likelihood numerics and cumulative hazard estimators.

Everything here works on time-sorted arrays internally. Tied event times are
handled with the Breslow approximation: every subject whose observed time is
at least ``t`` is in the risk set at ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    Diverged,
    NoEvents,
    SingularInformation,
)

DIVERGENCE_BOUND = 10.0


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: observed time, event flag, covariates and the maybe-missing ``x``."""

    y: float
    delta_t: int
    z: tuple = ()
    x: float | None = None
    delta_x: int | None = None

    def __post_init__(self):
        if self.delta_x is None:
            object.__setattr__(self, "delta_x", 0 if self.x is None else 1)
        object.__setattr__(self, "z", tuple(float(v) for v in self.z))
        if not self.y >= 0:
            raise ValueError(f"observed time must be nonnegative, got {self.y}")
        if self.delta_t not in (0, 1) or self.delta_x not in (0, 1):
            raise ValueError("event and missingness indicators must be 0 or 1")
        if (self.delta_x == 1) != (self.x is not None):
            raise ValueError("delta_x must be 1 exactly when x is present")


class SurvivalData:
    """Columnar dataset: ``y``, ``delta_t``, ``z`` (n x q), ``x`` (NaN when missing), ``delta_x``.

    Instances are treated as immutable; the helpers below return new objects.
    """

    def __init__(self, y, delta_t, z=None, x=None, delta_x=None,
                 x_name="x", z_names=None):
        y = np.asarray(y, dtype=float).reshape(-1)
        n = y.shape[0]
        delta_t = np.asarray(delta_t).reshape(-1).astype(np.int64)
        if z is None:
            z = np.zeros((n, 0))
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(n, -1) if n else z.reshape(0, -1)
        if x is None:
            x = np.full(n, np.nan)
        x = np.asarray(x, dtype=float).reshape(-1).copy()
        if delta_x is None:
            delta_x = (~np.isnan(x)).astype(np.int64)
        delta_x = np.asarray(delta_x).reshape(-1).astype(np.int64)
        if not (delta_t.shape[0] == z.shape[0] == x.shape[0] == delta_x.shape[0] == n):
            raise DimensionMismatch("all columns must have the same number of rows")
        if np.any(~(y >= 0)):
            raise ValueError("observed times must be nonnegative")
        if np.any((delta_t != 0) & (delta_t != 1)) or np.any((delta_x != 0) & (delta_x != 1)):
            raise ValueError("indicators must be 0 or 1")
        if np.any(np.isnan(x) == (delta_x == 1)):
            raise ValueError("delta_x must be 1 exactly where x is present")
        if np.any(~np.isfinite(z)):
            raise ValueError("fully observed covariates must be finite")
        if z_names is None:
            z_names = [f"z{k + 1}" for k in range(z.shape[1])]
        if len(z_names) != z.shape[1]:
            raise DimensionMismatch("z_names length does not match z columns")
        self.y = y
        self.delta_t = delta_t
        self.z = z
        self.x = x
        self.delta_x = delta_x
        self.x_name = x_name
        self.z_names = list(z_names)
        for arr in (self.y, self.delta_t, self.z, self.x, self.delta_x):
            arr.setflags(write=False)

    def __len__(self):
        return self.y.shape[0]

    def __repr__(self):
        return (f"SurvivalData(n={len(self)}, events={self.n_events}, "
                f"missing_x={self.n_missing}, z={self.z_names})")

    @classmethod
    def from_records(cls, records: Iterable[SurvivalRecord], x_name="x", z_names=None):
        records = list(records)
        q = len(records[0].z) if records else 0
        if any(len(r.z) != q for r in records):
            raise DimensionMismatch("records carry different numbers of z covariates")
        return cls(
            y=[r.y for r in records],
            delta_t=[r.delta_t for r in records],
            z=np.array([r.z for r in records], dtype=float).reshape(len(records), q),
            x=[np.nan if r.x is None else r.x for r in records],
            delta_x=[r.delta_x for r in records],
            x_name=x_name,
            z_names=z_names,
        )

    def records(self) -> list[SurvivalRecord]:
        return [
            SurvivalRecord(
                y=float(self.y[i]),
                delta_t=int(self.delta_t[i]),
                z=tuple(self.z[i]),
                x=None if self.delta_x[i] == 0 else float(self.x[i]),
                delta_x=int(self.delta_x[i]),
            )
            for i in range(len(self))
        ]

    @property
    def n_events(self):
        return int(self.delta_t.sum())

    @property
    def n_missing(self):
        return int((self.delta_x == 0).sum())

    @property
    def covariate_names(self):
        return [self.x_name] + self.z_names

    def take(self, index) -> "SurvivalData":
        index = np.asarray(index)
        return SurvivalData(self.y[index], self.delta_t[index], self.z[index],
                            self.x[index], self.delta_x[index],
                            x_name=self.x_name, z_names=self.z_names)

    def complete_cases(self) -> "SurvivalData":
        return self.take(np.flatnonzero(self.delta_x == 1))

    def with_x(self, x) -> "SurvivalData":
        return SurvivalData(self.y, self.delta_t, self.z, x, None,
                            x_name=self.x_name, z_names=self.z_names)

    def design(self) -> np.ndarray:
        """Cox design matrix ``[x, z]``; requires every ``x`` to be observed."""
        if np.any(self.delta_x == 0):
            raise ValueError("design() needs complete covariates; x is missing in some rows")
        return np.column_stack([self.x, self.z])


def as_survival_data(data) -> SurvivalData:
    if isinstance(data, SurvivalData):
        return data
    return SurvivalData.from_records(data)


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function equal to 0 before the first knot."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.shape != values.shape:
            raise DimensionMismatch("knots and values differ in length")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        padded = np.concatenate([[0.0], self.values])
        out = padded[idx + 1]
        return out if out.ndim else float(out)

    @property
    def jumps(self):
        return np.diff(np.concatenate([[0.0], self.values]))


@dataclass
class CoxFit:
    beta: np.ndarray
    covariance: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    baseline_cumhaz: StepFunction
    names: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))


class RiskSets:
    """Sort order and tie-group starts for one (time, event) pair.

    Building this once lets repeated likelihood evaluations skip the sort.
    """

    def __init__(self, time, event):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event).astype(bool)
        if time.shape != event.shape:
            raise DimensionMismatch("time and event lengths differ")
        self.n = time.shape[0]
        self.order = np.argsort(time, kind="stable")
        self.time = time[self.order]
        self.event = event[self.order]
        # first sorted position whose time equals each subject's time
        self.start = np.searchsorted(self.time, self.time, side="left")
        self.event_pos = np.flatnonzero(self.event)
        if self.event_pos.size == 0:
            raise NoEvents("no events (delta_t = 1) in the data")
        self.event_start = self.start[self.event_pos]

    def at_risk_sums(self, values):
        """Sum of ``values`` (already in sorted order) over each event's risk set."""
        rc = np.cumsum(values[::-1], axis=0)[::-1]
        return rc[self.event_start]


def _prepare(data, weights=None, design=None):
    if design is None:
        data = as_survival_data(data)
        time, event, design = data.y, data.delta_t, data.design()
    else:
        time, event = data
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    n = len(time)
    if design.shape[0] != n:
        raise DimensionMismatch("design rows do not match number of subjects")
    if weights is None:
        weights = np.ones(n)
    else:
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if weights.shape[0] != n:
            raise DimensionMismatch("weights length does not match data")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
    risk = RiskSets(time, event)
    return risk, design[risk.order], weights[risk.order]


def _cox_terms(beta, risk, xs, ws, order=2):
    """Log partial likelihood and, optionally, its gradient and information."""
    eta = xs @ beta
    shift = eta.max() if eta.size else 0.0
    r = ws * np.exp(eta - shift)
    s0 = risk.at_risk_sums(r)
    ev = risk.event_pos
    we = ws[ev]
    loglik = float(np.sum(we * (eta[ev] - shift - np.log(s0))))
    if order == 0:
        return loglik, None, None
    s1 = risk.at_risk_sums(r[:, None] * xs)
    mean = s1 / s0[:, None]
    grad = np.sum(we[:, None] * (xs[ev] - mean), axis=0)
    if order == 1:
        return loglik, grad, None
    s2 = risk.at_risk_sums(r[:, None, None] * xs[:, :, None] * xs[:, None, :])
    info = np.einsum("i,ijk->jk", we, s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :])
    return loglik, grad, 0.5 * (info + info.T)


def _check_beta(beta, p):
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (p,):
        raise DimensionMismatch(f"beta has length {beta.shape[0]}, design has {p} columns")
    return beta


def partial_loglik(beta, data, weights=None, *, design=None) -> float:
    """Breslow log partial likelihood.

    ``data`` is a :class:`SurvivalData` (or list of records) with complete
    covariates. Alternatively pass ``data=(time, event)`` together with an
    explicit ``design`` matrix.
    """
    risk, xs, ws = _prepare(data, weights, design)
    return _cox_terms(_check_beta(beta, xs.shape[1]), risk, xs, ws, order=0)[0]


def score_and_info(beta, data, weights=None, *, design=None):
    risk, xs, ws = _prepare(data, weights, design)
    _, grad, info = _cox_terms(_check_beta(beta, xs.shape[1]), risk, xs, ws)
    return grad, info


def fit_cox(data, weights=None, init=None, max_iter=100, tol=1e-8, *,
            design=None, names=None, bound=DIVERGENCE_BOUND) -> CoxFit:
    """Newton-Raphson maximisation of the partial likelihood with step halving.

    Raises :class:`Diverged` once any coefficient exceeds ``bound`` in
    absolute value or ``max_iter`` is used up, and
    :class:`SingularInformation` when the information matrix cannot be
    inverted.
    """
    if design is None:
        data = as_survival_data(data)
        names = names or data.covariate_names
        time, event = data.y, data.delta_t
    else:
        time, event = data
    risk, xs, ws = _prepare((time, event), weights, design if design is not None else data.design())
    p = xs.shape[1]
    beta = np.zeros(p) if init is None else _check_beta(init, p).copy()
    loglik, grad, info = _cox_terms(beta, risk, xs, ws)
    converged = False
    n_iter = 0
    while n_iter < max_iter:
        if np.max(np.abs(grad), initial=0.0) < tol:
            converged = True
            break
        n_iter += 1
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularInformation("information matrix is singular") from exc
        if not np.all(np.isfinite(step)):
            raise SingularInformation("information matrix is singular")
        for _ in range(40):
            cand = beta + step
            cand_ll, cand_grad, cand_info = _cox_terms(cand, risk, xs, ws)
            if np.isfinite(cand_ll) and cand_ll >= loglik - 1e-12 * max(1.0, abs(loglik)):
                break
            step = step / 2
        else:
            # no ascent possible; accept if we are numerically at the top
            if np.max(np.abs(grad)) < np.sqrt(tol) * max(1.0, ws.sum()):
                converged = True
                break
            raise Diverged("step halving failed to increase the partial likelihood",
                           beta=beta, n_iter=n_iter)
        if np.max(np.abs(cand)) > bound:
            raise Diverged(f"coefficient exceeded bound {bound}", beta=cand, n_iter=n_iter)
        small_step = np.max(np.abs(cand - beta)) < 1e-13 * max(1.0, np.max(np.abs(beta)))
        beta, loglik, grad, info = cand, cand_ll, cand_grad, cand_info
        if small_step and np.max(np.abs(grad)) < np.sqrt(tol) * max(1.0, ws.sum()):
            converged = True
            break
    else:
        if np.max(np.abs(grad), initial=0.0) < tol:
            converged = True
    if not converged:
        raise Diverged(f"no convergence after {max_iter} iterations", beta=beta, n_iter=n_iter)
    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation("information matrix is singular at the solution") from exc
    if not np.all(np.isfinite(covariance)) or np.any(np.diag(covariance) <= 0):
        raise SingularInformation("information matrix is singular at the solution")
    cumhaz = _breslow(beta, risk, xs, ws)
    return CoxFit(beta=beta, covariance=0.5 * (covariance + covariance.T), loglik=loglik,
                  converged=True, n_iter=n_iter, baseline_cumhaz=cumhaz,
                  names=list(names) if names is not None else [])


def _breslow(beta, risk, xs, ws):
    eta = xs @ beta if xs.shape[1] else np.zeros(risk.n)
    r = ws * np.exp(eta)
    s0 = risk.at_risk_sums(r)
    ev = risk.event_pos
    times = risk.time[ev]
    knots, first = np.unique(times, return_index=True)
    # every event in a tie group sees the same risk sum
    d = np.add.reduceat(ws[ev], first)
    jumps = d / s0[first]
    return StepFunction(knots, np.cumsum(jumps))


def breslow_cumhaz(beta, data, weights=None, *, design=None) -> StepFunction:
    """Breslow baseline cumulative hazard at coefficients ``beta``."""
    risk, xs, ws = _prepare(data, weights, design)
    return _breslow(_check_beta(beta, xs.shape[1]), risk, xs, ws)


def nelson_aalen_arrays(time, event) -> StepFunction:
    risk = RiskSets(time, event)
    return _breslow(np.zeros(0), risk, np.zeros((risk.n, 0)), np.ones(risk.n))


def nelson_aalen(data) -> StepFunction:
    """Marginal Nelson-Aalen cumulative hazard of the observed times."""
    if isinstance(data, tuple):
        return nelson_aalen_arrays(*data)
    data = as_survival_data(data)
    return nelson_aalen_arrays(data.y, data.delta_t)


def fit_cox_safe(data, **kwargs):
    """``fit_cox`` that returns ``None`` instead of raising on divergence."""
    try:
        return fit_cox(data, **kwargs)
    except (Diverged, SingularInformation):
        return None


__all__: Sequence[str] = [
    "SurvivalRecord", "SurvivalData", "StepFunction", "CoxFit", "RiskSets",
    "partial_loglik", "score_and_info", "fit_cox", "fit_cox_safe",
    "nelson_aalen", "nelson_aalen_arrays", "breslow_cumhaz", "as_survival_data",
    "DIVERGENCE_BOUND",
]
