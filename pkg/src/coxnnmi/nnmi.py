"""Nearest-neighbour multiple imputation driven by two predictive scores.

Each imputation refits the covariate model and the missingness model on a
bootstrap sample, turns both linear predictors into standardized scores, and
for every subject with missing ``x`` draws uniformly from the ``nn`` closest
complete cases of that bootstrap sample. Cox fits on the completed datasets
are pooled with Rubin's rules.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .covariates import MISS_MODEL_CORRECT, X_MODEL_CORRECT, working_design
from .errors import (
    CoxMissError,
    DegenerateScore,
    DimensionMismatch,
    EmptyDonorPool,
    ImputationFailed,
    Separation,
)
from .glm import GlmFit, fit_glm, linear_predictor
from .survival_core import (
    StepFunction,
    SurvivalData,
    SurvivalRecord,
    as_survival_data,
    fit_cox,
    nelson_aalen_arrays,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImputationConfig:
    nn: int = 5
    w1: float = 0.8
    w2: float = 0.2
    m: int = 10
    seed: int | None = None
    spec_x: tuple = X_MODEL_CORRECT
    spec_miss: tuple = MISS_MODEL_CORRECT
    x_link: str | None = None  # None: logit for binary x, identity otherwise
    max_redraws: int = 10

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or abs(self.w1 + self.w2 - 1.0) > 1e-12:
            raise ValueError("w1 and w2 must be nonnegative and sum to one")
        if self.nn < 1:
            raise ValueError("nn must be at least 1")
        if self.m < 2:
            raise ValueError("at least two imputations are required")
        object.__setattr__(self, "spec_x", tuple(self.spec_x))
        object.__setattr__(self, "spec_miss", tuple(self.spec_miss))


@dataclass(frozen=True)
class ScorePair:
    s_x: float
    s_miss: float


@dataclass
class ScoreModels:
    """Both working models fitted on one bootstrap sample, plus their standardizers."""

    x_model: GlmFit
    miss_model: GlmFit
    mean: np.ndarray  # raw-score means over the bootstrap sample, (x, miss)
    sd: np.ndarray
    spec_x: tuple
    spec_miss: tuple
    cumhaz: StepFunction  # marginal cumulative hazard used for the "h0" term

    @property
    def standardizers(self):
        return self.mean, self.sd

    def raw_scores(self, data: SurvivalData) -> np.ndarray:
        h0 = self.cumhaz(data.y)
        sx = linear_predictor(self.x_model, working_design(data, self.spec_x, h0))
        sm = linear_predictor(self.miss_model, working_design(data, self.spec_miss, h0))
        return np.column_stack([np.atleast_1d(sx), np.atleast_1d(sm)])

    def scores(self, data: SurvivalData) -> np.ndarray:
        return (self.raw_scores(data) - self.mean) / self.sd


@dataclass
class PooledEstimate:
    beta: np.ndarray
    variance: np.ndarray
    df: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    m_used: int
    within: np.ndarray  # U, mean of the per-imputation variances
    between: np.ndarray  # B, sample variance of the estimates
    degenerate_b: np.ndarray
    names: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(self.variance)


def _x_link(data, config):
    if config.x_link is not None:
        return config.x_link
    observed = data.x[data.delta_x == 1]
    return "logit" if np.all((observed == 0) | (observed == 1)) else "identity"


def fit_score_models(bootstrap_sample, spec_x=X_MODEL_CORRECT, spec_miss=MISS_MODEL_CORRECT,
                     cumhaz=None, x_link=None) -> ScoreModels:
    """Fit the x model on complete cases and the missingness model on every row.

    ``cumhaz`` should be the marginal cumulative hazard of the original data so
    that bootstrap rows and original rows share one ``h0`` covariate; it
    defaults to the Nelson-Aalen estimate of ``bootstrap_sample`` itself.
    """
    boot = as_survival_data(bootstrap_sample)
    if cumhaz is None:
        cumhaz = nelson_aalen_arrays(boot.y, boot.delta_t)
    if x_link is None:
        x_link = _x_link(boot, ImputationConfig())
    h0 = cumhaz(boot.y)
    cc = boot.delta_x == 1
    x_model = fit_glm(working_design(boot, spec_x, h0)[cc], boot.x[cc], x_link)
    miss_model = fit_glm(working_design(boot, spec_miss, h0), boot.delta_x, "logit")
    if x_model.separated or miss_model.separated:
        raise Separation("working model separated on the bootstrap sample")
    models = ScoreModels(x_model, miss_model, np.zeros(2), np.ones(2),
                         tuple(spec_x), tuple(spec_miss), cumhaz)
    raw = models.raw_scores(boot)
    sd = raw.std(axis=0, ddof=1)
    if np.any(~(sd > 0)):
        raise DegenerateScore("a predictive score is constant over the bootstrap sample")
    models.mean = raw.mean(axis=0)
    models.sd = sd
    return models


def score_original(record, x_model, miss_model, standardizers, *, cumhaz, spec_x=X_MODEL_CORRECT,
                   spec_miss=MISS_MODEL_CORRECT, z_names=None) -> ScorePair:
    """Standardized score pair of one subject under bootstrap-fitted models."""
    mean, sd = (np.asarray(s, dtype=float) for s in standardizers)
    if np.any(~(sd > 0)):
        raise DegenerateScore("standardizer SD is zero")
    if isinstance(record, SurvivalRecord):
        data = SurvivalData.from_records([record], z_names=z_names)
    else:
        data = as_survival_data(record)
        if len(data) != 1:
            raise DimensionMismatch("score_original scores a single record")
    models = ScoreModels(x_model, miss_model, mean, sd, tuple(spec_x), tuple(spec_miss), cumhaz)
    s = models.scores(data)[0]
    return ScorePair(float(s[0]), float(s[1]))


def nn_distance(a: ScorePair, b: ScorePair, w1=0.8, w2=0.2) -> float:
    return float(np.sqrt(w1 * (a.s_x - b.s_x) ** 2 + w2 * (a.s_miss - b.s_miss) ** 2))


def select_imputing_set(target: ScorePair, donors, nn=5, w1=0.8, w2=0.2) -> list:
    """Indices of the ``nn`` donors closest to ``target``; ties go to the lower index."""
    donors = list(donors)
    if not donors:
        raise EmptyDonorPool("no complete cases to draw from")
    ranked = sorted(donors, key=lambda d: (nn_distance(target, d[1], w1, w2), d[0]))
    return [index for index, _ in ranked[:nn]]


def _nearest(targets, donor_scores, nn, w1, w2):
    """Row-wise ``nn`` nearest donor positions, ties broken by lower position."""
    d2 = (w1 * (targets[:, None, 0] - donor_scores[None, :, 0]) ** 2
          + w2 * (targets[:, None, 1] - donor_scores[None, :, 1]) ** 2)
    k = min(nn, donor_scores.shape[0])
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def imputing_sets(targets: SurvivalData, boot: SurvivalData, models: ScoreModels,
                  config: ImputationConfig) -> np.ndarray:
    """Bootstrap positions of the imputing set of each target row (one row per target)."""
    donor_pos = np.flatnonzero(boot.delta_x == 1)
    if donor_pos.size == 0:
        raise EmptyDonorPool("bootstrap sample has no complete cases")
    donor_scores = models.scores(boot)[donor_pos]
    nearest = _nearest(models.scores(targets), donor_scores, config.nn, config.w1, config.w2)
    return donor_pos[nearest]


@dataclass
class ImputationTrace:
    """Bookkeeping for one imputation: what was drawn and from where."""

    completed: SurvivalData
    boot_index: np.ndarray  # original row behind each bootstrap position
    imputed_rows: np.ndarray  # original rows whose x was missing
    donor_rows: np.ndarray  # original row of the donor used for each imputed row
    imputing_sets: np.ndarray  # bootstrap positions of each imputing set
    models: ScoreModels | None
    redraws: int


def impute_once(dataset, config: ImputationConfig, rng=None, *, cumhaz=None,
                return_trace=False):
    """One bootstrap-refit nearest-neighbour imputation; observed ``x`` is never touched."""
    data = as_survival_data(dataset)
    rng = np.random.default_rng(rng)
    missing = np.flatnonzero(data.delta_x == 0)
    if missing.size == 0:
        trace = ImputationTrace(data, np.arange(len(data)), missing, missing,
                                np.zeros((0, 0), dtype=int), None, 0)
        return trace if return_trace else data
    if len(data) - missing.size < config.nn:
        raise EmptyDonorPool(f"fewer than nn={config.nn} complete cases")
    if cumhaz is None:
        cumhaz = nelson_aalen_arrays(data.y, data.delta_t)
    x_link = _x_link(data, config)
    n = len(data)
    last_error = None
    for redraw in range(config.max_redraws + 1):
        index = rng.integers(0, n, size=n)
        boot = data.take(index)
        if boot.n_missing == 0 or boot.n_missing == n:
            last_error = EmptyDonorPool("bootstrap sample lacks complete or incomplete cases")
            continue
        try:
            models = fit_score_models(boot, config.spec_x, config.spec_miss, cumhaz, x_link)
        except CoxMissError as exc:
            last_error = exc
            continue
        break
    else:
        raise last_error
    sets = imputing_sets(data.take(missing), boot, models, config)
    pick = rng.integers(0, sets.shape[1], size=sets.shape[0])
    chosen = sets[np.arange(sets.shape[0]), pick]
    x = data.x.copy()
    x[missing] = boot.x[chosen]
    completed = data.with_x(x)
    if not return_trace:
        return completed
    return ImputationTrace(completed, index, missing, index[chosen], sets, models, redraw)


def rubin_pool(estimates, variances, names=None) -> PooledEstimate:
    """Rubin's rules: T = U + (1 + 1/M) B with t reference on v degrees of freedom.

    Coefficients whose estimates agree across imputations (B = 0) get
    infinite df, a normal-quantile interval and ``degenerate_b`` set.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    var = np.atleast_2d(np.asarray(variances, dtype=float))
    if est.shape != var.shape:
        raise DimensionMismatch("estimates and variances differ in shape")
    m = est.shape[0]
    if m < 2:
        raise ValueError("pooling needs at least two imputations")
    if np.any(~(var > 0)):
        raise ValueError("variances must be positive")
    constant = np.all(est == est[0], axis=0)
    beta = np.where(constant, est[0], est.mean(axis=0))
    between = np.where(constant, 0.0, est.var(axis=0, ddof=1))
    within = var.mean(axis=0)
    total = within + (1.0 + 1.0 / m) * between
    degenerate = between <= 0
    with np.errstate(divide="ignore"):
        df = np.where(degenerate, np.inf,
                      (m - 1) * (1.0 + within * m / ((m + 1) * np.where(degenerate, 1.0, between))) ** 2)
    q = np.where(np.isinf(df), stats.norm.ppf(0.975), stats.t.ppf(0.975, np.where(np.isinf(df), 1.0, df)))
    half = q * np.sqrt(total)
    return PooledEstimate(beta=beta, variance=total, df=df, ci_lower=beta - half,
                          ci_upper=beta + half, m_used=m, within=within, between=between,
                          degenerate_b=degenerate, names=list(names or []))


def _one_imputation(args):
    data, config, seed, cumhaz, index = args
    try:
        completed = impute_once(data, config, np.random.default_rng(seed), cumhaz=cumhaz)
        fit = fit_cox(completed)
    except CoxMissError as exc:
        raise ImputationFailed(f"imputation {index} failed: {exc}",
                               replicate=index) from exc
    return fit.beta, np.diag(fit.covariance)


def nnmi_estimate(dataset, config: ImputationConfig = ImputationConfig(), *, seed=None,
                  workers=1) -> PooledEstimate:
    """Impute ``config.m`` times, fit Cox on each completed dataset, pool.

    Imputation ``k`` uses the ``k``-th child of ``SeedSequence(seed)`` (``seed``
    defaults to ``config.seed``), so results do not depend on ``workers``.
    """
    data = as_survival_data(dataset)
    seed = config.seed if seed is None else seed
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    cumhaz = nelson_aalen_arrays(data.y, data.delta_t)
    jobs = [(data, config, child, cumhaz, k) for k, child in enumerate(root.spawn(config.m))]
    if workers > 1:
        from .parallel import parallel_map
        results = parallel_map(_one_imputation, jobs, workers)
    else:
        results = [_one_imputation(job) for job in jobs]
    betas = np.array([r[0] for r in results])
    variances = np.array([r[1] for r in results])
    return rubin_pool(betas, variances, names=data.covariate_names)
