"""Cox regression with a covariate missing at random: complete-case, AIPW and
nearest-neighbour multiple imputation estimators, plus a simulation harness."""

__version__ = "0.1.0"

from .aipw import AipwResult, AipwWorkingModels, aipw_bootstrap_se, aipw_solve, fit_aipw, fit_working_models
from .complete_case import fit_complete_case
from .glm import GlmFit, fit_glm, linear_predictor, predict_prob
from .io_data import DatasetSchema, MethodResult, load_csv, read_results, write_results
from .nnmi import (
    ImputationConfig,
    PooledEstimate,
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
from .simulation import (
    Law,
    MonteCarloSummary,
    Scenario,
    builtin_scenarios,
    generate_dataset,
    make_scenario,
    run_monte_carlo,
)
from .survival_core import (
    CoxFit,
    StepFunction,
    SurvivalData,
    SurvivalRecord,
    breslow_cumhaz,
    fit_cox,
    nelson_aalen,
    partial_loglik,
    score_and_info,
)
