"""Generative survival models with a missing binary covariate, and the Monte Carlo harness.

Failure and censoring times are exponential given ``(x, z)``; ``z`` is
uniform on (0, 1); ``x`` is Bernoulli with a constant, logit or
complementary log-log probability in ``z``; ``x`` is observed with a logit
or complementary log-log probability in ``(z, y)``. Probabilities follow the
sign convention ``1 / (1 + exp(a0 + a1 z))`` and ``exp(-exp(a0 + a1 z))``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, stats

from .aipw import fit_aipw
from .complete_case import fit_complete_case
from .covariates import SPEC_PAIRS
from .errors import CoxMissError
from .nnmi import ImputationConfig, nnmi_estimate
from .survival_core import SurvivalData, fit_cox

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
METHODS = ("FO", "CC", "AIPW_11", "AIPW_12", "AIPW_21", "NNMI_11", "NNMI_12", "NNMI_21")
COEF_LABELS = ("x", "z")


@dataclass(frozen=True)
class Law:
    """Bernoulli probability law: ``constant`` (p,), ``logit`` or ``cloglog`` coefficients."""

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in ("constant", "logit", "cloglog"):
            raise ValueError(f"unknown law {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        if self.kind == "constant" and not (len(self.params) == 1 and 0 < self.params[0] < 1):
            raise ValueError("constant law needs one probability in (0, 1)")

    def prob(self, *covariates):
        if self.kind == "constant":
            return np.full(np.shape(covariates[0]), self.params[0])
        if len(covariates) != len(self.params) - 1:
            raise ValueError(f"{self.kind} law has {len(self.params) - 1} slopes, "
                             f"got {len(covariates)} covariates")
        eta = self.params[0] + sum(c * v for c, v in zip(self.params[1:], covariates))
        if self.kind == "logit":
            return 1.0 / (1.0 + np.exp(eta))
        return np.exp(-np.exp(eta))

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["params"]))


@dataclass(frozen=True)
class Scenario:
    n: int
    beta_x: float
    beta_z: float
    theta_x: float
    theta_z: float
    x_law: Law
    miss_law: Law
    label: str = ""
    notes: str = ""

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("scenario needs n >= 20")
        if self.miss_law.kind == "constant":
            raise ValueError("missingness law must depend on (z, y)")

    @property
    def truth(self):
        return np.array([self.beta_x, self.beta_z])

    def with_n(self, n):
        label = self.label.rsplit("-n", 1)[0] if "-n" in self.label else self.label
        return Scenario(n, self.beta_x, self.beta_z, self.theta_x, self.theta_z,
                        self.x_law, self.miss_law, f"{label}-n{n}", self.notes)

    def to_dict(self):
        d = asdict(self)
        d["x_law"] = self.x_law.to_dict()
        d["miss_law"] = self.miss_law.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["x_law"] = Law.from_dict(d["x_law"])
        d["miss_law"] = Law.from_dict(d["miss_law"])
        return cls(**d)

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def draw_latent(scenario: Scenario, rng, n=None) -> dict:
    """Covariates, failure and censoring times, and the uniform behind ``delta_x``."""
    n = scenario.n if n is None else n
    z = rng.uniform(size=n)
    x = (rng.uniform(size=n) < scenario.x_law.prob(z)).astype(float)
    t = rng.exponential(size=n) / np.exp(scenario.beta_x * x + scenario.beta_z * z)
    c = rng.exponential(size=n) / np.exp(scenario.theta_x * x + scenario.theta_z * z)
    return {"z": z, "x": x, "t": t, "c": c, "u": rng.uniform(size=n)}


def _draw(scenario: Scenario, rng, n=None):
    d = draw_latent(scenario, rng, n)
    y = np.minimum(d["t"], d["c"])
    delta_t = (d["t"] <= d["c"]).astype(np.int64)
    return d["z"], d["x"], y, delta_t, d["u"]


def generate_dataset(scenario: Scenario, rng=None, *, full=False):
    """Simulate one dataset; with ``full=True`` also return the pre-missingness copy."""
    rng = np.random.default_rng(rng)
    z, x, y, delta_t, u = _draw(scenario, rng)
    delta_x = (u < scenario.miss_law.prob(z, y)).astype(np.int64)
    complete = SurvivalData(y, delta_t, z[:, None], x, x_name="x", z_names=["z"])
    observed = complete.with_x(np.where(delta_x == 1, x, np.nan))
    return (observed, complete) if full else observed


def realized_rates(scenario: Scenario, n=100_000, seed=0):
    data = generate_dataset(scenario.with_n(n), np.random.default_rng(seed))
    return 1.0 - data.delta_t.mean(), data.n_missing / len(data)


def calibrate_miss_intercept(scenario: Scenario, target_missing=0.63, n=200_000, seed=20240521):
    """Intercept of ``scenario.miss_law`` giving the target missing rate.

    Uses one fixed set of draws for every candidate intercept, so the root
    search sees a deterministic, monotone function.
    """
    z, _, y, _, u = _draw(scenario, np.random.default_rng(seed), n)
    slopes = scenario.miss_law.params[1:]
    kind = scenario.miss_law.kind

    def gap(a0):
        law = Law(kind, (a0, *slopes))
        return np.mean(u >= law.prob(z, y)) - target_missing

    return float(optimize.brentq(gap, -20.0, 20.0, xtol=1e-10))


def _matched_cloglog_intercept(logit_law: Law):
    """cloglog intercept with the same slope and the same mean probability over z ~ U(0, 1)."""
    a1 = logit_law.params[1]
    target = integrate.quad(lambda z: float(logit_law.prob(z)), 0.0, 1.0)[0]

    def gap(a0):
        return integrate.quad(lambda z: math.exp(-math.exp(a0 + a1 * z)), 0.0, 1.0)[0] - target

    return float(optimize.brentq(gap, -10.0, 10.0, xtol=1e-12))


TABLE4_MISS = Law("logit", (1.5, 0.5, -2.0))
TABLE4_X = Law("constant", (0.5,))
TABLE5_X = Law("logit", (0.25, -0.5))


def _base(name):
    if name == "table4":
        x_law = TABLE4_X
    elif name == "table5":
        x_law = TABLE5_X
    else:
        raise ValueError(f"unknown scenario {name!r}; expected table4 or table5")
    return Scenario(400, LN2, -LN2, -2.0, 0.1, x_law, TABLE4_MISS, label=f"{name}-n400")


@lru_cache(maxsize=None)
def make_scenario(name="table4", n=400, x_link="logit", miss_link="logit") -> Scenario:
    """Captioned scenario with optional complementary log-log laws swapped in."""
    scen = _base(name)
    x_law, miss_law, notes = scen.x_law, scen.miss_law, []
    label = name
    if x_link == "cloglog":
        if x_law.kind == "constant":
            raise ValueError("x law of table4 is constant; it has no link to swap")
        a0 = _matched_cloglog_intercept(x_law)
        x_law = Law("cloglog", (a0, x_law.params[1]))
        notes.append(f"x cloglog intercept {a0:.6f} matches the mean of the logit law")
        label += "-xcloglog"
    elif x_link != "logit":
        raise ValueError(f"unknown x link {x_link!r}")
    if miss_link == "cloglog":
        draft = Scenario(scen.n, scen.beta_x, scen.beta_z, scen.theta_x, scen.theta_z,
                         x_law, Law("cloglog", miss_law.params))
        e0 = calibrate_miss_intercept(draft)
        miss_law = Law("cloglog", (e0, *miss_law.params[1:]))
        notes.append(f"missingness cloglog intercept calibrated to {e0:.6f} for missing rate 0.63")
        label += "-misscloglog"
    elif miss_link != "logit":
        raise ValueError(f"unknown missingness link {miss_link!r}")
    return Scenario(n, scen.beta_x, scen.beta_z, scen.theta_x, scen.theta_z, x_law, miss_law,
                    label=f"{label}-n{n}", notes="; ".join(notes))


def builtin_scenarios() -> list:
    out = []
    for name in ("table4", "table5"):
        links = [("logit", "logit"), ("logit", "cloglog")]
        if name == "table5":
            links += [("cloglog", "logit"), ("cloglog", "cloglog")]
        for n in (200, 400):
            for x_link, miss_link in links:
                out.append(make_scenario(name, n, x_link, miss_link))
    return out


# ---------------------------------------------------------------- Monte Carlo


@dataclass
class MethodSummary:
    method: str
    est_mean: np.ndarray
    sd_empirical: np.ndarray | None
    se_mean: np.ndarray
    coverage_rate: np.ndarray
    mse: np.ndarray
    n_used: int
    divergence_count: int = 0
    failure_count: int = 0


@dataclass
class MonteCarloSummary:
    scenario: Scenario
    replicates: int
    master_seed: int
    rows: list
    censoring_rate: float
    missing_rate: float
    metadata: dict = field(default_factory=dict)

    def row(self, method) -> MethodSummary:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def table(self) -> list:
        """Rows in the Method / Est SD SE CR per coefficient / Div layout."""
        out = []
        for r in self.rows:
            rec = {"Method": r.method}
            for k, lab in enumerate(COEF_LABELS):
                rec[f"Est_{lab}"] = _num(r.est_mean[k])
                rec[f"SD_{lab}"] = None if r.sd_empirical is None else _num(r.sd_empirical[k])
                rec[f"SE_{lab}"] = _num(r.se_mean[k])
                rec[f"CR_{lab}"] = _num(r.coverage_rate[k])
            rec["Div"] = r.divergence_count if r.method.startswith("AIPW") else None
            rec["Fail"] = r.failure_count
            rec["N"] = r.n_used
            out.append(rec)
        return out

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "replicates": self.replicates,
            "master_seed": self.master_seed,
            "censoring_rate": self.censoring_rate,
            "missing_rate": self.missing_rate,
            "table": self.table(),
            "mse": {r.method: [_num(v) for v in r.mse] for r in self.rows},
            "metadata": self.metadata,
        }

    def write(self, path, fmt="csv"):
        if fmt == "json":
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(self.to_json(), fh, indent=2)
            return
        rows = self.table()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for rec in rows:
                writer.writerow({k: "" if v is None else (f"{v:.6g}" if isinstance(v, float) else v)
                                 for k, v in rec.items()})


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _fit_method(method, observed, complete, seed, n_boot, nnmi_config):
    """(beta, se, df) for one method; ``None`` beta marks a failure."""
    if method == "FO":
        fit = fit_cox(complete)
        return fit.beta, fit.se, np.inf
    if method == "CC":
        fit = fit_complete_case(observed)
        return fit.beta, fit.se, np.inf
    kind, spec = method.split("_")
    spec_x, spec_miss = SPEC_PAIRS[spec]
    if kind == "AIPW":
        res = fit_aipw(observed, spec_miss, spec_x, n_boot=n_boot, rng=np.random.default_rng(seed))
        if res.diverged:
            return None
        return res.beta, res.se, np.inf
    config = ImputationConfig(nn=nnmi_config.nn, w1=nnmi_config.w1, w2=nnmi_config.w2,
                              m=nnmi_config.m, spec_x=spec_x, spec_miss=spec_miss)
    pooled = nnmi_estimate(observed, config, seed=seed)
    return pooled.beta, pooled.se, pooled.df


def _run_replicate(args):
    scenario, methods, master_seed, rep, n_boot, nnmi_config = args
    root = np.random.SeedSequence([master_seed, rep])
    children = root.spawn(1 + len(METHODS))
    observed, complete = generate_dataset(scenario, np.random.default_rng(children[0]), full=True)
    out = {"censoring": 1.0 - observed.delta_t.mean(), "missing": observed.n_missing / len(observed)}
    for method in methods:
        seed = children[1 + METHODS.index(method)]
        try:
            out[method] = _fit_method(method, observed, complete, seed, n_boot, nnmi_config)
        except CoxMissError as exc:
            log.debug("replicate %d %s failed: %s", rep, method, exc)
            out[method] = None
    return out


def _summarize(method, results, truth):
    ok = [r for r in results if r is not None]
    failed = len(results) - len(ok)
    nan = np.full(truth.shape, np.nan)
    if not ok:
        return MethodSummary(method, nan, None, nan, nan, nan, 0,
                             failed if method.startswith("AIPW") else 0,
                             0 if method.startswith("AIPW") else failed)
    beta = np.array([r[0] for r in ok])
    se = np.array([r[1] for r in ok])
    df = np.array([np.broadcast_to(r[2], truth.shape) for r in ok], dtype=float)
    q = np.where(np.isinf(df), stats.norm.ppf(0.975),
                 stats.t.ppf(0.975, np.where(np.isinf(df), 1.0, df)))
    covered = np.abs(beta - truth) <= q * se
    return MethodSummary(
        method=method,
        est_mean=beta.mean(axis=0),
        sd_empirical=beta.std(axis=0, ddof=1) if len(ok) > 1 else None,
        se_mean=se.mean(axis=0),
        coverage_rate=100.0 * covered.mean(axis=0),
        mse=((beta - truth) ** 2).mean(axis=0),
        n_used=len(ok),
        divergence_count=failed if method.startswith("AIPW") else 0,
        failure_count=0 if method.startswith("AIPW") else failed,
    )


def run_monte_carlo(scenario: Scenario, methods=METHODS, replicates=500, master_seed=0, *,
                    n_boot=500, nnmi_config=None, workers=1, progress=None) -> MonteCarloSummary:
    """Simulate ``replicates`` datasets and summarise every requested method.

    Replicate ``r`` draws from ``SeedSequence([master_seed, r])``, so the
    summary is identical for any ``workers``. AIPW replicates whose solver
    diverges are left out of the moments and counted in ``Div``.
    """
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    nnmi_config = nnmi_config or ImputationConfig()
    jobs = [(scenario, methods, master_seed, rep, n_boot, nnmi_config) for rep in range(replicates)]
    if workers > 1:
        from .parallel import parallel_map
        results = parallel_map(_run_replicate, jobs, workers)
    else:
        results = []
        for k, job in enumerate(jobs):
            results.append(_run_replicate(job))
            if progress is not None:
                progress(k + 1, replicates)
    rows = [_summarize(m, [r[m] for r in results], scenario.truth) for m in methods]
    metadata = {
        "n_boot": n_boot,
        "nnmi": {"nn": nnmi_config.nn, "w1": nnmi_config.w1, "w2": nnmi_config.w2, "m": nnmi_config.m},
        "methods": list(methods),
    }
    if scenario.notes:
        metadata["scenario_notes"] = scenario.notes
    return MonteCarloSummary(
        scenario=scenario,
        replicates=replicates,
        master_seed=master_seed,
        rows=rows,
        censoring_rate=float(np.mean([r["censoring"] for r in results])),
        missing_rate=float(np.mean([r["missing"] for r in results])),
        metadata=metadata,
    )
