"""Command-line interface: ``analyze``, ``simulate`` and ``impute``.

Every option can also come from a JSON file given with ``--config``; its keys
are the option names with dashes replaced by underscores. Flags given on the
command line win over file values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aipw import fit_aipw
from .complete_case import fit_complete_case
from .covariates import MISS_MODEL_CORRECT, X_MODEL_CORRECT, parse_spec
from .errors import ConfigError, CoxMissError
from .io_data import DatasetSchema, MethodResult, load_csv, save_csv, write_results
from .nnmi import ImputationConfig, impute_once, nnmi_estimate
from .simulation import METHODS, make_scenario, run_monte_carlo

log = logging.getLogger("coxnnmi")

DEFAULTS = {
    "common": {"seed": None, "format": "csv", "workers": 1},
    "data": {
        "input": None, "time_col": None, "status_col": None, "missing_col": None,
        "covariates": [], "categorical": [], "missing_token": [],
        "nn": 5, "w1": 0.8, "w2": 0.2,
        "x_model": ",".join(X_MODEL_CORRECT), "miss_model": ",".join(MISS_MODEL_CORRECT),
    },
    "analyze": {"method": ["cc", "aipw", "nnmi"], "m": 50, "n_boot": 500},
    "impute": {"m": 10},
    "simulate": {
        "scenario": "table4", "n": 400, "reps": 500, "x_link": "logit", "miss_link": "logit",
        "method": list(METHODS), "n_boot": 500, "nn": 5, "w1": 0.8, "w2": 0.2, "m": 10,
    },
}


def _add_common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="output file (impute: stem for the _1.._M files)")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true", default=False)


def _add_data(p):
    p.add_argument("--input")
    p.add_argument("--time-col")
    p.add_argument("--status-col")
    p.add_argument("--missing-col")
    p.add_argument("--covariates", type=lambda s: [c.strip() for c in s.split(",") if c.strip()],
                   help="comma-separated fully observed covariates")
    p.add_argument("--categorical", action="append",
                   help="COLUMN=REFERENCE for a categorical covariate (repeatable)")
    p.add_argument("--missing-token", action="append",
                   help="extra cell text meaning missing, besides the empty cell (repeatable)")
    p.add_argument("--nn", type=int)
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--x-model", help="terms of the covariate working model, e.g. z,delta_t,h0")
    p.add_argument("--miss-model", help="terms of the missingness working model, e.g. z,y")


def build_parser():
    parser = argparse.ArgumentParser(prog="coxnnmi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", argument_default=argparse.SUPPRESS,
                       help="fit CC / AIPW / NNMI Cox models to a CSV dataset")
    _add_common(p)
    _add_data(p)
    p.add_argument("--method", action="append", choices=["cc", "aipw", "nnmi"])
    p.add_argument("--n-boot", type=int, help="AIPW bootstrap resamples")

    p = sub.add_parser("impute", argument_default=argparse.SUPPRESS,
                       help="write M nearest-neighbour imputed copies of a CSV dataset")
    _add_common(p)
    _add_data(p)

    p = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                       help="Monte Carlo study under a built-in scenario")
    _add_common(p)
    p.add_argument("--scenario", help="table4, table5, or a JSON scenario file")
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--x-link", choices=["logit", "cloglog"])
    p.add_argument("--miss-link", choices=["logit", "cloglog"])
    p.add_argument("--method", action="append", choices=list(METHODS))
    p.add_argument("--n-boot", type=int)
    p.add_argument("--nn", type=int)
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.add_argument("--m", type=int)
    return parser


def resolve_config(args) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cmd = args.command
    cfg = dict(DEFAULTS["common"])
    if cmd in ("analyze", "impute"):
        cfg.update(DEFAULTS["data"])
    cfg.update(DEFAULTS[cmd])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        unknown = set(file_cfg) - set(cfg) - {"output"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    cfg["command"] = cmd
    if cfg.get("seed") is None:
        cfg["seed"] = secrets.randbits(63)
    if not cfg.get("output"):
        raise ConfigError("--output is required")
    return cfg


def _metadata(cfg):
    canonical = json.dumps(cfg, sort_keys=True, default=str)
    return {
        "version": __version__,
        "command": cfg["command"],
        "seed": cfg["seed"],
        "config": cfg,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
    }


def _write_metadata(meta, output):
    with open(f"{output}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)


def _schema(cfg):
    for key in ("input", "time_col", "status_col", "missing_col"):
        if not cfg.get(key):
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    encodings = {}
    for item in cfg.get("categorical") or []:
        if "=" not in item:
            raise ConfigError(f"--categorical expects COLUMN=REFERENCE, got {item!r}")
        column, reference = item.split("=", 1)
        encodings[column.strip()] = reference.strip()
    covariates = cfg["covariates"]
    if isinstance(covariates, str):
        covariates = [c.strip() for c in covariates.split(",") if c.strip()]
    try:
        return DatasetSchema(cfg["time_col"], cfg["status_col"], cfg["missing_col"],
                             covariates, encodings,
                             missing_tokens=("", *(cfg.get("missing_token") or [])))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _imputation_config(cfg, seed):
    try:
        return ImputationConfig(nn=cfg["nn"], w1=cfg["w1"], w2=cfg["w2"], m=cfg["m"], seed=seed,
                                spec_x=parse_spec(cfg["x_model"]),
                                spec_miss=parse_spec(cfg["miss_model"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_analyze(cfg) -> int:
    loaded = load_csv(cfg["input"], _schema(cfg))
    data = loaded.data
    methods = list(dict.fromkeys(cfg["method"]))
    streams = np.random.SeedSequence(cfg["seed"]).spawn(2)
    imp = _imputation_config(cfg, seed=None)
    log.info("analyze: n=%d events=%d missing=%d methods=%s", len(data), data.n_events,
             data.n_missing, methods)
    results = []
    for method in methods:
        if method == "cc":
            fit = fit_complete_case(data)
            results.append(MethodResult("CC", fit.names, fit.beta, fit.se))
        elif method == "aipw":
            res = fit_aipw(data, imp.spec_miss, imp.spec_x, n_boot=cfg["n_boot"],
                           rng=np.random.default_rng(streams[0]), workers=cfg["workers"])
            if res.diverged:
                raise CoxMissError("AIPW estimating equation did not converge")
            results.append(MethodResult("AIPW", res.names, res.beta, res.se,
                                        extra={"bootstrap_failures": res.n_boot_failures}))
        elif method == "nnmi":
            pooled = nnmi_estimate(data, imp, seed=streams[1], workers=cfg["workers"])
            label = f"NNMI({imp.nn},{imp.w1:g},{imp.w2:g})"
            results.append(MethodResult.from_pooled(label, pooled, m=imp.m))
        else:
            raise ConfigError(f"unknown method {method!r}")
    meta = _metadata(cfg)
    write_results(results, cfg["format"], cfg["output"], metadata=meta)
    if cfg["format"] == "csv":
        _write_metadata(meta, cfg["output"])
    return 0


def _numbered(output, k):
    path = Path(output)
    return str(path.with_name(f"{path.stem}_{k}{path.suffix or '.csv'}"))


def cmd_impute(cfg) -> int:
    loaded = load_csv(cfg["input"], _schema(cfg))
    imp = _imputation_config(cfg, seed=cfg["seed"])
    j = loaded.header.index(loaded.schema.missing_covariate_column)
    streams = np.random.SeedSequence(cfg["seed"]).spawn(imp.m)
    written = []
    for k, stream in enumerate(streams, start=1):
        trace = impute_once(loaded.data, imp, np.random.default_rng(stream), return_trace=True)
        cells = [row[j] for row in loaded.rows]
        for row, donor in zip(trace.imputed_rows, trace.donor_rows):
            cells[row] = loaded.rows[donor][j]
        path = _numbered(cfg["output"], k)
        save_csv(loaded, path, x_cells=cells)
        written.append(path)
        log.info("imputation %d/%d written to %s", k, imp.m, path)
    meta = _metadata(cfg)
    meta["files"] = written
    _write_metadata(meta, cfg["output"])
    return 0


def cmd_simulate(cfg) -> int:
    if cfg["reps"] < 1:
        raise ConfigError("--reps must be at least 1")
    name = cfg["scenario"]
    if name in ("table4", "table5"):
        try:
            scenario = make_scenario(name, cfg["n"], cfg["x_link"], cfg["miss_link"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        from .simulation import Scenario
        try:
            scenario = Scenario.parse(Path(name).read_text(encoding="utf-8")).with_n(cfg["n"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot load scenario {name!r}: {exc}") from exc
    try:
        nnmi_config = ImputationConfig(nn=cfg["nn"], w1=cfg["w1"], w2=cfg["w2"], m=cfg["m"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    methods = list(dict.fromkeys(cfg["method"]))

    def progress(done, total):
        if done % 10 == 0 or done == total:
            log.info("replicate %d/%d", done, total)

    summary = run_monte_carlo(scenario, methods, cfg["reps"], cfg["seed"], n_boot=cfg["n_boot"],
                              nnmi_config=nnmi_config, workers=cfg["workers"], progress=progress)
    meta = _metadata(cfg)
    if cfg["reps"] < 500:
        meta["warning"] = f"desk-scale run: {cfg['reps']} replicates instead of 500"
        log.warning(meta["warning"])
    summary.metadata.update(meta)
    summary.write(cfg["output"], cfg["format"])
    if cfg["format"] == "csv":
        _write_metadata(summary.metadata, cfg["output"])
    return 0


COMMANDS = {"analyze": cmd_analyze, "impute": cmd_impute, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        log.info("seed %d", cfg["seed"])
        log.info("config %s", json.dumps(cfg, sort_keys=True, default=str))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (CoxMissError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
