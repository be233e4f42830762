"""CSV ingestion for real survival datasets and hazard-ratio result files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import NegativeTime, ParseError, UnknownLevel
from .survival_core import SurvivalData


@dataclass
class DatasetSchema:
    time_column: str
    status_column: str
    missing_covariate_column: str
    covariate_columns: list = field(default_factory=list)
    categorical_encodings: dict = field(default_factory=dict)  # column -> reference level
    categorical_levels: dict = field(default_factory=dict)  # optional column -> allowed levels
    missing_tokens: tuple = ("",)

    def __post_init__(self):
        self.covariate_columns = list(self.covariate_columns)
        self.missing_tokens = tuple(self.missing_tokens)
        names = [self.time_column, self.status_column, self.missing_covariate_column,
                 *self.covariate_columns]
        if len(set(names)) != len(names):
            raise ValueError(f"schema columns must be distinct: {names}")
        stray = set(self.categorical_encodings) - set(self.covariate_columns)
        if stray:
            raise ValueError(f"categorical columns not among covariates: {sorted(stray)}")

    @property
    def columns(self):
        return [self.time_column, self.status_column, self.missing_covariate_column,
                *self.covariate_columns]

    def to_dict(self):
        return {
            "time_column": self.time_column,
            "status_column": self.status_column,
            "missing_covariate_column": self.missing_covariate_column,
            "covariate_columns": list(self.covariate_columns),
            "categorical_encodings": dict(self.categorical_encodings),
            "categorical_levels": {k: list(v) for k, v in self.categorical_levels.items()},
            "missing_tokens": list(self.missing_tokens),
        }


@dataclass
class LoadedDataset:
    data: SurvivalData
    schema: DatasetSchema
    header: list
    rows: list  # raw string cells, one list per data row
    levels: dict  # categorical column -> non-reference levels, in indicator order

    @property
    def records(self):
        return self.data.records()

    @property
    def covariate_names(self):
        return self.data.covariate_names


def _number(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as a number", row=row, column=column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", row=row, column=column)
    return value


def load_csv(path, schema: DatasetSchema) -> LoadedDataset:
    """Parse a UTF-8, comma-separated file with a header row.

    Rows are numbered as file lines (the header is line 1) in error messages.
    Categorical covariates become 0/1 indicators named ``<column>_<level>``
    for every level except the reference.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("file is empty") from None
        rows = [row for row in reader if any(cell.strip() for cell in row)]
    missing_cols = [c for c in schema.columns if c not in header]
    if missing_cols:
        raise ParseError(f"columns not found in header: {missing_cols}")
    col = {name: header.index(name) for name in schema.columns}

    n = len(rows)
    y = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    x = np.full(n, np.nan)
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=line)
        t = _number(row[col[schema.time_column]].strip(), line, schema.time_column)
        if t < 0:
            raise NegativeTime(f"negative time {t}", row=line, column=schema.time_column)
        y[i] = t
        s = _number(row[col[schema.status_column]].strip(), line, schema.status_column)
        if s not in (0.0, 1.0):
            raise ParseError(f"status must be 0 or 1, got {s:g}", row=line,
                             column=schema.status_column)
        status[i] = int(s)
        cell = row[col[schema.missing_covariate_column]].strip()
        if cell not in schema.missing_tokens:
            x[i] = _number(cell, line, schema.missing_covariate_column)

    z_columns, z_names, levels = [], [], {}
    for name in schema.covariate_columns:
        cells = [row[col[name]].strip() for row in rows]
        for i, cell in enumerate(cells):
            if cell in schema.missing_tokens:
                raise ParseError("fully observed covariate is missing", row=i + 2, column=name)
        if name in schema.categorical_encodings:
            reference = schema.categorical_encodings[name]
            allowed = schema.categorical_levels.get(name)
            seen = list(dict.fromkeys(cells))
            if allowed is not None:
                for i, cell in enumerate(cells):
                    if cell not in allowed:
                        raise UnknownLevel(f"level {cell!r} not declared", row=i + 2, column=name)
                seen = [lv for lv in allowed if lv in seen or lv == reference]
            if reference not in seen and (allowed is None or reference not in allowed):
                raise UnknownLevel(f"reference level {reference!r} does not occur", column=name)
            others = [lv for lv in seen if lv != reference]
            levels[name] = others
            for lv in others:
                z_columns.append(np.array([1.0 if c == lv else 0.0 for c in cells]))
                z_names.append(f"{name}_{lv}")
        else:
            z_columns.append(np.array([_number(c, i + 2, name) for i, c in enumerate(cells)]))
            z_names.append(name)
    z = np.column_stack(z_columns) if z_columns else np.zeros((n, 0))
    data = SurvivalData(y, status, z, x, x_name=schema.missing_covariate_column, z_names=z_names)
    return LoadedDataset(data, schema, header, [list(r) for r in rows], levels)


def save_csv(loaded: LoadedDataset, path, x=None, x_cells=None):
    """Write the raw rows back out, optionally replacing the missing-covariate column.

    ``x_cells`` gives literal cell text per row (used to copy donor cells
    verbatim); ``x`` gives numeric values formatted with ``repr``.
    """
    j = loaded.header.index(loaded.schema.missing_covariate_column)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(loaded.header)
        for i, row in enumerate(loaded.rows):
            row = list(row)
            if x_cells is not None:
                row[j] = x_cells[i]
            elif x is not None:
                row[j] = "" if np.isnan(x[i]) else repr(float(x[i]))
            writer.writerow(row)


# ------------------------------------------------------------------ results


@dataclass
class MethodResult:
    """Coefficients of one method on the log-hazard scale plus their inference reference."""

    method: str
    names: list
    beta: np.ndarray
    se: np.ndarray
    df: np.ndarray | None = None  # None or inf: normal reference; finite: t
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.se = np.asarray(self.se, dtype=float)
        df = np.inf if self.df is None else self.df
        self.df = np.broadcast_to(np.asarray(df, dtype=float), self.beta.shape).copy()

    @classmethod
    def from_pooled(cls, method, pooled, **extra):
        return cls(method, list(pooled.names), pooled.beta, pooled.se, pooled.df, dict(extra))

    def quantile(self):
        finite = np.isfinite(self.df)
        return np.where(finite, stats.t.ppf(0.975, np.where(finite, self.df, 1.0)),
                        stats.norm.ppf(0.975))

    def p_values(self):
        stat = np.abs(self.beta / self.se)
        finite = np.isfinite(self.df)
        p_t = 2.0 * stats.t.sf(stat, np.where(finite, self.df, 1.0))
        p_n = 2.0 * stats.norm.sf(stat)
        return np.where(finite, p_t, p_n)

    def rows(self):
        q = self.quantile()
        lo, hi = self.beta - q * self.se, self.beta + q * self.se
        p = self.p_values()
        out = []
        for k, name in enumerate(self.names):
            out.append({
                "method": self.method,
                "variable": name,
                "hr": float(np.exp(self.beta[k])),
                "ci_lower": float(np.exp(lo[k])),
                "ci_upper": float(np.exp(hi[k])),
                "p": float(p[k]),
                "beta": float(self.beta[k]),
                "se": float(self.se[k]),
                "df": None if not np.isfinite(self.df[k]) else float(self.df[k]),
            })
        return out


CSV_FIELDS = ["method", "variable", "hr", "ci_lower", "ci_upper", "p", "beta", "se", "df"]


def write_results(results, fmt, path, metadata=None):
    """Hazard ratio, 95% CI and two-sided p per covariate and method.

    CSV values carry 6 significant digits; JSON keeps full precision and the
    run metadata.
    """
    results = list(results)
    if fmt == "json":
        payload = {
            "metadata": metadata or {},
            "results": [
                {"method": r.method, "extra": r.extra, "coefficients": r.rows()} for r in results
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, allow_nan=False)
        return
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            for row in r.rows():
                writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def read_results(path):
    """Parse a file written by :func:`write_results` back into row dictionaries."""
    with open(path, encoding="utf-8") as fh:
        if str(path).endswith(".json"):
            payload = json.load(fh)
            return [row for r in payload["results"] for row in r["coefficients"]]
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {"method": row["method"], "variable": row["variable"]}
        for k in CSV_FIELDS[2:]:
            parsed[k] = float(row[k]) if row[k] != "" else None
        out.append(parsed)
    return out
