"""Covariate specifications for the two working models.

A specification is a tuple of terms. ``"z"`` expands to every fully observed
covariate, a z column name selects that column alone, ``"y"`` is the observed
time, ``"delta_t"`` the event indicator and ``"h0"`` the marginal
Nelson-Aalen cumulative hazard evaluated at the observed time.
"""

from __future__ import annotations

import numpy as np

from .survival_core import SurvivalData, nelson_aalen_arrays

# canonical simulation specifications: "1" = correct, "2" = covariate omitted
X_MODEL_CORRECT = ("z", "delta_t", "h0")
X_MODEL_WRONG = ("z", "delta_t")
MISS_MODEL_CORRECT = ("z", "y")
MISS_MODEL_WRONG = ("z",)

SPEC_PAIRS = {
    "11": (X_MODEL_CORRECT, MISS_MODEL_CORRECT),
    "12": (X_MODEL_CORRECT, MISS_MODEL_WRONG),
    "21": (X_MODEL_WRONG, MISS_MODEL_CORRECT),
}


def parse_spec(text) -> tuple:
    """``"z,delta_t,h0"`` -> ``("z", "delta_t", "h0")``; tuples pass through."""
    if isinstance(text, str):
        terms = tuple(t.strip() for t in text.split(",") if t.strip())
    else:
        terms = tuple(text)
    if not terms:
        raise ValueError("covariate specification is empty")
    return terms


def cumhaz_at_times(data: SurvivalData) -> np.ndarray:
    """Nelson-Aalen estimate of the data, evaluated at each subject's own time."""
    return nelson_aalen_arrays(data.y, data.delta_t)(data.y)


def working_design(data: SurvivalData, terms, h0=None) -> np.ndarray:
    columns = []
    for term in terms:
        if term == "z":
            columns.extend(data.z.T)
        elif term == "y":
            columns.append(data.y)
        elif term == "delta_t":
            columns.append(data.delta_t.astype(float))
        elif term == "h0":
            if h0 is None:
                h0 = cumhaz_at_times(data)
            columns.append(np.asarray(h0, dtype=float))
        elif term in data.z_names:
            columns.append(data.z[:, data.z_names.index(term)])
        else:
            raise ValueError(f"unknown working-model term {term!r}")
    if not columns:
        return np.zeros((len(data), 0))
    return np.column_stack(columns)
