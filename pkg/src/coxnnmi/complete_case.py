"""Complete-case Cox regression: drop every subject whose ``x`` is missing."""

from __future__ import annotations

import numpy as np

from .errors import EmptyCompleteSet
from .survival_core import CoxFit, as_survival_data, fit_cox


def fit_complete_case(dataset, weights=None, **fit_kwargs) -> CoxFit:
    data = as_survival_data(dataset)
    keep = np.flatnonzero(data.delta_x == 1)
    if keep.size == 0:
        raise EmptyCompleteSet("no subject has x observed")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)[keep]
    return fit_cox(data.take(keep), weights=weights, **fit_kwargs)
