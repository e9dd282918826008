"""Input checks shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np

from .dataset import SurveyTable


def check_rng(random_state=None) -> np.random.Generator:
    """Turn None, an int, a SeedSequence or a Generator into a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None or isinstance(random_state, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(random_state)
    raise TypeError(f"cannot build a random generator from {random_state!r}")


def check_table(table) -> SurveyTable:
    if not isinstance(table, SurveyTable):
        raise TypeError(f"expected a SurveyTable, got {type(table).__name__}")
    return table


def check_positive_int(value, name, minimum=1) -> int:
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise RuntimeError(f"{type(estimator).__name__} is not fitted; call fit first")
