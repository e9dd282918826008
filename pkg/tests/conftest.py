import numpy as np
import pytest

from mdam.dataset import BINARY, CATEGORICAL, CONTINUOUS, VariableSpec, make_table


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def mixed_schema():
    return (
        VariableSpec("S", BINARY, has_margin=True),
        VariableSpec("E", CATEGORICAL, ("a", "b", "c"), has_margin=True),
        VariableSpec("A", CONTINUOUS),
    )


def random_mixed_table(rng, n=400, miss=0.2, unit=0.0, schema=None):
    """Small mixed-type table with MCAR item and unit nonresponse."""
    schema = schema or (
        VariableSpec("S", BINARY, has_margin=True),
        VariableSpec("E", CATEGORICAL, ("a", "b", "c"), has_margin=True),
        VariableSpec("A", CONTINUOUS),
    )
    s = rng.integers(0, 2, n).astype(float)
    e = (1 + rng.integers(0, 3, n)).astype(float)
    a = 1.0 + 0.5 * s - 0.3 * (e == 2) + rng.standard_normal(n)
    cols = {"S": s, "E": e, "A": a}
    for name in ("E", "A"):
        drop = rng.random(n) < miss
        cols[name] = np.where(drop, np.nan, cols[name])
    u = rng.random(n) < unit
    for name in cols:
        cols[name] = np.where(u, np.nan, cols[name])
    w = np.where(u, np.nan, rng.uniform(5, 20, n))
    return make_table(schema, {k: list(v) for k, v in cols.items()}, weights=w, population_size=float(20 * n))
