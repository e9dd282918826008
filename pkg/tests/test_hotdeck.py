import numpy as np
import pytest

from mdam.dataset import BINARY, CATEGORICAL, CONTINUOUS, CompletedDataset, VariableSpec, make_table
from mdam.hotdeck import EmptyPoolsError, DonorPoolIndex, build_pools, donate, donate_many, hot_deck_fill


def _completed(schema, cols, unit_rows=()):
    t = make_table(schema, cols)
    return CompletedDataset(t, t.values, np.zeros_like(t.item_mask))


def test_two_binary_keys_four_pools(rng):
    schema = (VariableSpec("A", BINARY), VariableSpec("B", BINARY))
    c = _completed(schema, {"A": rng.integers(0, 2, 30), "B": rng.integers(0, 2, 30)})
    idx = build_pools(c, ["A", "B"])
    assert len(idx.pools) == 4
    rows = np.sort(np.concatenate(list(idx.pools.values())))
    np.testing.assert_array_equal(rows, np.arange(30))


def test_sixteen_pools():
    schema = (
        VariableSpec("S", BINARY),
        VariableSpec("R", CATEGORICAL, ("w", "b", "h", "o")),
        VariableSpec("V", BINARY),
    )
    c = _completed(schema, {"S": [0, 1], "R": [1, 4], "V": [1, 0]})
    assert len(build_pools(c, ["S", "R", "V"]).pools) == 16


def test_single_respondent():
    schema = (VariableSpec("A", BINARY), VariableSpec("X", CONTINUOUS))
    c = _completed(schema, {"A": [1], "X": [2.0]})
    idx = build_pools(c, ["A"])
    assert idx.sizes == {(0,): 0, (1,): 1}


def test_continuous_key_rejected():
    schema = (VariableSpec("A", BINARY), VariableSpec("X", CONTINUOUS))
    c = _completed(schema, {"A": [1], "X": [2.0]})
    with pytest.raises(ValueError):
        build_pools(c, ["X"])


def test_donate_uniform(rng):
    idx = DonorPoolIndex(("A",), {(0,): np.array([3, 5, 7, 9]), (1,): np.array([1])})
    assert donate(idx, (1,), rng) == 1
    draws = donate_many(idx, np.zeros((100_000, 1)), rng)
    for d in (3, 5, 7, 9):
        assert abs(np.mean(draws == d) - 0.25) < 0.01


def test_empty_pool_nearest_fallback(rng):
    pools = {
        (0, 0): np.array([], dtype=int),
        (0, 1): np.array([1]),
        (1, 0): np.array([2, 3]),
        (1, 1): np.array([4, 5, 6]),
    }
    idx = DonorPoolIndex(("A", "B"), pools)
    # (0,1) and (1,0) both at distance 1; the larger pool wins
    assert idx.nearest_nonempty((0, 0)) == (1, 0)
    assert donate(idx, (0, 0), rng) in (2, 3)
    with pytest.raises(EmptyPoolsError):
        DonorPoolIndex(("A",), {(0,): np.array([], int)}).nearest_nonempty((0,))


def test_hot_deck_copies_whole_donor_rows(rng):
    schema = (VariableSpec("K", BINARY), VariableSpec("X", CONTINUOUS), VariableSpec("Y", CONTINUOUS))
    n = 40
    k = rng.integers(0, 2, n).astype(float)
    x = rng.standard_normal(n)
    y = rng.standard_normal(n)
    unit = np.arange(n) >= 30
    cols = {
        "K": [None if u else v for u, v in zip(unit, k)],
        "X": [None if u else v for u, v in zip(unit, x)],
        "Y": [None if u else v for u, v in zip(unit, y)],
    }
    t = make_table(schema, cols)
    values = t.values.copy()
    values[unit, 0] = rng.integers(0, 2, unit.sum())
    c = CompletedDataset(t, values, t.item_mask)
    out = hot_deck_fill(c, ["K"], rng)
    assert out.is_complete()
    np.testing.assert_array_equal(out.values[unit, 0], values[unit, 0])
    donors = out.values[~unit]
    for row in out.values[unit]:
        match = np.flatnonzero((donors[:, 1] == row[1]) & (donors[:, 2] == row[2]))
        assert match.size >= 1
        assert donors[match[0], 0] == row[0]
