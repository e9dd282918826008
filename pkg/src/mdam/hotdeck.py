"""Random hot deck donation within cross-classified donor pools."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dataset import CompletedDataset


class EmptyPoolsError(RuntimeError):
    pass


@dataclass(frozen=True)
class DonorPoolIndex:
    """Unit-respondent rows grouped by their completed key-variable values.

    ``pools`` has one entry per cell of the full cross-classification of the
    key variables' levels; cells without donors map to an empty array.
    """

    key_vars: tuple[str, ...]
    pools: dict

    @property
    def sizes(self) -> dict:
        return {k: len(v) for k, v in self.pools.items()}

    def nearest_nonempty(self, key: tuple) -> tuple:
        """Nonempty pool closest in Hamming distance; ties go to the larger pool."""
        best, best_rank = None, None
        for cand, rows in self.pools.items():
            if len(rows) == 0:
                continue
            dist = sum(a != b for a, b in zip(cand, key))
            rank = (dist, -len(rows))
            if best_rank is None or rank < best_rank:
                best, best_rank = cand, rank
        if best is None:
            raise EmptyPoolsError("every donor pool is empty")
        return best


def build_pools(completed: CompletedDataset, key_vars) -> DonorPoolIndex:
    table = completed.source
    key_vars = tuple(key_vars)
    specs = [table.variable(k) for k in key_vars]
    for var in specs:
        if not var.is_categorical:
            raise ValueError(f"hot deck key {var.name!r} must be categorical")
    resp = np.flatnonzero(~table.unit_flag)
    keys = completed.values[np.ix_(resp, [table.index(k) for k in key_vars])]
    if np.isnan(keys).any():
        raise ValueError("unit respondents must be completed before building pools")
    pools = {}
    for cell in itertools.product(*(v.codes for v in specs)):
        hit = np.all(keys == np.asarray(cell, dtype=float), axis=1)
        pools[cell] = resp[hit]
    return DonorPoolIndex(key_vars, pools)


def donate(index: DonorPoolIndex, key, rng) -> int:
    """Row index of one donor drawn uniformly from the matching pool."""
    key = tuple(int(k) for k in key)
    rows = index.pools.get(key)
    if rows is None or len(rows) == 0:
        rows = index.pools[index.nearest_nonempty(key)]
    return int(rows[rng.integers(len(rows))])


def donate_many(index: DonorPoolIndex, keys: np.ndarray, rng) -> np.ndarray:
    """Vectorized :func:`donate` over rows of ``keys``."""
    keys = np.atleast_2d(np.asarray(keys)).astype(np.int64)
    out = np.empty(keys.shape[0], dtype=np.int64)
    cells = [tuple(row) for row in keys]
    by_cell = {}
    for i, cell in enumerate(cells):
        by_cell.setdefault(cell, []).append(i)
    for cell, members in by_cell.items():
        rows = index.pools.get(cell)
        if rows is None or len(rows) == 0:
            rows = index.pools[index.nearest_nonempty(cell)]
        out[members] = rows[rng.integers(len(rows), size=len(members))]
    return out


def hot_deck_fill(completed: CompletedDataset, key_vars, rng) -> CompletedDataset:
    """Fill every non-key variable of the unit nonrespondents from one donor row each.

    Key variables must already be imputed for the nonrespondents.
    """
    table = completed.source
    nr = np.flatnonzero(table.unit_flag)
    if nr.size == 0:
        return completed
    key_cols = [table.index(k) for k in key_vars]
    keys = completed.values[np.ix_(nr, key_cols)]
    if np.isnan(keys).any():
        raise ValueError("key variables of unit nonrespondents must be imputed first")
    index = build_pools(completed, key_vars)
    donors = donate_many(index, keys, rng)
    other = [j for j in range(len(table.schema)) if j not in key_cols]
    if not other:
        return completed
    block = completed.values[np.ix_(donors, other)]
    return completed.replace_rows(nr, block, other)
