"""Survey data model: variable schema, survey tables, auxiliary margins.

Categorical variables are stored as integer codes in a float matrix. Binary
variables use codes ``{0, 1}``; categorical variables with ``m`` levels use
``{1, ..., m}``. Missing cells are tracked by an explicit boolean mask; the
underlying value of a masked cell is NaN but the mask is authoritative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BINARY = "binary"
CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
KINDS = (BINARY, CATEGORICAL, CONTINUOUS)


class SchemaError(ValueError):
    """Raised for malformed schemas, files, or tables."""


@dataclass(frozen=True)
class VariableSpec:
    """One survey variable.

    Parameters
    ----------
    name : str
        Column name, unique within a schema.
    kind : {"binary", "categorical", "continuous"}
    levels : tuple of str
        Level labels. Binary variables default to ``("0", "1")``; categorical
        variables need at least two labels.
    has_margin : bool
        Whether known population totals exist for this variable.
    """

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    has_margin: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == BINARY:
            if not self.levels:
                object.__setattr__(self, "levels", ("0", "1"))
            if len(self.levels) != 2:
                raise SchemaError(f"{self.name}: binary variables have exactly 2 levels")
        elif self.kind == CATEGORICAL:
            if len(self.levels) < 2:
                raise SchemaError(f"{self.name}: categorical variables need m >= 2 levels")
        elif self.levels:
            raise SchemaError(f"{self.name}: continuous variables take no levels")
        object.__setattr__(self, "levels", tuple(str(lv) for lv in self.levels))

    @property
    def is_categorical(self) -> bool:
        return self.kind != CONTINUOUS

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def codes(self) -> tuple[int, ...]:
        """Stored codes of the levels, in level order."""
        if self.kind == BINARY:
            return (0, 1)
        if self.kind == CATEGORICAL:
            return tuple(range(1, len(self.levels) + 1))
        return ()

    @property
    def base_code(self) -> int:
        return self.codes[0]

    def code_index(self, values: np.ndarray) -> np.ndarray:
        """Map stored codes to 0-based level indices."""
        return np.asarray(values, dtype=float).astype(np.int64) - self.base_code


def check_schema(schema: Sequence[VariableSpec]) -> tuple[VariableSpec, ...]:
    schema = tuple(schema)
    names = [v.name for v in schema]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise SchemaError(f"duplicate variable names: {sorted(dupes)}")
    if not schema:
        raise SchemaError("schema has no variables")
    return schema


@dataclass(frozen=True, eq=False)
class SurveyTable:
    """Immutable rectangular survey data with unit and item nonresponse.

    Attributes
    ----------
    schema : tuple of VariableSpec
    values : ndarray of shape (n_rows, n_vars)
        Codes or real values; NaN where ``item_mask`` is set.
    item_mask : ndarray of bool, shape (n_rows, n_vars)
        True marks a missing cell.
    unit_flag : ndarray of bool, shape (n_rows,)
        True marks a unit nonrespondent (every cell missing).
    design_weight : ndarray of shape (n_rows,)
        Positive weights. Unit nonrespondents may carry NaN when their
        design weights are unknown.
    population_size : float or None
    """

    schema: tuple[VariableSpec, ...]
    values: np.ndarray
    item_mask: np.ndarray
    unit_flag: np.ndarray
    design_weight: np.ndarray
    population_size: float | None = None
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        schema = check_schema(self.schema)
        values = np.array(self.values, dtype=float, copy=True)
        mask = np.array(self.item_mask, dtype=bool, copy=True)
        unit = np.array(self.unit_flag, dtype=bool, copy=True).reshape(-1)
        weight = np.array(self.design_weight, dtype=float, copy=True).reshape(-1)
        n = unit.shape[0]
        if values.ndim != 2 or values.shape != (n, len(schema)):
            raise SchemaError(f"values must have shape ({n}, {len(schema)}), got {values.shape}")
        if mask.shape != values.shape or weight.shape != (n,):
            raise SchemaError("column lengths disagree")
        if np.any(unit & ~mask.all(axis=1)):
            raise SchemaError("unit nonrespondents must have every item missing")
        values[mask] = np.nan
        if np.any(np.isnan(values[~mask])):
            raise SchemaError("unmasked cells must hold finite values")
        for j, var in enumerate(schema):
            if var.is_categorical:
                col = values[~mask[:, j], j]
                bad = ~np.isin(col, var.codes)
                if bad.any():
                    raise SchemaError(
                        f"{var.name}: level {col[bad][0]:g} out of range {var.codes}"
                    )
        known = ~np.isnan(weight)
        if np.any(weight[known] <= 0):
            raise SchemaError("design weights must be strictly positive")
        if np.any(~known & ~unit):
            raise SchemaError("unit respondents need a design weight")
        for arr in (values, mask, unit, weight):
            arr.setflags(write=False)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "item_mask", mask)
        object.__setattr__(self, "unit_flag", unit)
        object.__setattr__(self, "design_weight", weight)
        object.__setattr__(self, "_index", {v.name: j for j, v in enumerate(schema)})

    @property
    def n_rows(self) -> int:
        return self.unit_flag.shape[0]

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.schema]

    @property
    def n_unit_nonrespondents(self) -> int:
        return int(self.unit_flag.sum())

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    def variable(self, name: str) -> VariableSpec:
        return self.schema[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def missing(self, name: str) -> np.ndarray:
        return self.item_mask[:, self.index(name)]

    def item_missing_rate(self, name: str) -> float:
        """Share of unit respondents missing ``name``."""
        resp = ~self.unit_flag
        if not resp.any():
            return 0.0
        return float(self.missing(name)[resp].mean())

    def replace(self, **changes) -> "SurveyTable":
        kwargs = dict(
            schema=self.schema,
            values=self.values,
            item_mask=self.item_mask,
            unit_flag=self.unit_flag,
            design_weight=self.design_weight,
            population_size=self.population_size,
        )
        kwargs.update(changes)
        return SurveyTable(**kwargs)

    def take(self, rows) -> "SurveyTable":
        """Row subset (boolean mask or index array)."""
        return self.replace(
            values=self.values[rows],
            item_mask=self.item_mask[rows],
            unit_flag=self.unit_flag[rows],
            design_weight=self.design_weight[rows],
        )


@dataclass(frozen=True)
class MarginEntry:
    """Known population total of one level; ``variance`` None means calibrate."""

    variable: str
    level: int
    total: float
    variance: float | None = None


@dataclass(frozen=True)
class AuxiliaryMargins:
    entries: tuple[MarginEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def variables(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.variable not in seen:
                seen.append(e.variable)
        return seen

    def for_variable(self, name: str) -> list[MarginEntry]:
        return [e for e in self.entries if e.variable == name]

    def with_variances(self, variances: dict[tuple[str, int], float], overwrite=False):
        """Copy with variances filled from ``{(variable, level): V}``."""
        out = []
        for e in self.entries:
            key = (e.variable, e.level)
            if key in variances and (overwrite or e.variance is None):
                e = MarginEntry(e.variable, e.level, e.total, float(variances[key]))
            out.append(e)
        return AuxiliaryMargins(tuple(out))


def validate_margins(table: SurveyTable, margins: AuxiliaryMargins) -> list[str]:
    """Return every violation of the margin invariants (empty list when ok)."""
    problems = []
    N = table.population_size
    for name in margins.variables:
        try:
            var = table.variable(name)
        except KeyError:
            problems.append(f"{name}: not in schema")
            continue
        if not var.is_categorical:
            problems.append(f"{name}: margins require a categorical variable")
            continue
        if not var.has_margin:
            problems.append(f"{name}: variable not marked has_margin")
        entries = margins.for_variable(name)
        levels = [e.level for e in entries]
        if len(set(levels)) != len(levels):
            problems.append(f"{name}: duplicate levels in margins")
        for e in entries:
            if e.level not in var.codes:
                problems.append(f"{name}: level {e.level} not in {var.codes}")
            if e.total < 0:
                problems.append(f"{name}={e.level}: negative total")
            if e.variance is not None and not e.variance > 0:
                problems.append(f"{name}={e.level}: variance must be positive")
        if len(set(levels)) < var.n_levels - 1:
            problems.append(f"{name}: need totals for at least m-1 = {var.n_levels - 1} levels")
        if N is not None and sum(e.total for e in entries) > N * (1 + 1e-12):
            problems.append(f"{name}: totals exceed population size {N:g}")
    return problems


def _parse_cell(var: VariableSpec, raw: str, row: int) -> float:
    try:
        x = float(raw)
    except ValueError:
        raise SchemaError(f"row {row}, {var.name}: cannot parse {raw!r}") from None
    if var.is_categorical and x not in var.codes:
        raise SchemaError(f"row {row}, {var.name}: level {raw!r} out of range {var.codes}")
    if not math.isfinite(x):
        raise SchemaError(f"row {row}, {var.name}: non-finite value {raw!r}")
    return x


def load_table(
    path,
    schema: Sequence[VariableSpec],
    missing_token: str = "",
    weight_column: str | None = "w",
    population_size: float | None = None,
) -> SurveyTable:
    """Read a comma-delimited survey file.

    A row whose survey variables are all ``missing_token`` is a unit
    nonrespondent. Its weight cell may also be missing.
    """
    schema = check_schema(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        known = {v.name for v in schema} | ({weight_column} if weight_column else set())
        unknown = [h for h in header if h not in known]
        if unknown:
            raise SchemaError(f"{path}: unknown columns {unknown}")
        absent = [v.name for v in schema if v.name not in header]
        if absent:
            raise SchemaError(f"{path}: missing columns {absent}")
        if weight_column and weight_column not in header:
            raise SchemaError(f"{path}: missing weight column {weight_column!r}")
        pos = {h: i for i, h in enumerate(header)}
        values, mask, weights = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields")
            vrow, mrow = [], []
            for var in schema:
                raw = rec[pos[var.name]].strip()
                if raw == missing_token:
                    vrow.append(np.nan)
                    mrow.append(True)
                else:
                    vrow.append(_parse_cell(var, raw, lineno))
                    mrow.append(False)
            if weight_column:
                raw = rec[pos[weight_column]].strip()
                if raw == missing_token:
                    w = np.nan
                else:
                    try:
                        w = float(raw)
                    except ValueError:
                        raise SchemaError(f"{path}:{lineno}: cannot parse weight {raw!r}") from None
                    if not w > 0:
                        raise SchemaError(f"{path}:{lineno}: nonpositive weight {raw!r}")
            else:
                w = 1.0
            values.append(vrow)
            mask.append(mrow)
            weights.append(w)
    k = len(schema)
    values = np.array(values, dtype=float).reshape(-1, k)
    mask = np.array(mask, dtype=bool).reshape(-1, k)
    unit = mask.all(axis=1)
    weights = np.array(weights, dtype=float)
    if np.any(np.isnan(weights) & ~unit):
        raise SchemaError(f"{path}: unit respondents need a weight")
    return SurveyTable(schema, values, mask, unit, weights, population_size)


def format_value(var: VariableSpec, x: float) -> str:
    if var.is_categorical:
        return str(int(x))
    return repr(float(x))


def write_rows(
    path,
    schema: Sequence[VariableSpec],
    values: np.ndarray,
    mask: np.ndarray,
    weights: np.ndarray | None,
    missing_token: str = "",
    weight_column: str | None = "w",
) -> None:
    header = [v.name for v in schema]
    if weight_column and weights is not None:
        header.append(weight_column)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(values.shape[0]):
            rec = [
                missing_token if mask[i, j] else format_value(var, values[i, j])
                for j, var in enumerate(schema)
            ]
            if weight_column and weights is not None:
                rec.append(missing_token if np.isnan(weights[i]) else repr(float(weights[i])))
            out.writerow(rec)


def write_table(table: SurveyTable, path, missing_token: str = "", weight_column="w") -> None:
    """Inverse of :func:`load_table` up to numeric formatting."""
    write_rows(
        path,
        table.schema,
        table.values,
        table.item_mask,
        table.design_weight,
        missing_token,
        weight_column,
    )


def make_table(
    schema: Sequence[VariableSpec],
    columns: dict[str, Iterable],
    weights=None,
    population_size=None,
) -> SurveyTable:
    """Build a table from per-variable columns, ``None``/NaN meaning missing."""
    schema = check_schema(schema)
    cols = []
    for var in schema:
        col = [np.nan if x is None else float(x) for x in columns[var.name]]
        cols.append(col)
    values = np.array(cols, dtype=float).T.reshape(-1, len(schema))
    mask = np.isnan(values)
    n = values.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    return SurveyTable(schema, values, mask, mask.all(axis=1), w, population_size)


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    """One imputed copy of a :class:`SurveyTable`.

    ``values`` covers every row of ``source``; rows not yet completed (for
    example unit nonrespondents after the item stage) still hold NaN.
    ``imputed`` marks the cells that were filled by imputation.
    """

    source: SurveyTable
    values: np.ndarray
    imputed: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        imputed = np.array(self.imputed, dtype=bool, copy=True)
        if values.shape != self.source.values.shape or imputed.shape != values.shape:
            raise SchemaError("completed values must match the source shape")
        observed = ~self.source.item_mask
        if not np.array_equal(values[observed], self.source.values[observed]):
            raise SchemaError("observed cells changed during imputation")
        values.setflags(write=False)
        imputed.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "imputed", imputed)

    @property
    def schema(self):
        return self.source.schema

    @property
    def complete_rows(self) -> np.ndarray:
        return ~np.isnan(self.values).any(axis=1)

    def is_complete(self) -> bool:
        return bool(self.complete_rows.all())

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.source.index(name)]

    def replace_rows(self, rows, block: np.ndarray, columns=None) -> "CompletedDataset":
        """Copy with ``values[rows, columns]`` set to ``block`` and marked imputed."""
        values = self.values.copy()
        imputed = self.imputed.copy()
        cols = slice(None) if columns is None else np.asarray(columns)
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        values[np.ix_(rows, np.arange(values.shape[1])[cols])] = block
        imputed[np.ix_(rows, np.arange(values.shape[1])[cols])] = True
        return CompletedDataset(self.source, values, imputed)

    def to_table(self, weights=None) -> SurveyTable:
        """The completed data as a table, optionally with new (analysis) weights."""
        mask = np.isnan(self.values)
        changes = {"values": self.values, "item_mask": mask, "unit_flag": mask.all(axis=1)}
        if weights is not None:
            changes["design_weight"] = np.asarray(weights, dtype=float)
        return self.source.replace(**changes)


def empty_completion(table: SurveyTable) -> CompletedDataset:
    """Starting point: observed cells only."""
    return CompletedDataset(table, table.values, np.zeros_like(table.item_mask))
