"""Design-weighted estimation on completed data and Rubin's-rules pooling."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import CompletedDataset
from .margins import POISSON, total_variance

TOTAL = "total"
PROBABILITY = "probability"
MEAN = "mean"


@dataclass(frozen=True)
class EstimandSpec:
    """A population quantity.

    ``total`` with ``level`` set counts that level of ``variable``; without a
    level it sums a continuous variable. ``probability`` is the weighted share
    of rows meeting every condition in ``event`` among rows meeting ``given``
    (empty ``given`` gives a joint probability). ``mean`` is the weighted mean
    of ``variable`` among rows meeting ``given``.
    """

    name: str
    kind: str
    variable: str | None = None
    level: int | None = None
    event: tuple[tuple[str, int], ...] = ()
    given: tuple[tuple[str, int], ...] = ()

    def variables(self) -> set[str]:
        out = {v for v, _ in self.event} | {v for v, _ in self.given}
        if self.variable:
            out.add(self.variable)
        return out

    def validate(self, schema) -> None:
        specs = {v.name: v for v in schema}
        for name in self.variables():
            if name not in specs:
                raise ValueError(f"{self.name}: unknown variable {name!r}")
        for v, c in self.event + self.given:
            if c not in specs[v].codes:
                raise ValueError(f"{self.name}: level {c} not in {specs[v].codes}")
        if self.kind == TOTAL:
            var = specs[self.variable]
            if var.is_categorical and self.level not in var.codes:
                raise ValueError(f"{self.name}: total of a categorical needs a level")
        elif self.kind == MEAN:
            if specs[self.variable].is_categorical:
                raise ValueError(f"{self.name}: mean needs a continuous variable")
        elif self.kind != PROBABILITY:
            raise ValueError(f"unknown estimand kind {self.kind!r}")


def _conditions(text: str) -> tuple[tuple[str, int], ...]:
    out = []
    for part in text.split(","):
        name, _, level = part.partition("=")
        if not level:
            raise ValueError(f"expected VAR=LEVEL, got {part!r}")
        out.append((name.strip(), int(level)))
    return tuple(out)


def parse_estimand(text: str, name: str | None = None) -> EstimandSpec:
    """``T(X1=1)``, ``T(X5)``, ``P(X1=0|X2=0)``, ``P(X2=0,X3=0)``, ``E(A|V=1)``."""
    m = re.fullmatch(r"\s*([TPE])\((.*)\)\s*", text)
    if not m:
        raise ValueError(f"cannot parse estimand {text!r}")
    op, body = m.groups()
    name = name or text.strip()
    if op == "T":
        if "=" in body:
            (var, level), = _conditions(body)
            return EstimandSpec(name, TOTAL, variable=var, level=level)
        return EstimandSpec(name, TOTAL, variable=body.strip())
    head, _, tail = body.partition("|")
    given = _conditions(tail) if tail.strip() else ()
    if op == "P":
        return EstimandSpec(name, PROBABILITY, event=_conditions(head), given=given)
    return EstimandSpec(name, MEAN, variable=head.strip(), given=given)


def _indicator(values, index, conditions) -> np.ndarray:
    out = np.ones(values.shape[0], dtype=bool)
    for v, c in conditions:
        out &= values[:, index[v]] == c
    return out


def ht_estimate(
    values: np.ndarray,
    schema,
    weights: np.ndarray,
    estimand: EstimandSpec,
    design: str = POISSON,
) -> tuple[float, float]:
    """Point estimate and variance estimate on one complete data matrix.

    Ratios use the linearized variance: the variance of the total of
    ``(y_i - R d_i) / sum(w d)`` under the same design.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    index = {v.name: j for j, v in enumerate(schema)}
    if estimand.kind == TOTAL:
        col = values[:, index[estimand.variable]]
        z = col if estimand.level is None else (col == estimand.level).astype(float)
        return float(np.sum(weights * z)), total_variance(weights, z, design)
    d = _indicator(values, index, estimand.given).astype(float)
    if estimand.kind == PROBABILITY:
        y = d * _indicator(values, index, estimand.event)
    else:
        y = d * values[:, index[estimand.variable]]
    denom = float(np.sum(weights * d))
    if denom <= 0:
        return math.nan, math.nan
    ratio = float(np.sum(weights * y)) / denom
    resid = (y - ratio * d) / denom
    return ratio, total_variance(weights, resid, design)


def ht_total(
    completed: CompletedDataset, weights, estimand: EstimandSpec, design: str = POISSON
) -> tuple[float, float]:
    """:func:`ht_estimate` on a completed dataset (every row must be complete)."""
    if not completed.is_complete():
        raise ValueError("completed dataset still has missing cells")
    return ht_estimate(completed.values, completed.schema, weights, estimand, design)


@dataclass(frozen=True)
class PooledEstimate:
    qbar: float
    ubar: float
    b: float
    total_var: float
    df: float
    ci_low: float
    ci_high: float
    n_imputations: int

    @property
    def se(self) -> float:
        return math.sqrt(self.total_var)

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


def pool(estimates: Sequence[tuple[float, float]], alpha: float = 0.05) -> PooledEstimate:
    """Combine ``(q_l, u_l)`` pairs with Rubin's rules.

    ``df = (L-1)(1 + ubar / ((1 + 1/L) b))^2``, infinite when ``b == 0``.
    """
    arr = np.asarray(estimates, dtype=float).reshape(-1, 2)
    L = arr.shape[0]
    if L < 2:
        raise ValueError("pooling needs at least two completed datasets")
    q, u = arr[:, 0], arr[:, 1]
    qbar = float(q.mean())
    ubar = float(u.mean())
    b = float(q.var(ddof=1))
    total = ubar + (1.0 + 1.0 / L) * b
    if not np.isfinite(qbar):
        return PooledEstimate(math.nan, ubar, b, math.nan, math.nan, math.nan, math.nan, L)
    df = math.inf
    if b > 0:
        r = ubar / ((1.0 + 1.0 / L) * b)
        if r < 1e150:  # beyond this df overflows and t is normal anyway
            df = (L - 1) * (1.0 + r) ** 2
    if math.isfinite(df):
        crit = float(stats.t.ppf(1 - alpha / 2, df))
    else:
        crit = float(stats.norm.ppf(1 - alpha / 2))
    half = crit * math.sqrt(total)
    return PooledEstimate(qbar, ubar, b, total, df, qbar - half, qbar + half, L)


def estimate_all(
    datasets: Sequence[CompletedDataset],
    weights: np.ndarray,
    estimands: Sequence[EstimandSpec],
    design: str = POISSON,
) -> dict[str, list[tuple[float, float]]]:
    """Per-estimand list of per-dataset ``(estimate, variance)``."""
    out = {e.name: [] for e in estimands}
    for ds in datasets:
        for e in estimands:
            out[e.name].append(ht_total(ds, weights, e, design))
    return out


def pool_all(
    datasets: Sequence[CompletedDataset],
    weights: np.ndarray,
    estimands: Sequence[EstimandSpec],
    design: str = POISSON,
) -> dict[str, PooledEstimate]:
    per = estimate_all(datasets, weights, estimands, design)
    return {name: pool(vals) for name, vals in per.items()}


def table2_estimands(variables=("X1", "X2", "X3", "X4", "X5", "X6"), continuous=("X5", "X6")):
    """Population totals in the simulation study: level 1 of binaries, sums of continuous."""
    return [
        EstimandSpec(f"T_{v}", TOTAL, variable=v, level=None if v in continuous else 1)
        for v in variables
    ]


def table3_estimands():
    """Conditional and joint probabilities reported for the simulation study."""
    rows = [
        "P(X1=0|X2=0)", "P(X1=0|X2=1)", "P(X2=0|X1=0)", "P(X2=0|X1=1)",
        "P(X4=0|X3=0)", "P(X4=0|X3=1)", "P(X3=0|X4=0)", "P(X3=0|X4=1)",
        "P(X2=0,X3=0)", "P(X2=1,X3=0)", "P(X2=0,X3=1)", "P(X2=1,X3=1)",
    ]
    for target in ("X3", "X4"):
        for a in (0, 1):
            for b in (0, 1):
                rows.append(f"P({target}=0|X1={a},X2={b})")
    return [parse_estimand(r, name=_label(r)) for r in rows]


def _label(text: str) -> str:
    return text[2:-1]
