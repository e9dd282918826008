"""Intercept matching for unit nonrespondents, plausible totals, and weights.

For every margin variable, in chain order, a plausible complete-data total is
drawn around the known population total. The share of unit nonrespondents
that must take each level for the completed-data Horvitz-Thompson total to hit
that draw determines the unit-nonresponse shift ``theta``; nonrespondents are
then drawn from the respondent-fitted model with ``theta`` added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dataset import AuxiliaryMargins, CompletedDataset, SurveyTable, VariableSpec
from .glm import GLM, DesignSpec, GlmError, design_matrix, family_for, response_vector

EPS = 1e-3
POISSON = "poisson"
PPS = "pps"
DESIGN_KNOWN = "design"
ADJUSTED = "adjusted"


class WeightError(ValueError):
    pass


@dataclass(frozen=True)
class ChainLink:
    variable: str
    design: DesignSpec


@dataclass(frozen=True)
class MarginChain:
    """Ordered margin-variable models for unit nonrespondents.

    Each link's design may use earlier chain variables and the analysis
    weight. The unit-nonresponse effect enters only as the intercept shift
    solved by :func:`solve_theta`, never in interactions.
    """

    links: tuple[ChainLink, ...]

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def variables(self) -> list[str]:
        return [link.variable for link in self.links]

    def validate(self, schema) -> None:
        specs = {v.name: v for v in schema}
        seen = []
        for link in self.links:
            var = specs.get(link.variable)
            if var is None or not var.is_categorical:
                raise ValueError(f"chain variable {link.variable!r} must be categorical")
            if link.design.response != link.variable:
                raise ValueError(f"{link.variable}: design response mismatch")
            for t in link.design.terms:
                if t.kind == "missing":
                    raise ValueError(f"{link.variable}: response indicators are undefined for unit nonrespondents")
                late = t.variables() - set(seen)
                if late:
                    raise ValueError(
                        f"{link.variable}: term {t} uses {sorted(late)}, not imputed earlier in the chain"
                    )
            link.design.validate(schema)
            seen.append(link.variable)

    @classmethod
    def sequential(cls, variables, extra_terms=None, schema=None):
        """Each variable conditions on main effects of all earlier ones.

        ``extra_terms`` maps a variable to additional term strings, e.g.
        ``{"V": ["S:E"]}`` for sex-by-race interactions.
        """
        links = []
        extra_terms = extra_terms or {}
        for i, name in enumerate(variables):
            spec = DesignSpec.from_strings(
                name,
                list(variables[:i]) + list(extra_terms.get(name, [])),
                schema,
            )
            links.append(ChainLink(name, spec))
        return cls(tuple(links))


@dataclass(frozen=True)
class PlausibleTotalDraw:
    """Drawn totals and the implied level shares among unit nonrespondents."""

    variable: str
    levels: tuple[int, ...]
    totals: np.ndarray
    counts: np.ndarray
    proportions: np.ndarray


def build_weights(table: SurveyTable, mode: str = DESIGN_KNOWN, population_size=None) -> np.ndarray:
    """Analysis weights for every row, including unit nonrespondents.

    ``design``: respondents keep their design weights and each unit
    nonrespondent gets an equal share of ``N`` minus the respondents' total.
    ``adjusted``: respondents' nonresponse-adjusted weights are scaled by the
    response rate and each nonrespondent gets the mean adjusted weight, which
    preserves the weight total.
    """
    unit = table.unit_flag
    resp_w = table.design_weight[~unit]
    if np.isnan(resp_w).any():
        raise WeightError("unit respondents need weights")
    n = table.n_rows
    n_u = int(unit.sum())
    out = np.array(table.design_weight, dtype=float)
    if mode == DESIGN_KNOWN:
        N = table.population_size if population_size is None else population_size
        if N is None:
            raise WeightError("design-known weights need the population size N")
        if n_u == 0:
            return out
        remaining = N - resp_w.sum()
        if remaining <= 0:
            raise WeightError(
                f"respondent weights sum to {resp_w.sum():.6g} >= N = {N:.6g}; "
                "weights look nonresponse-adjusted, use mode='adjusted'"
            )
        out[unit] = remaining / n_u
        return out
    if mode == ADJUSTED:
        out[~unit] = resp_w * (1.0 - n_u / n)
        out[unit] = resp_w.sum() / n
        return out
    raise ValueError(f"unknown weight mode {mode!r}")


def _level_indicator(values: np.ndarray, level) -> np.ndarray:
    return (values == level).astype(float)


def total_variance(weights, z, design=POISSON) -> float:
    """Variance estimate of the Horvitz-Thompson total of ``z``."""
    weights = np.asarray(weights, dtype=float)
    z = np.asarray(z, dtype=float)
    if design == POISSON:
        return float(np.sum(weights * (weights - 1.0) * z * z))
    if design == PPS:
        n = weights.size
        if n < 2:
            return 0.0
        wz = weights * z
        return float(n / (n - 1) * np.sum((wz - wz.sum() / n) ** 2))
    raise ValueError(f"unknown design {design!r}")


def calibrate_v(
    completed: CompletedDataset,
    margins: AuxiliaryMargins,
    weights: np.ndarray,
    design: str | None = POISSON,
    overwrite: bool = False,
) -> AuxiliaryMargins:
    """Fill margin variances with the design-based variance of each level total."""
    if design is None:
        raise ValueError("a sampling design ('poisson' or 'pps') is required")
    if not completed.is_complete():
        raise ValueError("calibration needs every row completed")
    found = {}
    for e in margins.entries:
        z = _level_indicator(completed.column(e.variable), e.level)
        found[(e.variable, e.level)] = total_variance(weights, z, design)
    return margins.with_variances(found, overwrite=overwrite)


def draw_targets(
    var: VariableSpec,
    margins: AuxiliaryMargins,
    completed_column: np.ndarray,
    weights: np.ndarray,
    unit_flag: np.ndarray,
    rng,
    population_size=None,
    eps: float = EPS,
) -> PlausibleTotalDraw:
    """Draw plausible totals and the nonrespondent level shares they imply.

    Totals are drawn independently per level for ``m - 1`` levels; the
    remaining level takes ``N`` minus their sum. ``N`` defaults to the
    weight total when the population size is unknown.
    """
    unit_flag = np.asarray(unit_flag, dtype=bool)
    n_u = int(unit_flag.sum())
    if n_u == 0:
        raise ValueError("no unit nonrespondents: skip intercept matching")
    entries = {e.level: e for e in margins.for_variable(var.name)}
    codes = var.codes
    if len(entries) == len(codes):
        drawn = [c for c in codes if c != codes[0]]
    elif len(entries) == len(codes) - 1:
        drawn = [c for c in codes if c in entries]
    else:
        raise ValueError(f"{var.name}: intercept matching needs totals for m-1 levels")
    remainder = [c for c in codes if c not in drawn][0]
    N = float(np.sum(weights)) if population_size is None else float(population_size)
    totals = np.empty(len(codes))
    for i, c in enumerate(codes):
        if c == remainder:
            continue
        e = entries[c]
        if e.variance is None:
            raise ValueError(f"{var.name}={c}: variance not set (calibrate first)")
        totals[i] = rng.normal(e.total, np.sqrt(max(e.variance, 0.0)))
    r = codes.index(remainder)
    totals[r] = N - (totals.sum() - totals[r])
    resp = ~unit_flag
    resp_counts = np.array(
        [np.sum(weights[resp] * (completed_column[resp] == c)) for c in codes]
    )
    mean_nr_weight = weights[unit_flag].sum() / n_u
    counts = (totals - resp_counts) / mean_nr_weight
    props = np.clip(counts / n_u, eps, 1.0 - eps)
    props = props / props.sum()
    return PlausibleTotalDraw(var.name, tuple(codes), totals, counts, props)


def solve_theta(X_nonresp: np.ndarray, coef: np.ndarray, proportions: np.ndarray) -> np.ndarray:
    """Shift per non-base level making the mean linear predictor hit the target log-odds.

    ``coef`` is the flat coefficient vector (blocks for levels 2..m) and
    ``proportions`` the target shares over all m levels, base level first.
    """
    proportions = np.asarray(proportions, dtype=float)
    if np.any(proportions <= 0) or np.any(proportions >= 1):
        raise ValueError("target proportions must lie strictly inside (0, 1)")
    X = np.atleast_2d(np.asarray(X_nonresp, dtype=float))
    B = np.asarray(coef, dtype=float).reshape(len(proportions) - 1, X.shape[1])
    mean_eta = (X @ B.T).mean(axis=0)
    return np.log(proportions[1:] / proportions[0]) - mean_eta


def _draw_levels(eta: np.ndarray, codes, rng) -> np.ndarray:
    """Draw codes from baseline-category linear predictors ``eta`` (n, m-1)."""
    codes = np.asarray(codes, dtype=float)
    if eta.shape[1] == 1:
        return codes[(rng.random(eta.shape[0]) < expit(eta[:, 0])).astype(int)]
    full = np.column_stack([np.zeros(eta.shape[0]), eta])
    full -= full.max(axis=1, keepdims=True)
    probs = np.exp(full)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(eta.shape[0]) * cum[:, -1]
    return codes[np.minimum((cum < u[:, None]).sum(axis=1), len(codes) - 1)]


def impute_margin_vars(
    completed: CompletedDataset,
    chain: MarginChain,
    margins: AuxiliaryMargins | None,
    weights: np.ndarray,
    rng,
    match: bool = True,
    population_size=None,
    trace: list | None = None,
) -> CompletedDataset:
    """Impute the chain variables for every unit nonrespondent.

    With ``match=False`` the unit-nonresponse shift is fixed at zero, i.e.
    nonrespondents are drawn from the respondents' models.
    """
    table = completed.source
    unit = table.unit_flag
    if not unit.any():
        return completed
    resp = ~unit
    values = completed.values.copy()
    if np.isnan(values[resp]).any():
        raise ValueError("respondents must be completed for item nonresponse first")
    if population_size is None:
        population_size = table.population_size
    for link in chain.links:
        j = table.index(link.variable)
        var = table.schema[j]
        X_resp = design_matrix(link.design, table.schema, values[resp], weights=weights[resp])
        model = GLM(family=family_for(var))
        try:
            model.fit(X_resp, response_vector(var, values[resp, j]), n_levels=var.n_levels)
        except GlmError as exc:
            raise GlmError(f"margin model for {link.variable!r} failed: {exc}") from exc
        coef = model.draw_coefficients(rng)
        X_nr = design_matrix(link.design, table.schema, values[unit], weights=weights[unit])
        eta = X_nr @ coef.reshape(-1, X_nr.shape[1]).T
        if match:
            target = draw_targets(
                var, margins, values[:, j], weights, unit, rng, population_size
            )
            theta = solve_theta(X_nr, coef, target.proportions)
            eta = eta + theta
            if trace is not None:
                trace.append((target, theta))
        values[unit, j] = _draw_levels(eta, var.codes, rng)
    cols = [table.index(v) for v in chain.variables]
    return completed.replace_rows(unit, values[np.ix_(unit, cols)], cols)


def default_chain(schema, margins: AuxiliaryMargins) -> MarginChain:
    return MarginChain.sequential(margins.variables, schema=schema)
