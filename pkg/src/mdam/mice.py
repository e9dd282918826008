"""Multiple imputation by chained equations for item nonresponse.

Only unit respondents are imputed here; unit nonrespondent rows come back
untouched (all NaN) and are completed later by margin matching and the hot
deck.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_positive_int, check_rng, check_table
from .dataset import CONTINUOUS, CompletedDataset, SurveyTable
from .glm import (
    LINEAR,
    LOGISTIC,
    MULTINOMIAL,
    GLM,
    DesignSpec,
    GlmError,
    Term,
    design_matrix,
    response_vector,
)

PMM = "pmm"
METHODS = (LOGISTIC, MULTINOMIAL, LINEAR, PMM)


@dataclass
class MiceConfig:
    """Settings for :func:`run_mice`.

    ``methods`` and ``predictors`` map variable names to an imputation
    method and a list of term strings; unspecified variables get the
    defaults (logistic / multinomial / predictive mean matching, main effects
    of every other variable).
    """

    n_datasets: int = 5
    cycles: int = 5
    visit_sequence: tuple[str, ...] | None = None
    methods: dict[str, str] = field(default_factory=dict)
    predictors: dict[str, list] = field(default_factory=dict)
    pmm_donors: int = 5
    include_response_indicators: bool = False


def default_method(var) -> str:
    if var.kind == CONTINUOUS:
        return PMM
    return LOGISTIC if var.n_levels == 2 else MULTINOMIAL


def default_visit_sequence(table: SurveyTable) -> list[str]:
    """Variables with item nonresponse, from lowest to highest missing rate."""
    rates = [(table.item_missing_rate(v.name), j, v.name) for j, v in enumerate(table.schema)]
    return [name for rate, _, name in sorted(rates) if rate > 0]


def impute_pmm(model: GLM, X_target, X_donor, y_donor, k: int, rng, coef=None) -> np.ndarray:
    """Predictive mean matching.

    Targets are predicted with ``coef`` (a posterior-style draw, or the MLE
    when None) and donors with the MLE. Each target takes the observed value
    of one donor drawn uniformly from the ``k`` donors with the closest
    predicted means; equal distances are broken at random.
    """
    y_donor = np.asarray(y_donor)
    nd = y_donor.shape[0]
    if nd == 0:
        raise ValueError("predictive mean matching needs at least one donor")
    k = min(check_positive_int(k, "k"), nd)
    target = model.predict(X_target, coef)
    donor = model.predict(X_donor)
    # random permutation before a stable sort randomizes order within ties
    perm = rng.permutation(nd)
    order = perm[np.argsort(donor[perm], kind="stable")]
    ranked = donor[order]
    width = min(2 * k, nd)
    pos = np.searchsorted(ranked, target)
    start = np.clip(pos - k, 0, nd - width)
    window = start[:, None] + np.arange(width)
    dist = np.abs(ranked[window] - target[:, None])
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    pick = nearest[np.arange(len(target)), rng.integers(0, k, size=len(target))]
    return y_donor[order[window[np.arange(len(target)), pick]]]


def _draw_categorical(probs: np.ndarray, rng) -> np.ndarray:
    """Row-wise categorical draws, returning level indices."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


class MiceImputer(BaseEstimator):
    """Chained-equations imputer for item nonresponse among unit respondents.

    Parameters
    ----------
    n_datasets : int
        Number of completed datasets ``L``; each comes from its own chain.
    cycles : int
        Sweeps through the visit sequence per chain.
    visit_sequence : sequence of str, optional
        Defaults to increasing item-missing rate.
    methods : dict, optional
        Per-variable method: ``logistic``, ``multinomial``, ``linear`` or ``pmm``.
    predictors : dict, optional
        Per-variable list of term strings (see :func:`mdam.glm.parse_term`).
    pmm_donors : int
    include_response_indicators : bool
        Add the item-missing indicators of the other incomplete variables as
        predictors.
    random_state : int, Generator or None
    """

    def __init__(
        self,
        n_datasets=5,
        cycles=5,
        visit_sequence=None,
        methods=None,
        predictors=None,
        pmm_donors=5,
        include_response_indicators=False,
        random_state=None,
    ):
        self.n_datasets = n_datasets
        self.cycles = cycles
        self.visit_sequence = visit_sequence
        self.methods = methods
        self.predictors = predictors
        self.pmm_donors = pmm_donors
        self.include_response_indicators = include_response_indicators
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: MiceConfig, random_state=None):
        return cls(
            n_datasets=config.n_datasets,
            cycles=config.cycles,
            visit_sequence=config.visit_sequence,
            methods=config.methods,
            predictors=config.predictors,
            pmm_donors=config.pmm_donors,
            include_response_indicators=config.include_response_indicators,
            random_state=random_state,
        )

    def fit(self, table, y=None):
        """Resolve the visit sequence, methods and per-variable designs."""
        table = check_table(table)
        check_positive_int(self.n_datasets, "n_datasets")
        check_positive_int(self.cycles, "cycles", minimum=0)
        check_positive_int(self.pmm_donors, "pmm_donors")
        resp = ~table.unit_flag
        incomplete = [
            v.name for j, v in enumerate(table.schema) if table.item_mask[resp, j].any()
        ]
        if self.visit_sequence is None:
            visit = default_visit_sequence(table)
        else:
            visit = list(self.visit_sequence)
            extra = [n for n in incomplete if n not in visit]
            dupes = {n for n in visit if visit.count(n) > 1}
            if extra or dupes:
                raise ValueError(
                    f"visit sequence must list each incomplete variable once "
                    f"(absent: {extra}, repeated: {sorted(dupes)})"
                )
        for name in visit:
            j = table.index(name)
            if not np.any(~table.item_mask[resp, j]):
                raise ValueError(f"{name}: no observed values among unit respondents")
        methods = dict(self.methods or {})
        predictors = dict(self.predictors or {})
        designs = {}
        for name in visit:
            var = table.variable(name)
            method = methods.get(name) or default_method(var)
            if method not in METHODS:
                raise ValueError(f"{name}: unknown method {method!r}")
            if var.kind == CONTINUOUS and method not in (LINEAR, PMM):
                raise ValueError(f"{name}: {method} cannot impute a continuous variable")
            if var.kind != CONTINUOUS and method in (LINEAR, PMM):
                raise ValueError(f"{name}: {method} cannot impute a categorical variable")
            if method == LOGISTIC and var.n_levels != 2:
                raise ValueError(f"{name}: logistic needs a binary variable")
            methods[name] = method
            if name in predictors:
                spec = DesignSpec.from_strings(name, predictors[name], table.schema)
            else:
                terms = [Term("main", var=v.name) for v in table.schema if v.name != name]
                if self.include_response_indicators:
                    terms += [Term("missing", var=o) for o in incomplete if o != name]
                spec = DesignSpec(name, tuple(terms))
            spec.validate(table.schema)
            if spec.uses_missing_indicator(name):
                raise ValueError(f"{name}: own response indicator is constant on targets")
            designs[name] = spec
        self.visit_sequence_ = visit
        self.methods_ = {n: methods[n] for n in visit}
        self.designs_ = designs
        self.n_features_in_ = len(table.schema)
        return self

    def transform(self, table) -> list[CompletedDataset]:
        """Run ``n_datasets`` independent chains."""
        check_fitted(self, "designs_")
        table = check_table(table)
        rng = check_rng(self.random_state)
        streams = rng.spawn(self.n_datasets)
        return [self._chain(table, s) for s in streams]

    def fit_transform(self, table, y=None):
        return self.fit(table).transform(table)

    def _chain(self, table: SurveyTable, rng, cycles=None) -> CompletedDataset:
        resp = np.flatnonzero(~table.unit_flag)
        values = table.values[resp].copy()
        mask = table.item_mask[resp]
        weights = table.design_weight[resp]
        for name in self.visit_sequence_:
            j = table.index(name)
            miss = mask[:, j]
            if miss.any():
                observed = values[~miss, j]
                values[miss, j] = observed[rng.integers(0, observed.size, size=miss.sum())]
        warm = {}
        for _ in range(self.cycles if cycles is None else cycles):
            for name in self.visit_sequence_:
                self._update(table, name, values, mask, weights, warm, rng)
        full = table.values.copy()
        full[resp] = values
        imputed = np.zeros_like(table.item_mask)
        imputed[resp] = mask
        return CompletedDataset(table, full, imputed)

    def _update(self, table, name, values, mask, weights, warm, rng):
        j = table.index(name)
        miss = mask[:, j]
        if not miss.any():
            return
        var = table.schema[j]
        method = self.methods_[name]
        X = design_matrix(self.designs_[name], table.schema, values, mask, weights)
        obs = ~miss
        y = response_vector(var, values[obs, j])
        family = PMM if method == PMM else method
        model = GLM(family=LINEAR if family == PMM else family)
        try:
            model.fit(X[obs], y, n_levels=var.n_levels or None, coef_init=warm.get(name))
        except (GlmError, np.linalg.LinAlgError) as exc:
            raise GlmError(f"imputation model for {name!r} failed: {exc}") from exc
        if model.family != LINEAR:
            warm[name] = model.coef_
        coef = model.draw_coefficients(rng)
        Xm = X[miss]
        if method == LOGISTIC:
            draw = (rng.random(Xm.shape[0]) < expit(Xm @ coef)).astype(float)
            values[miss, j] = np.asarray(var.codes, dtype=float)[draw.astype(int)]
        elif method == MULTINOMIAL:
            idx = _draw_categorical(model.predict_proba(Xm, coef), rng)
            values[miss, j] = np.asarray(var.codes, dtype=float)[idx]
        elif method == LINEAR:
            sigma = model.draw_sigma(rng, int(obs.sum()))
            values[miss, j] = Xm @ coef + sigma * rng.standard_normal(Xm.shape[0])
        else:
            values[miss, j] = impute_pmm(model, Xm, X[obs], values[obs, j], self.pmm_donors, rng, coef)


def run_mice(table: SurveyTable, config: MiceConfig, rng) -> list[CompletedDataset]:
    """``config.n_datasets`` completed copies of the unit respondents."""
    return MiceImputer.from_config(config, random_state=rng).fit_transform(table)
