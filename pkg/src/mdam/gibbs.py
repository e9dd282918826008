"""Item-nonresponse imputation by sampling full conditionals of a joint model.

The joint model factorizes into ordered outcome models for the survey
variables and logistic models for the item-response indicators, where the
indicator of ``X_j`` never depends on ``X_j`` itself. Discrete cells are drawn
from their exact full conditional; continuous cells take a Metropolis step
that proposes from the variable's own normal model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit, logsumexp
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_positive_int, check_rng, check_table
from .dataset import CONTINUOUS, CompletedDataset, SurveyTable
from .glm import (
    GLM,
    LINEAR,
    LOGISTIC,
    MULTINOMIAL,
    DesignSpec,
    GlmError,
    Term,
    design_matrix,
    family_for,
    response_vector,
)

STANDARD = "standard"
PRINTED = "printed"


@dataclass(frozen=True)
class ConditionalFactorization:
    """Outcome models in factorization order and item-response models.

    ``outcome`` maps each variable to the design of ``X_j | predecessors``;
    ``response`` maps a variable to the design of its response indicator
    ``R_j`` (the design's response names ``j``, the outcome modelled is the
    item-missing flag).
    """

    outcome: tuple[DesignSpec, ...]
    response: tuple[DesignSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "outcome", tuple(self.outcome))
        object.__setattr__(self, "response", tuple(self.response))

    def validate(self, schema) -> None:
        for spec in self.outcome + self.response:
            spec.validate(schema)
        for spec in self.response:
            if spec.response in spec.predictor_variables():
                raise ValueError(
                    f"response model of {spec.response!r} must not depend on {spec.response!r}"
                )
            if any(t.kind == "missing" for t in spec.terms):
                raise ValueError("response models take survey variables only")
        names = [s.response for s in self.outcome]
        if len(set(names)) != len(names):
            raise ValueError("one outcome model per variable")

    def outcome_for(self, name: str) -> DesignSpec:
        for spec in self.outcome:
            if spec.response == name:
                return spec
        raise KeyError(f"no outcome model for {name!r}")

    def response_for(self, name: str) -> DesignSpec | None:
        for spec in self.response:
            if spec.response == name:
                return spec
        return None

    def dependents(self, name: str) -> tuple[list[DesignSpec], list[DesignSpec]]:
        """Outcome and response models (other than ``name``'s own) using ``name``."""
        outs = [s for s in self.outcome if s.response != name and name in s.predictor_variables()]
        resps = [s for s in self.response if s.response != name and name in s.predictor_variables()]
        return outs, resps

    @classmethod
    def sequential(cls, schema, response_for=()):
        """Each variable on main effects of its predecessors; each listed
        response indicator on main effects of every other variable."""
        names = [v.name for v in schema]
        outcome = tuple(
            DesignSpec(n, tuple(Term("main", var=p) for p in names[:i])) for i, n in enumerate(names)
        )
        response = tuple(
            DesignSpec(n, tuple(Term("main", var=p) for p in names if p != n)) for n in response_for
        )
        return cls(outcome, response)


@dataclass
class GibbsParams:
    """Drawn coefficients for outcome and response models."""

    outcome: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)
    response: dict = field(default_factory=dict)


def _outcome_logdensity(spec, schema, values, mask, weights, params: GibbsParams) -> np.ndarray:
    idx = {v.name: j for j, v in enumerate(schema)}
    var = schema[idx[spec.response]]
    X = design_matrix(spec, schema, values, mask, weights)
    coef = params.outcome[spec.response]
    y = values[:, idx[spec.response]]
    if var.kind == CONTINUOUS:
        mu = X @ coef
        s = params.sigma[spec.response]
        return -0.5 * np.log(2 * np.pi * s * s) - 0.5 * ((y - mu) / s) ** 2
    k = var.code_index(y)
    if var.n_levels == 2:
        eta = X @ coef
        return k * eta + log_expit(-eta)
    B = coef.reshape(var.n_levels - 1, X.shape[1])
    full = np.column_stack([np.zeros(X.shape[0]), X @ B.T])
    return full[np.arange(X.shape[0]), k] - logsumexp(full, axis=1)


def _response_logprob(spec, schema, values, mask, weights, params: GibbsParams) -> np.ndarray:
    idx = {v.name: j for j, v in enumerate(schema)}
    X = design_matrix(spec, schema, values, mask, weights)
    eta = X @ params.response[spec.response]
    r = mask[:, idx[spec.response]].astype(float)
    return r * eta + log_expit(-eta)


def conditional_logpmf(
    fact: ConditionalFactorization,
    schema,
    values: np.ndarray,
    mask: np.ndarray,
    j: str,
    params: GibbsParams,
    weights=None,
) -> np.ndarray:
    """Normalized log full conditional of categorical ``j`` for each row, (n, m).

    Factors: ``j``'s own outcome model, every other outcome model and every
    response model that uses ``j``. ``R_j``'s own model is constant in
    ``X_j`` and is skipped.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    idx = {v.name: i for i, v in enumerate(schema)}
    col = idx[j]
    var = schema[col]
    if var.kind == CONTINUOUS:
        raise ValueError(f"{j} is continuous")
    own = fact.outcome_for(j)
    outs, resps = fact.dependents(j)
    logp = np.empty((values.shape[0], var.n_levels))
    work = values.copy()
    for k, code in enumerate(var.codes):
        work[:, col] = code
        acc = _outcome_logdensity(own, schema, work, mask, weights, params)
        for spec in outs:
            acc = acc + _outcome_logdensity(spec, schema, work, mask, weights, params)
        for spec in resps:
            acc = acc + _response_logprob(spec, schema, work, mask, weights, params)
        logp[:, k] = acc
    # max-log subtraction guards against underflow
    return logp - logsumexp(logp, axis=1, keepdims=True)


def conditional_pmf_discrete(fact, schema, row, row_mask, j, params, weight=None) -> np.ndarray:
    """Full-conditional probabilities over the levels of ``j`` for one row."""
    w = None if weight is None else np.atleast_1d(weight)
    return np.exp(conditional_logpmf(fact, schema, row, row_mask, j, params, w)[0])


def _extra_logterms(fact, schema, values, mask, weights, j, params) -> np.ndarray:
    outs, resps = fact.dependents(j)
    acc = np.zeros(values.shape[0])
    for spec in outs:
        acc = acc + _outcome_logdensity(spec, schema, values, mask, weights, params)
    for spec in resps:
        acc = acc + _response_logprob(spec, schema, values, mask, weights, params)
    return acc


def log_acceptance(
    fact, schema, values, mask, j, current, proposal, params, weights=None, ratio=STANDARD
) -> np.ndarray:
    """Log acceptance ratio for moving ``j`` from ``current`` to ``proposal``.

    ``standard`` is the independence-sampler ratio: the proposal density
    (the variable's own normal model) cancels against the target, leaving
    the factors of models that use ``j``. ``printed`` also multiplies by
    the own-model density ratio f(proposal)/f(current).
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    col = [v.name for v in schema].index(j)
    new = values.copy()
    new[:, col] = proposal
    old = values.copy()
    old[:, col] = current
    out = _extra_logterms(fact, schema, new, mask, weights, j, params) - _extra_logterms(
        fact, schema, old, mask, weights, j, params
    )
    if ratio == PRINTED:
        own = fact.outcome_for(j)
        out = out + _outcome_logdensity(own, schema, new, mask, weights, params)
        out = out - _outcome_logdensity(own, schema, old, mask, weights, params)
    elif ratio != STANDARD:
        raise ValueError(f"unknown acceptance ratio {ratio!r}")
    return out


def acceptance_ratio_naive(
    fact, schema, row, row_mask, j, current, proposal, params, weight=None, ratio=STANDARD
) -> float:
    """Same ratio as :func:`log_acceptance`, multiplied out in probability space."""
    row = np.asarray(row, dtype=float)
    idx = {v.name: i for i, v in enumerate(schema)}
    w = None if weight is None else np.atleast_1d(weight)

    def product(y):
        x = row.copy()
        x[idx[j]] = y
        x = x[None, :]
        m = np.atleast_2d(row_mask)
        outs, resps = fact.dependents(j)
        p = 1.0
        for spec in outs:
            p *= float(np.exp(_outcome_logdensity(spec, schema, x, m, w, params))[0])
        for spec in resps:
            p *= float(np.exp(_response_logprob(spec, schema, x, m, w, params))[0])
        if ratio == PRINTED:
            p *= float(np.exp(_outcome_logdensity(fact.outcome_for(j), schema, x, m, w, params))[0])
        return p

    return product(proposal) / product(current)


def rejection_step_continuous(
    fact, schema, values, mask, j, params, rng, weights=None, ratio=STANDARD
) -> np.ndarray:
    """One Metropolis update of continuous ``j`` for every row of ``values``.

    Proposals come from ``j``'s normal outcome model; each is accepted when
    a uniform draw is at most the acceptance ratio.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    col = [v.name for v in schema].index(j)
    own = fact.outcome_for(j)
    X = design_matrix(own, schema, values, mask, weights)
    mu = X @ params.outcome[j]
    proposal = mu + params.sigma[j] * rng.standard_normal(values.shape[0])
    current = values[:, col]
    loga = log_acceptance(fact, schema, values, mask, j, current, proposal, params, weights, ratio)
    accept = np.log(rng.random(values.shape[0])) <= loga
    return np.where(accept, proposal, current)


class GibbsItemImputer(BaseEstimator):
    """Item-nonresponse imputation by full-conditional sampling.

    Parameters
    ----------
    factorization : ConditionalFactorization, optional
        Defaults to :meth:`ConditionalFactorization.sequential` with response
        models for every incomplete variable.
    iterations, burn_in, thin : int
        States after ``burn_in`` are kept every ``thin`` iterations, giving
        ``(iterations - burn_in) // thin`` completed datasets.
    ratio : {"standard", "printed"}
        Acceptance ratio for continuous variables (see :func:`log_acceptance`).
    random_state : int, Generator or None
    """

    def __init__(
        self,
        factorization=None,
        iterations=1000,
        burn_in=500,
        thin=25,
        ratio=STANDARD,
        random_state=None,
    ):
        self.factorization = factorization
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.ratio = ratio
        self.random_state = random_state

    def fit(self, table, y=None):
        table = check_table(table)
        check_positive_int(self.iterations, "iterations")
        check_positive_int(self.burn_in, "burn_in", minimum=0)
        check_positive_int(self.thin, "thin")
        if self.iterations <= self.burn_in:
            raise ValueError("iterations must exceed burn_in")
        if self.ratio not in (STANDARD, PRINTED):
            raise ValueError(f"unknown ratio {self.ratio!r}")
        resp = ~table.unit_flag
        incomplete = [v.name for j, v in enumerate(table.schema) if table.item_mask[resp, j].any()]
        fact = self.factorization
        if fact is None:
            fact = ConditionalFactorization.sequential(table.schema, incomplete)
        fact.validate(table.schema)
        for name in incomplete:
            fact.outcome_for(name)
            if not (~table.item_mask[resp, table.index(name)]).any():
                raise ValueError(f"{name}: no observed values among unit respondents")
        missing = set(incomplete)
        self.outcome_models_ = [
            s for s in fact.outcome
            if s.response in missing or s.predictor_variables() & missing
        ]
        self.response_models_ = [s for s in fact.response if s.predictor_variables() & missing]
        self.incomplete_ = [s.response for s in fact.outcome if s.response in missing]
        self.factorization_ = fact
        return self

    def transform(self, table, init: CompletedDataset | None = None) -> list[CompletedDataset]:
        """Run one chain and return its thinned post-burn-in states."""
        check_fitted(self, "factorization_")
        table = check_table(table)
        rng = check_rng(self.random_state)
        return list(self._run(table, rng, init))

    def fit_transform(self, table, y=None, init=None):
        return self.fit(table).transform(table, init)

    def _draw_params(self, table, values, mask, weights, warm, rng) -> GibbsParams:
        params = GibbsParams()
        schema = table.schema
        for spec in self.outcome_models_:
            var = table.variable(spec.response)
            X = design_matrix(spec, schema, values, mask, weights)
            y = response_vector(var, values[:, table.index(spec.response)])
            model = GLM(family=family_for(var))
            try:
                model.fit(X, y, n_levels=var.n_levels or None, coef_init=warm.get(("x", spec.response)))
            except GlmError as exc:
                raise GlmError(f"outcome model for {spec.response!r} failed: {exc}") from exc
            params.outcome[spec.response] = model.draw_coefficients(rng)
            if model.family == LINEAR:
                params.sigma[spec.response] = model.draw_sigma(rng, X.shape[0])
            else:
                warm[("x", spec.response)] = model.coef_
        for spec in self.response_models_:
            X = design_matrix(spec, schema, values, mask, weights)
            y = mask[:, table.index(spec.response)].astype(float)
            model = GLM(family=LOGISTIC)
            try:
                model.fit(X, y, coef_init=warm.get(("r", spec.response)))
            except GlmError as exc:
                raise GlmError(f"response model for {spec.response!r} failed: {exc}") from exc
            warm[("r", spec.response)] = model.coef_
            params.response[spec.response] = model.draw_coefficients(rng)
        return params

    def _run(self, table: SurveyTable, rng, init):
        resp = np.flatnonzero(~table.unit_flag)
        mask = table.item_mask[resp]
        weights = table.design_weight[resp]
        if init is not None:
            values = init.values[resp].copy()
            if np.isnan(values).any():
                raise ValueError("initial completion must cover every unit respondent")
        else:
            values = table.values[resp].copy()
            for name in self.incomplete_:
                j = table.index(name)
                miss = mask[:, j]
                obs = values[~miss, j]
                values[miss, j] = obs[rng.integers(0, obs.size, size=miss.sum())]
        schema = table.schema
        warm = {}
        for t in range(1, self.iterations + 1):
            params = self._draw_params(table, values, mask, weights, warm, rng)
            for name in self.incomplete_:
                j = table.index(name)
                rows = mask[:, j]
                var = schema[j]
                if var.kind == CONTINUOUS:
                    values[rows, j] = rejection_step_continuous(
                        self.factorization_, schema, values[rows], mask[rows], name, params, rng,
                        weights[rows], self.ratio,
                    )
                else:
                    logp = conditional_logpmf(
                        self.factorization_, schema, values[rows], mask[rows], name, params, weights[rows]
                    )
                    probs = np.exp(logp)
                    cum = np.cumsum(probs, axis=1)
                    u = rng.random(probs.shape[0]) * cum[:, -1]
                    k = np.minimum((cum < u[:, None]).sum(axis=1), var.n_levels - 1)
                    values[rows, j] = np.asarray(var.codes, dtype=float)[k]
            if t > self.burn_in and (t - self.burn_in) % self.thin == 0:
                full = table.values.copy()
                full[resp] = values
                imputed = np.zeros_like(table.item_mask)
                imputed[resp] = mask
                yield CompletedDataset(table, full, imputed)


def run_gibbs_item(table, fact, iterations, burn_in, thin, rng, ratio=STANDARD, init=None):
    imputer = GibbsItemImputer(fact, iterations, burn_in, thin, ratio, random_state=rng)
    return imputer.fit_transform(table, init=init)
