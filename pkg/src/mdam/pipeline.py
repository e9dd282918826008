"""End-to-end method arms: item imputation, margin matching and hot deck.

``MMH`` completes item nonresponse by chained equations, ``MH`` by the
full-conditional sampler; both then impute the margin variables of unit
nonrespondents by intercept matching and donate the remaining variables by
hot deck. ``IH`` skips the matching (the unit-nonresponse shift is zero).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_positive_int, check_rng, check_table
from .dataset import (
    AuxiliaryMargins,
    CompletedDataset,
    MarginEntry,
    SurveyTable,
    VariableSpec,
    load_table,
    validate_margins,
    write_table,
)
from .gibbs import STANDARD, ConditionalFactorization, GibbsItemImputer
from .hotdeck import hot_deck_fill
from .margins import (
    DESIGN_KNOWN,
    POISSON,
    MarginChain,
    build_weights,
    calibrate_v,
    default_chain,
    impute_margin_vars,
)
from .mice import MiceConfig, MiceImputer

MMH = "MMH"
MH = "MH"
IH = "IH"
MICE = "mice"
GIBBS = "gibbs"
_ARM_DEFAULTS = {MMH: (MICE, True), MH: (GIBBS, True), IH: (MICE, False)}


@dataclass(frozen=True)
class MethodArm:
    """A named imputation method.

    Parameters
    ----------
    name : {"MMH", "MH", "IH"}
    engine : {"mice", "gibbs"}, optional
        Item-nonresponse engine. Fixed for MMH and MH; IH defaults to mice.
    n_datasets : int
        Completed datasets ``L``.
    burn_in, thin : int
        Gibbs chain settings; the chain runs ``burn_in + L * thin`` iterations.
    ratio : str
        Gibbs acceptance ratio for continuous variables.
    """

    name: str
    engine: str | None = None
    n_datasets: int = 20
    burn_in: int = 500
    thin: int = 25
    ratio: str = STANDARD

    def __post_init__(self):
        name = self.name.upper()
        if name not in _ARM_DEFAULTS:
            raise ValueError(f"unknown method {self.name!r}; use MMH, MH or IH")
        object.__setattr__(self, "name", name)
        engine, _ = _ARM_DEFAULTS[name]
        if self.engine is None:
            object.__setattr__(self, "engine", engine)
        elif name != IH and self.engine != engine:
            raise ValueError(f"{name} uses the {engine} engine")
        if self.engine not in (MICE, GIBBS):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.n_datasets < 2:
            raise ValueError("at least two completed datasets are needed for pooling")

    @property
    def match(self) -> bool:
        """Whether unit nonrespondents are intercept-matched to the margins."""
        return _ARM_DEFAULTS[self.name][1]

    @property
    def iterations(self) -> int:
        return self.burn_in + self.n_datasets * self.thin


@dataclass(frozen=True, eq=False)
class ImputationSet:
    """``L`` completed datasets with the analysis weights they share."""

    datasets: tuple[CompletedDataset, ...]
    weights: np.ndarray
    margins: AuxiliaryMargins | None = None
    arm: str | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))

    def __len__(self):
        return len(self.datasets)

    @property
    def schema(self):
        return self.datasets[0].schema

    def write(self, directory, weight_column: str = "w") -> Path:
        """One CSV per dataset (analysis weights in ``weight_column``) plus ``imputation-set.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, ds in enumerate(self.datasets, 1):
            name = f"completed-{i:03d}.csv"
            write_table(ds.to_table(self.weights), directory / name, weight_column=weight_column)
            files.append(name)
        meta = {
            "arm": self.arm,
            "weight_column": weight_column,
            "files": files,
            "schema": [schema_to_dict(v) for v in self.schema],
            "margins": margins_to_list(self.margins),
            "info": self.info,
        }
        (directory / "imputation-set.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return directory


def schema_to_dict(var: VariableSpec) -> dict:
    return {"name": var.name, "kind": var.kind, "levels": list(var.levels), "has_margin": var.has_margin}


def margins_to_list(margins: AuxiliaryMargins | None) -> list:
    if margins is None:
        return []
    return [
        {"variable": e.variable, "level": e.level, "total": e.total, "variance": e.variance}
        for e in margins.entries
    ]


def read_imputation_set(directory) -> ImputationSet:
    """Inverse of :meth:`ImputationSet.write`."""
    directory = Path(directory)
    meta = json.loads((directory / "imputation-set.json").read_text())
    schema = tuple(
        VariableSpec(d["name"], d["kind"], tuple(d["levels"]), d["has_margin"]) for d in meta["schema"]
    )
    datasets, weights = [], None
    for name in meta["files"]:
        table = load_table(directory / name, schema, weight_column=meta["weight_column"])
        if table.item_mask.any():
            raise ValueError(f"{name}: completed dataset has missing cells")
        datasets.append(CompletedDataset(table, np.array(table.values), np.zeros_like(table.item_mask)))
        weights = table.design_weight
    margins = None
    if meta["margins"]:
        margins = AuxiliaryMargins(tuple(MarginEntry(**e) for e in meta["margins"]))
    return ImputationSet(tuple(datasets), np.array(weights), margins, meta["arm"], meta.get("info", {}))


def _identity_set(table: SurveyTable, L: int, weights, margins, arm) -> ImputationSet:
    ds = CompletedDataset(table, np.array(table.values), np.zeros_like(table.item_mask))
    return ImputationSet(tuple(ds for _ in range(L)), weights, margins, arm)


def preliminary_fill(
    table: SurveyTable,
    rng,
    chain: MarginChain | None = None,
    weights=None,
    mice_config: MiceConfig | None = None,
) -> CompletedDataset:
    """One quick completion of every row, used to calibrate ``V``.

    Respondents get a single chained-equations cycle; unit nonrespondents
    get chain-variable draws from the respondent models (no matching) and
    the rest by hot deck.
    """
    table = check_table(table)
    rng = check_rng(rng)
    config = replace(mice_config or MiceConfig(), n_datasets=1, cycles=1)
    completed = MiceImputer.from_config(config, random_state=rng).fit_transform(table)[0]
    if not table.unit_flag.any():
        return completed
    if chain is None or not chain.links:
        raise ValueError("unit nonrespondents need a margin chain to key the hot deck")
    if weights is None:
        weights = build_weights(table)
    completed = impute_margin_vars(completed, chain, None, weights, rng, match=False)
    return hot_deck_fill(completed, chain.variables, rng)


def _item_completions(table, arm: MethodArm, rng, mice_config, factorization):
    if arm.engine == MICE:
        config = replace(mice_config or MiceConfig(), n_datasets=arm.n_datasets)
        return MiceImputer.from_config(config, random_state=rng).fit_transform(table)
    imputer = GibbsItemImputer(
        factorization, arm.iterations, arm.burn_in, arm.thin, arm.ratio, random_state=rng
    )
    return imputer.fit_transform(table)


def run_arm(
    table: SurveyTable,
    margins: AuxiliaryMargins | None,
    chain: MarginChain | None,
    arm: MethodArm,
    rng,
    weights=None,
    weight_mode: str = DESIGN_KNOWN,
    design: str = POISSON,
    mice_config: MiceConfig | None = None,
    factorization: ConditionalFactorization | None = None,
) -> ImputationSet:
    """Create ``arm.n_datasets`` completed datasets covering every row.

    Margin variances left as ``None`` are calibrated from a
    :func:`preliminary_fill`. Each dataset gets its own plausible-total draw.
    """
    table = check_table(table)
    rng = check_rng(rng)
    if weights is None:
        weights = build_weights(table, weight_mode)
    weights = np.asarray(weights, dtype=float)
    has_unit = bool(table.unit_flag.any())
    if has_unit:
        if margins is None or not margins.entries:
            if arm.match:
                raise ValueError(f"{arm.name} needs auxiliary margins")
        if chain is None:
            if margins is None:
                raise ValueError("unit nonrespondents need a margin chain")
            chain = default_chain(table.schema, margins)
        chain.validate(table.schema)
    if margins is not None:
        if any(e.variance is None for e in margins.entries):
            fill = preliminary_fill(table, rng, chain, weights, mice_config)
            margins = calibrate_v(fill, margins, weights, design)
        problems = validate_margins(table, margins)
        if problems:
            raise ValueError("invalid margins: " + "; ".join(problems))
    if not has_unit and not table.item_mask.any():
        return _identity_set(table, arm.n_datasets, weights, margins, arm.name)
    item_rng, unit_rng = rng.spawn(2)
    completions = _item_completions(table, arm, item_rng, mice_config, factorization)
    if has_unit:
        out = []
        for ds, child in zip(completions, unit_rng.spawn(len(completions))):
            ds = impute_margin_vars(ds, chain, margins, weights, child, match=arm.match)
            out.append(hot_deck_fill(ds, chain.variables, child))
        completions = out
    return ImputationSet(tuple(completions), weights, margins, arm.name)


class MarginHotDeckImputer(BaseEstimator):
    """Multiple imputation of unit and item nonresponse using known margins.

    Parameters
    ----------
    method : {"MMH", "MH", "IH"}
    n_datasets : int
    margins : AuxiliaryMargins, optional
        Known totals; variances left as ``None`` are calibrated in ``fit``.
    chain : MarginChain, optional
        Defaults to the margin variables in listed order, each on main
        effects of the earlier ones.
    weight_mode : {"design", "adjusted"}
    design : {"poisson", "pps"}
        Variance formula used for calibration.
    mice_config : MiceConfig, optional
    factorization : ConditionalFactorization, optional
    burn_in, thin : int
        Gibbs settings, used by ``MH``.
    random_state : int, Generator or None

    Attributes
    ----------
    weights_ : ndarray
    margins_ : AuxiliaryMargins
    chain_ : MarginChain
    arm_ : MethodArm
    """

    def __init__(
        self,
        method=MMH,
        n_datasets=20,
        margins=None,
        chain=None,
        weight_mode=DESIGN_KNOWN,
        design=POISSON,
        mice_config=None,
        factorization=None,
        burn_in=500,
        thin=25,
        random_state=None,
    ):
        self.method = method
        self.n_datasets = n_datasets
        self.margins = margins
        self.chain = chain
        self.weight_mode = weight_mode
        self.design = design
        self.mice_config = mice_config
        self.factorization = factorization
        self.burn_in = burn_in
        self.thin = thin
        self.random_state = random_state

    def fit(self, table, y=None):
        table = check_table(table)
        check_positive_int(self.n_datasets, "n_datasets", minimum=2)
        self.arm_ = MethodArm(self.method, n_datasets=self.n_datasets, burn_in=self.burn_in, thin=self.thin)
        self._rng = check_rng(self.random_state)
        self.weights_ = build_weights(table, self.weight_mode)
        margins = self.margins
        chain = self.chain
        if margins is not None:
            if chain is None:
                chain = default_chain(table.schema, margins)
            if any(e.variance is None for e in margins.entries):
                fill = preliminary_fill(table, self._rng, chain, self.weights_, self.mice_config)
                margins = calibrate_v(fill, margins, self.weights_, self.design)
        self.margins_ = margins
        self.chain_ = chain
        return self

    def transform(self, table) -> ImputationSet:
        check_fitted(self, "weights_")
        return run_arm(
            table, self.margins_, self.chain_, self.arm_, self._rng, weights=self.weights_,
            design=self.design, mice_config=self.mice_config, factorization=self.factorization,
        )

    def fit_transform(self, table, y=None) -> ImputationSet:
        return self.fit(table).transform(table)
