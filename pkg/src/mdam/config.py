"""YAML configuration: schema, data file, margins, models and estimands.

Example::

    variables:
      - {name: S, kind: binary, levels: [male, female]}
      - {name: E, kind: categorical, levels: [white, black, hispanic, other]}
      - {name: A, kind: continuous}
    data: {path: survey.csv, missing: "", weight_column: w}
    population_size: 1000000
    weights: design            # or "adjusted"
    design: poisson            # or "pps"
    margins:
      - {variable: S, level: 1, total: 480000, variance: calibrate}
    chain:                     # optional; default is margins order, main effects
      - {variable: S, terms: []}
      - {variable: E, terms: [S]}
    mice: {cycles: 5, pmm_donors: 5}
    estimands: ["T(S=1)", "P(E=2|S=1)"]
    subgroups: {target: "S=1", groups: [[], [E]]}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import AuxiliaryMargins, MarginEntry, SurveyTable, VariableSpec, check_schema, load_table
from .estimation import EstimandSpec, parse_estimand
from .glm import DesignSpec
from .margins import DESIGN_KNOWN, POISSON, ChainLink, MarginChain
from .mice import MiceConfig

CALIBRATE = "calibrate"


class ConfigError(ValueError):
    pass


@dataclass
class SurveyConfig:
    schema: tuple[VariableSpec, ...]
    data_path: Path | None = None
    missing_token: str = ""
    weight_column: str = "w"
    population_size: float | None = None
    weight_mode: str = DESIGN_KNOWN
    design: str = POISSON
    margins: AuxiliaryMargins | None = None
    chain: MarginChain | None = None
    mice: MiceConfig = field(default_factory=MiceConfig)
    estimands: list[EstimandSpec] = field(default_factory=list)
    subgroup_target: str | None = None
    subgroup_groups: list[tuple[str, ...]] = field(default_factory=lambda: [()])

    def load_data(self, path=None) -> SurveyTable:
        path = path or self.data_path
        if path is None:
            raise ConfigError("no data file given")
        return load_table(path, self.schema, self.missing_token, self.weight_column, self.population_size)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def parse_config(raw: dict, base_dir=None) -> SurveyConfig:
    """Build a :class:`SurveyConfig` from a parsed YAML mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    base_dir = Path(base_dir or ".")
    margin_raw = raw.get("margins") or []
    margin_vars = {_require(m, "variable", "margins") for m in margin_raw}
    variables = []
    for v in _require(raw, "variables", "config"):
        name = _require(v, "name", "variables")
        kind = _require(v, "kind", f"variable {name}")
        levels = v.get("levels", ())
        if isinstance(levels, int):
            levels = tuple(str(i) for i in range(1, levels + 1))
        variables.append(
            VariableSpec(name, kind, tuple(levels), bool(v.get("has_margin", name in margin_vars)))
        )
    schema = check_schema(variables)
    data = raw.get("data") or {}
    if isinstance(data, str):
        data = {"path": data}
    cfg = SurveyConfig(schema)
    if "path" in data:
        cfg.data_path = base_dir / data["path"]
    cfg.missing_token = str(data.get("missing", ""))
    cfg.weight_column = data.get("weight_column", raw.get("weight_column", "w"))
    if raw.get("population_size") is not None:
        cfg.population_size = float(raw["population_size"])
    cfg.weight_mode = raw.get("weights", DESIGN_KNOWN)
    cfg.design = raw.get("design", POISSON)
    if margin_raw:
        entries = []
        for m in margin_raw:
            var = m.get("variance", CALIBRATE)
            entries.append(MarginEntry(
                m["variable"],
                int(_require(m, "level", "margins")),
                float(_require(m, "total", "margins")),
                None if var in (None, CALIBRATE) else float(var),
            ))
        cfg.margins = AuxiliaryMargins(tuple(entries))
    chain_raw = raw.get("chain")
    if chain_raw:
        links = []
        for c in chain_raw:
            name = _require(c, "variable", "chain")
            terms = c.get("terms")
            if terms is None:
                terms = [link.variable for link in links]
            links.append(ChainLink(name, DesignSpec.from_strings(name, list(terms), schema)))
        cfg.chain = MarginChain(tuple(links))
        cfg.chain.validate(schema)
    elif cfg.margins is not None:
        cfg.chain = MarginChain.sequential(cfg.margins.variables, schema=schema)
    mice_raw = raw.get("mice") or {}
    cfg.mice = MiceConfig(
        n_datasets=int(mice_raw.get("datasets", 5)),
        cycles=int(mice_raw.get("cycles", 5)),
        visit_sequence=mice_raw.get("visit_sequence"),
        methods=mice_raw.get("methods"),
        predictors=mice_raw.get("predictors"),
        pmm_donors=int(mice_raw.get("pmm_donors", 5)),
        include_response_indicators=bool(mice_raw.get("include_response_indicators", False)),
    )
    for text in raw.get("estimands") or []:
        e = parse_estimand(text)
        e.validate(schema)
        cfg.estimands.append(e)
    sub = raw.get("subgroups")
    if sub:
        cfg.subgroup_target = _require(sub, "target", "subgroups")
        cfg.subgroup_groups = [tuple(g) for g in sub.get("groups", [[]])]
    return cfg


def load_config(path) -> SurveyConfig:
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw, path.parent)


def config_dict(schema, margins: AuxiliaryMargins | None, data_path=None, population_size=None, **extra) -> dict:
    """Mapping accepted by :func:`parse_config`, for writing configs."""
    out = {
        "variables": [
            {"name": v.name, "kind": v.kind, **({"levels": list(v.levels)} if v.kind == "categorical" else {})}
            for v in schema
        ],
    }
    if data_path is not None:
        out["data"] = {"path": str(data_path), "missing": "", "weight_column": "w"}
    if population_size is not None:
        out["population_size"] = float(population_size)
    if margins is not None:
        out["margins"] = [
            {
                "variable": e.variable,
                "level": e.level,
                "total": float(e.total),
                "variance": CALIBRATE if e.variance is None else float(e.variance),
            }
            for e in margins.entries
        ]
    out.update(extra)
    return out


def write_config(path, mapping: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(mapping, fh, sort_keys=False)
