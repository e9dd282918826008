"""Repeated-sampling study runner and report tables.

A population is generated once from the master seed. Every replicate draws
a Poisson sample, deletes values by the unit and item nonresponse models,
runs each method arm and pools every estimand. Aggregates follow the layout
of the usual bias / coverage / variance tables, with a ``Pre`` column for
the complete-data estimator on the same realized samples.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import platform
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import AuxiliaryMargins
from .estimation import (
    EstimandSpec,
    PooledEstimate,
    ht_estimate,
    parse_estimand,
    pool,
    table2_estimands,
    table3_estimands,
)
from .gibbs import ConditionalFactorization
from .glm import DesignSpec
from .margins import ChainLink, MarginChain
from .mice import MiceConfig
from .pipeline import IH, MMH, ImputationSet, MethodArm, run_arm
from .simgen import (
    DEFAULT_PHI,
    Population,
    PopulationConfig,
    appendix_b,
    generate_population,
    schema,
    simulate_replicate,
)


def simulation_chain() -> MarginChain:
    """``X1`` on the survey weight, then ``X2`` on ``X1``."""
    s = schema()
    return MarginChain((
        ChainLink("X1", DesignSpec.from_strings("X1", ["@weight"], s)),
        ChainLink("X2", DesignSpec.from_strings("X2", ["X1"], s)),
    ))


def simulation_factorization() -> ConditionalFactorization:
    """Outcome models in data-generation order; response models on the
    predictors with nonzero generating coefficients."""
    s = schema()
    names = [v.name for v in s]
    outcome = [DesignSpec.from_strings("X1", ["@weight"], s)]
    outcome += [DesignSpec.from_strings(n, names[:i], s) for i, n in enumerate(names) if i > 0]
    response = []
    for name, (coef, predictors) in DEFAULT_PHI.items():
        used = [p for p, c in zip(predictors, coef[1:]) if c != 0]
        response.append(DesignSpec.from_strings(name, used, s))
    return ConditionalFactorization(tuple(outcome), tuple(response))


@dataclass(frozen=True)
class StudyConfig:
    """Scenario, arms, replication sizes and the master seed."""

    population: PopulationConfig = field(default_factory=appendix_b)
    arms: tuple[str, ...] = (MMH, IH)
    replicates: int = 100
    n_datasets: int = 20
    seed: int = 0
    mice_cycles: int = 5
    burn_in: int = 500
    thin: int = 25
    n_jobs: int = 1

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("a study needs at least two replicates")
        object.__setattr__(self, "arms", tuple(a.upper() for a in self.arms))
        for a in self.arms:
            MethodArm(a, n_datasets=self.n_datasets)

    def method_arm(self, name: str) -> MethodArm:
        return MethodArm(name, n_datasets=self.n_datasets, burn_in=self.burn_in, thin=self.thin)

    def to_dict(self) -> dict:
        return {
            "population": self.population.to_dict(),
            "arms": list(self.arms),
            "replicates": self.replicates,
            "n_datasets": self.n_datasets,
            "seed": self.seed,
            "mice_cycles": self.mice_cycles,
            "burn_in": self.burn_in,
            "thin": self.thin,
        }


@dataclass
class ArmResult:
    """Pooled estimates of one arm on one replicate."""

    pooled: dict[str, PooledEstimate]
    margin_hits: dict[str, int]
    n_datasets: int
    seconds: float


@dataclass
class ReplicateResult:
    index: int
    pre: dict[str, tuple[float, float]]
    unit_rate: float
    item_rates: dict[str, float]
    arms: dict[str, ArmResult] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class StudyReportRow:
    """Aggregates for one estimand; per-arm dicts keyed by arm name."""

    estimand: str
    truth: float
    estimate: dict
    abs_pct_bias: dict
    coverage: dict
    variance: dict
    avg_est_var: dict
    pre: float

    def __post_init__(self):
        for arm, c in self.coverage.items():
            if not (math.isnan(c) or 0.0 <= c <= 100.0):
                raise ValueError(f"coverage out of range for {arm}")
        for d in (self.variance, self.avg_est_var):
            if any(v < 0 for v in d.values()):
                raise ValueError("negative variance")


@dataclass
class StudyReport:
    config: StudyConfig
    totals: list[StudyReportRow]
    probs: list[StudyReportRow]
    replicates: list[ReplicateResult]
    failures: list[tuple[int, str, str]]
    seconds: float = 0.0

    def row(self, name: str) -> StudyReportRow:
        for r in self.totals + self.probs:
            if r.estimand == name:
                return r
        raise KeyError(name)

    def unit_rate(self) -> float:
        return float(np.mean([r.unit_rate for r in self.replicates]))

    def item_rates(self) -> dict[str, float]:
        names = self.replicates[0].item_rates
        return {n: float(np.mean([r.item_rates[n] for r in self.replicates])) for n in names}

    def margin_plausibility(self, arm: str) -> dict[str, float]:
        """Share of completed datasets whose margin totals lie within 4 sqrt(V)."""
        done = [r.arms[arm] for r in self.replicates if arm in r.arms]
        total = sum(a.n_datasets for a in done)
        keys = done[0].margin_hits if done else {}
        return {k: sum(a.margin_hits[k] for a in done) / total for k in keys}

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arms = list(self.config.arms)
        write_totals(directory / "totals.csv", self.totals, arms)
        write_probs(directory / "probs.csv", self.probs, arms)
        manifest = {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "versions": versions(),
            "replicates_completed": {a: sum(a in r.arms for r in self.replicates) for a in arms},
            "failures": [{"replicate": i, "arm": a, "error": e} for i, a, e in self.failures],
            "unit_nonresponse_rate": self.unit_rate(),
            "item_nonresponse_rates": self.item_rates(),
            "margin_plausibility": {a: self.margin_plausibility(a) for a in arms},
            "seconds": round(self.seconds, 3),
        }
        (directory / "run-manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory


def versions() -> dict:
    import scipy
    import sklearn

    return {
        "mdam": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.10g}"


def write_totals(path, rows: Sequence[StudyReportRow], arms) -> None:
    """Bias, coverage, variance (with Pre) and average estimated variance per arm."""
    header = (
        ["estimand", "truth"]
        + [f"bias_{a}" for a in arms]
        + [f"coverage_{a}" for a in arms]
        + ["var_Pre"]
        + [f"var_{a}" for a in arms]
        + [f"avg_est_var_{a}" for a in arms]
    )
    _write(path, header, [
        [r.estimand, _fmt(r.truth)]
        + [_fmt(r.abs_pct_bias.get(a, math.nan)) for a in arms]
        + [_fmt(r.coverage.get(a, math.nan)) for a in arms]
        + [_fmt(r.pre)]
        + [_fmt(r.variance.get(a, math.nan)) for a in arms]
        + [_fmt(r.avg_est_var.get(a, math.nan)) for a in arms]
        for r in rows
    ])


def write_probs(path, rows: Sequence[StudyReportRow], arms) -> None:
    """Truth, estimates, coverage, variance (with Pre) and average estimated variance."""
    header = (
        ["estimand", "truth"]
        + [f"est_{a}" for a in arms]
        + [f"coverage_{a}" for a in arms]
        + ["var_Pre"]
        + [f"var_{a}" for a in arms]
        + [f"avg_est_var_{a}" for a in arms]
    )
    _write(path, header, [
        [r.estimand, _fmt(r.truth)]
        + [_fmt(r.estimate.get(a, math.nan)) for a in arms]
        + [_fmt(r.coverage.get(a, math.nan)) for a in arms]
        + [_fmt(r.pre)]
        + [_fmt(r.variance.get(a, math.nan)) for a in arms]
        + [_fmt(r.avg_est_var.get(a, math.nan)) for a in arms]
        for r in rows
    ])


def _write(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def population_truth(pop: Population, estimands: Sequence[EstimandSpec]) -> dict[str, float]:
    ones = np.ones(pop.N)
    return {e.name: ht_estimate(pop.x, schema(), ones, e)[0] for e in estimands}


def margin_hits(iset: ImputationSet, margins: AuxiliaryMargins, k: float = 4.0) -> dict[str, int]:
    """Per margin entry, how many datasets hit the known total within ``k sqrt(V)``."""
    out = {}
    for e in margins.entries:
        j = iset.datasets[0].source.index(e.variable)
        sd = math.sqrt(e.variance)
        hits = 0
        for ds in iset.datasets:
            est = float(np.sum(iset.weights * (ds.values[:, j] == e.level)))
            hits += abs(est - e.total) <= k * sd
        out[f"{e.variable}={e.level}"] = hits
    return out


def run_replicate(
    pop: Population,
    config: StudyConfig,
    index: int,
    seed: np.random.SeedSequence,
    estimands: Sequence[EstimandSpec],
) -> ReplicateResult:
    """Sample, delete, impute with every arm and pool; arm failures are recorded."""
    sample_seed, *arm_seeds = seed.spawn(1 + len(config.arms))
    rep = simulate_replicate(pop, np.random.default_rng(sample_seed))
    complete, observed = rep.complete, rep.observed
    pre = {e.name: ht_estimate(complete.values, complete.schema, complete.design_weight, e) for e in estimands}
    resp = ~observed.unit_flag
    item_rates = {
        name: float(observed.item_mask[resp, observed.index(name)].mean())
        for name in pop.config.phi
    }
    result = ReplicateResult(index, pre, float(observed.unit_flag.mean()), item_rates)
    chain = simulation_chain()
    mice_config = MiceConfig(cycles=config.mice_cycles)
    factorization = simulation_factorization()
    for arm_name, arm_seed in zip(config.arms, arm_seeds):
        start = time.perf_counter()
        try:
            iset = run_arm(
                observed, pop.margins(), chain, config.method_arm(arm_name),
                np.random.default_rng(arm_seed), mice_config=mice_config,
                factorization=factorization,
            )
            pooled = {}
            for e in estimands:
                pooled[e.name] = pool([
                    ht_estimate(ds.values, ds.schema, iset.weights, e) for ds in iset.datasets
                ])
            result.arms[arm_name] = ArmResult(
                pooled, margin_hits(iset, iset.margins), len(iset), time.perf_counter() - start
            )
        except Exception as exc:  # recorded and excluded from aggregates
            result.failures[arm_name] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return result


def aggregate(
    estimands: Sequence[EstimandSpec],
    truth: dict[str, float],
    results: Sequence[ReplicateResult],
    arms: Sequence[str],
) -> list[StudyReportRow]:
    rows = []
    for e in estimands:
        t = truth[e.name]
        pre = [r.pre[e.name][0] for r in results]
        est, bias, cov, var, avg = {}, {}, {}, {}, {}
        for a in arms:
            pooled = [r.arms[a].pooled[e.name] for r in results if a in r.arms]
            q = np.array([p.qbar for p in pooled])
            ok = np.isfinite(q)
            if ok.sum() == 0:
                est[a] = bias[a] = cov[a] = var[a] = avg[a] = math.nan
                continue
            q = q[ok]
            pooled = [p for p, good in zip(pooled, ok) if good]
            est[a] = float(q.mean())
            bias[a] = abs(est[a] - t) / abs(t) * 100.0 if t != 0 else math.nan
            cov[a] = 100.0 * float(np.mean([p.covers(t) for p in pooled]))
            var[a] = float(q.var(ddof=1)) if q.size > 1 else math.nan
            avg[a] = float(np.mean([p.total_var for p in pooled]))
        pre_arr = np.array(pre)
        pre_arr = pre_arr[np.isfinite(pre_arr)]
        pre_var = float(pre_arr.var(ddof=1)) if pre_arr.size > 1 else math.nan
        rows.append(StudyReportRow(e.name, t, est, bias, cov, var, avg, pre_var))
    return rows


def run_study(config: StudyConfig, progress=None) -> StudyReport:
    """Run every replicate (in parallel when ``config.n_jobs != 1``) and aggregate.

    Results depend only on the configuration and master seed, not on
    ``n_jobs``: each replicate owns a spawned seed.
    """
    start = time.perf_counter()
    root = np.random.SeedSequence(config.seed)
    pop_seed, *rep_seeds = root.spawn(1 + config.replicates)
    pop = generate_population(config.population, np.random.default_rng(pop_seed))
    totals = table2_estimands()
    probs = table3_estimands()
    estimands = totals + probs
    if config.n_jobs == 1:
        results = []
        for i, s in enumerate(rep_seeds):
            results.append(run_replicate(pop, config, i, s, estimands))
            if progress:
                progress(i + 1, config.replicates)
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=config.n_jobs)(
            delayed(run_replicate)(pop, config, i, s, estimands) for i, s in enumerate(rep_seeds)
        )
    failures = [(r.index, a, msg) for r in results for a, msg in sorted(r.failures.items())]
    truth = population_truth(pop, estimands)
    return StudyReport(
        config,
        aggregate(totals, truth, results, config.arms),
        aggregate(probs, truth, results, config.arms),
        list(results),
        failures,
        time.perf_counter() - start,
    )


@dataclass(frozen=True)
class SubgroupRow:
    groups: tuple[str, ...]
    cell: tuple[int, ...]
    estimate: float
    ci_low: float
    ci_high: float
    flag: str = ""


def subgroup_report(
    iset: ImputationSet,
    target: str,
    groups: Sequence[Sequence[str]] = ((),),
    alpha: float = 0.05,
) -> list[SubgroupRow]:
    """Pooled weighted proportions of ``target`` (e.g. ``"V=1"``) per subgroup cell.

    Each entry of ``groups`` is a tuple of categorical variables whose full
    cross-classification is reported; ``()`` is the whole population.
    Cells with no members in some completed dataset are flagged ``empty``.
    """
    schema_ = iset.schema
    specs = {v.name: v for v in schema_}
    out = []
    for group in groups:
        group = tuple(group)
        for name in group:
            if name not in specs or not specs[name].is_categorical:
                raise ValueError(f"group variable {name!r} must be a categorical schema variable")
        for cell in itertools.product(*(specs[g].codes for g in group)):
            given = ",".join(f"{g}={c}" for g, c in zip(group, cell))
            text = f"P({target}|{given})" if given else f"P({target})"
            e = parse_estimand(text)
            e.validate(schema_)
            per = [ht_estimate(ds.values, schema_, iset.weights, e) for ds in iset.datasets]
            if any(not math.isfinite(q) for q, _ in per):
                out.append(SubgroupRow(group, cell, math.nan, math.nan, math.nan, "empty"))
                continue
            p = pool(per, alpha)
            out.append(SubgroupRow(group, cell, p.qbar, p.ci_low, p.ci_high))
    return out


def write_subgroups(path, rows: Sequence[SubgroupRow]) -> None:
    _write(path, ["groups", "cell", "estimate", "ci_low", "ci_high", "flag"], [
        [";".join(r.groups) or "all", ";".join(str(c) for c in r.cell) or "all",
         _fmt(r.estimate), _fmt(r.ci_low), _fmt(r.ci_high), r.flag]
        for r in rows
    ])
