"""Command-line interface: ``mdam <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_dict, load_config, write_config
from .dataset import write_table
from .estimation import ht_estimate, parse_estimand, pool
from .gibbs import PRINTED, STANDARD
from .mice import MiceConfig
from .pipeline import MethodArm, read_imputation_set, run_arm
from .simgen import appendix_b, generate_population, simulate_replicate
from .study import StudyConfig, run_study, subgroup_report, write_subgroups

log = logging.getLogger("mdam")

POOLED_HEADER = ["estimand", "qbar", "se", "ci_low", "ci_high", "df", "ubar", "b", "n_imputations"]


def _fmt(x) -> str:
    return "nan" if not math.isfinite(x) else ("inf" if math.isinf(x) else f"{x:.10g}")


def _write_csv(path, header, rows) -> None:
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _pooled_rows(pooled: dict) -> list:
    return [
        [name, _fmt(p.qbar), _fmt(p.se) if math.isfinite(p.total_var) else "nan",
         _fmt(p.ci_low), _fmt(p.ci_high), "inf" if math.isinf(p.df) else _fmt(p.df),
         _fmt(p.ubar), _fmt(p.b), str(p.n_imputations)]
        for name, p in pooled.items()
    ]


def _estimands(args, cfg=None):
    texts = list(args.estimand or [])
    if texts:
        return [parse_estimand(t) for t in texts]
    if cfg is not None and cfg.estimands:
        return cfg.estimands
    raise SystemExit("no estimands: pass --estimand or list them in the config")


def cmd_impute(args) -> int:
    cfg = load_config(args.config)
    table = cfg.load_data(args.data)
    mice = cfg.mice
    if args.cycles is not None:
        mice = MiceConfig(**{**mice.__dict__, "cycles": args.cycles})
    burn_in, thin, L = args.burn_in, args.thin, args.datasets
    if args.iterations is not None:
        if args.iterations <= burn_in:
            raise SystemExit("--iterations must exceed --burn-in")
        L = (args.iterations - burn_in) // thin
    arm = MethodArm(args.method, engine=args.engine, n_datasets=L, burn_in=burn_in, thin=thin, ratio=args.ratio)
    rng = np.random.default_rng(args.seed)
    iset = run_arm(
        table, cfg.margins, cfg.chain, arm, rng,
        weight_mode=cfg.weight_mode, design=cfg.design, mice_config=mice,
    )
    iset.info.update({
        "method": arm.name, "engine": arm.engine, "datasets": L, "seed": args.seed,
        "cycles": mice.cycles, "burn_in": burn_in, "thin": thin, "ratio": arm.ratio,
        "config": str(args.config), "version": __version__,
    })
    out = iset.write(args.out, weight_column=cfg.weight_column)
    log.info("wrote %d completed datasets to %s", len(iset), out)
    return 0


def cmd_estimate(args) -> int:
    iset = read_imputation_set(args.imputations)
    cfg = load_config(args.config) if args.config else None
    estimands = _estimands(args, cfg)
    rows = []
    for i, ds in enumerate(iset.datasets, 1):
        for e in estimands:
            e.validate(iset.schema)
            q, u = ht_estimate(ds.values, iset.schema, iset.weights, e, args.design)
            rows.append([str(i), e.name, _fmt(q), _fmt(u)])
    _write_csv(args.out, ["dataset", "estimand", "estimate", "variance"], rows)
    return 0


def cmd_pool(args) -> int:
    per = {}
    with open(args.estimates, newline="") as fh:
        for rec in csv.DictReader(fh):
            per.setdefault(rec["estimand"], []).append((float(rec["estimate"]), float(rec["variance"])))
    pooled = {name: pool(vals, args.alpha) for name, vals in per.items()}
    _write_csv(args.out, POOLED_HEADER, _pooled_rows(pooled))
    return 0


def cmd_report(args) -> int:
    iset = read_imputation_set(args.imputations)
    cfg = load_config(args.config) if args.config else None
    estimands = _estimands(args, cfg) if (args.estimand or (cfg and cfg.estimands)) else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pooled = {}
    for e in estimands:
        e.validate(iset.schema)
        pooled[e.name] = pool(
            [ht_estimate(ds.values, iset.schema, iset.weights, e, args.design) for ds in iset.datasets],
            args.alpha,
        )
    _write_csv(out / "pooled.csv", POOLED_HEADER, _pooled_rows(pooled))
    target = args.target or (cfg.subgroup_target if cfg else None)
    if target:
        groups = [tuple(g.split(",")) if g else () for g in args.group] if args.group else (
            cfg.subgroup_groups if cfg else [()]
        )
        write_subgroups(out / "subgroups.csv", subgroup_report(iset, target, groups, args.alpha))
    return 0


def _preset(args):
    if args.preset != "appendix-b":
        raise SystemExit(f"unknown preset {args.preset!r}")
    overrides = {}
    if args.population_size is not None:
        overrides["N"] = args.population_size
    return appendix_b(theta1=args.theta1, paper_scale=args.paper_scale, **overrides)


def cmd_simulate(args) -> int:
    config = _preset(args)
    root = np.random.SeedSequence(args.seed)
    pop_seed, *rep_seeds = root.spawn(1 + args.replicates)
    pop = generate_population(config, np.random.default_rng(pop_seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    margins = pop.margins()
    for i, s in enumerate(rep_seeds, 1):
        rep = simulate_replicate(pop, np.random.default_rng(s))
        write_table(rep.observed, out / f"observed-{i:03d}.csv")
        write_table(rep.complete, out / f"complete-{i:03d}.csv")
    write_config(
        out / "config.yaml",
        config_dict(
            rep.observed.schema, margins, "observed-001.csv", pop.N,
            chain=[{"variable": "X1", "terms": ["@weight"]}, {"variable": "X2", "terms": ["X1"]}],
            estimands=["T(X1=1)", "T(X2=1)", "T(X3=1)", "T(X4=1)", "T(X5)", "T(X6)"],
        ),
    )
    (out / "population.json").write_text(
        json.dumps({"config": config.to_dict(), "seed": args.seed, "N": pop.N}, indent=2, sort_keys=True) + "\n"
    )
    return 0


def cmd_simulate_study(args) -> int:
    population = _preset(args)
    config = StudyConfig(
        population=population,
        arms=tuple(a.upper() for a in args.arms.split(",")),
        replicates=args.replicates,
        n_datasets=args.datasets,
        seed=args.seed,
        mice_cycles=args.cycles,
        burn_in=args.burn_in,
        thin=args.thin,
        n_jobs=args.jobs,
    )
    progress = (lambda i, r: log.info("replicate %d/%d", i, r)) if args.verbose else None
    report = run_study(config, progress)
    report.write(args.out)
    if report.failures:
        log.warning("%d arm runs failed; see run-manifest.json", len(report.failures))
    return 0


def _add_preset(p, replicates_default):
    p.add_argument("--preset", default="appendix-b")
    p.add_argument("--theta1", type=float, default=-2.0)
    p.add_argument("--replicates", type=int, default=replicates_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--population-size", type=int, default=None)
    p.add_argument("--paper-scale", action="store_true", help="N = 3,373,378 and E[n] = 6000")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdam", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("impute", help="create completed datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="overrides data.path in the config")
    p.add_argument("--method", default="mmh", type=str.upper, choices=["MMH", "MH", "IH"])
    p.add_argument("--engine", choices=["mice", "gibbs"])
    p.add_argument("--datasets", type=int, default=20)
    p.add_argument("--cycles", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, help="gibbs: total iterations (sets the dataset count)")
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--thin", type=int, default=25)
    p.add_argument("--ratio", choices=[STANDARD, PRINTED], default=STANDARD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    for name, func, helptext in (
        ("estimate", cmd_estimate, "per-dataset estimates and variances"),
        ("report", cmd_report, "pooled estimates and subgroup proportions"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--imputations", required=True, help="imputation-set directory")
        p.add_argument("--config")
        p.add_argument("--estimand", action="append", help="e.g. 'T(X1=1)' or 'P(V=1|S=0)'")
        p.add_argument("--design", choices=["poisson", "pps"], default="poisson")
        p.add_argument("--alpha", type=float, default=0.05)
        if name == "report":
            p.add_argument("--target", help="subgroup proportion target, e.g. V=1")
            p.add_argument("--group", action="append", help="comma-separated grouping variables")
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--out", default="-")
        p.set_defaults(func=func)

    p = sub.add_parser("pool", help="Rubin's-rules pooling of an estimates file")
    p.add_argument("--estimates", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("simulate", help="write simulated samples and a config")
    _add_preset(p, 1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("simulate-study", help="repeated-sampling study")
    _add_preset(p, 100)
    p.add_argument("--datasets", type=int, default=20)
    p.add_argument("--arms", default="MMH,IH")
    p.add_argument("--cycles", type=int, default=5)
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--thin", type=int, default=25)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_simulate_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
