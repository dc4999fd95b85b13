"""Command-line interface.

Subcommands: ``simulate`` writes a drawn dataset as CSV, ``estimate``
prints recipe results for one dataset as JSON lines, ``benchmark`` runs a
Monte-Carlo study from a YAML config, ``heavytail`` runs the variance
diagnostics, and ``report`` re-renders a metrics table from a raw CSV.
Exit codes: 0 success, 2 configuration problem, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import yaml

from .datagen import DataError, KsConfig, gen_heavy_tail, gen_kang_schafer, load_csv, make_folds
from .estimators import RecipeOptions, run_recipe
from .harness import (
    ConfigError,
    aggregate_raw,
    config_from_mapping,
    heavy_tail_diagnostic,
    heavy_tail_meta,
    load_raw_csv,
    preset_heavy_tail,
    render_metrics,
    render_report,
    run_monte_carlo,
    _resolve_out_dir,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clearner",
        description="Constrained outcome-model estimation of a mean missing outcome.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw one dataset and write it as CSV")
    sim.add_argument("--dgp", choices=("ks", "heavy_tail"), default="ks")
    sim.add_argument("--n", type=int, default=200)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--c", type=float, default=1.0, help="treatment logit scale (ks)")
    sim.add_argument("--well-specified", action="store_true",
                     help="emit the raw covariates instead of the distorted ones (ks)")
    sim.add_argument("--flipped", action="store_true", help="relabel the arms (ks)")
    sim.add_argument("--degenerate", action="store_true",
                     help="everyone treated (heavy_tail)")
    sim.add_argument("--out", required=True, help="CSV path to write")

    est = sub.add_parser("estimate", help="run recipes on a dataset CSV")
    est.add_argument("--data", required=True)
    est.add_argument("--recipe", action="append", required=True,
                     help="recipe name; repeatable, commas allowed")
    est.add_argument("--folds", type=int, default=None,
                     help="cross-fitting folds (default: single split)")
    est.add_argument("--trunc-eta", type=float, default=None)
    est.add_argument("--outcome-features", default=None,
                     help="comma-separated covariate indices for the outcome model")
    est.add_argument("--no-outcome-intercept", action="store_true")
    est.add_argument("--no-propensity-intercept", action="store_true")
    est.add_argument("--propensity-l1", type=float, default=0.0)
    est.add_argument("--seed", type=int, default=0)

    ben = sub.add_parser("benchmark", help="run a Monte-Carlo study from a config file")
    ben.add_argument("--config", required=True, help="YAML mirroring ExperimentConfig fields")
    ben.add_argument("--out-dir", default=None)
    ben.add_argument("--format", choices=("csv", "markdown"), default="csv")

    ht = sub.add_parser("heavytail", help="known-propensity variance diagnostics")
    ht.add_argument("--n", type=int, default=500)
    ht.add_argument("--replications", type=int, default=5000)
    ht.add_argument("--meta", type=int, default=0,
                    help="meta-repetitions of the running-variance experiment")
    ht.add_argument("--prefix", type=int, default=500)
    ht.add_argument("--seed-base", type=int, default=4242)
    ht.add_argument("--out-dir", default=None)

    rep = sub.add_parser("report", help="re-render a metrics table from raw.csv")
    rep.add_argument("--raw", required=True)
    rep.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    rep.add_argument("--out-dir", default=None)

    return parser


def _cmd_simulate(args) -> int:
    if args.dgp == "ks":
        ds = gen_kang_schafer(
            KsConfig(
                n=args.n,
                c=args.c,
                misspecified=not args.well_specified,
                flipped=args.flipped,
                seed=args.seed,
            )
        )
    else:
        ds = gen_heavy_tail(args.n, seed=args.seed, degenerate=args.degenerate)

    path = Path(args.out)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"x{j + 1}" for j in range(ds.d)] + ["a", "y"]
    if ds.true_pi is not None:
        header.append("pi")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.x[i]]
            row += [repr(float(ds.a[i])), repr(float(ds.y[i]))]
            if ds.true_pi is not None:
                row.append(repr(float(ds.true_pi[i])))
            writer.writerow(row)
    print(f"wrote {ds.n} rows to {path}")
    return 0


def _json_safe(diagnostics: dict) -> dict:
    out = {}
    for key, value in diagnostics.items():
        if key == "per_fold":
            continue
        if isinstance(value, bool) or value is None:
            out[key] = value
        elif isinstance(value, (int, float)):
            out[key] = float(value)
        elif isinstance(value, str):
            out[key] = value
    return out


def _cmd_estimate(args) -> int:
    ds = load_csv(args.data)
    names = [name for chunk in args.recipe for name in chunk.split(",") if name]
    if not names:
        raise ConfigError("no recipes given")
    folds = None
    if args.folds is not None:
        folds = make_folds(ds.n, args.folds, seed=(args.seed, 101))
    features = None
    if args.outcome_features:
        features = tuple(int(tok) for tok in args.outcome_features.split(","))
    opts = RecipeOptions(
        outcome_features=features,
        outcome_intercept=not args.no_outcome_intercept,
        propensity_intercept=not args.no_propensity_intercept,
        propensity_l1=args.propensity_l1,
        trunc_eta=args.trunc_eta,
        seed=args.seed,
    )
    shared: dict = {}
    for name in names:
        res = run_recipe(name, ds, folds=folds, options=opts, shared=shared)
        print(
            json.dumps(
                {
                    "recipe": name,
                    "psi_hat": res.psi_hat,
                    "variance": res.variance,
                    "ci_low": res.ci_low,
                    "ci_high": res.ci_high,
                    "diagnostics": _json_safe(res.diagnostics),
                }
            )
        )
    return 0


def _cmd_benchmark(args) -> int:
    with open(args.config) as fh:
        doc = yaml.safe_load(fh)
    cfg = config_from_mapping(doc or {})
    report = run_monte_carlo(cfg)
    paths = render_report(report, format=args.format, out_dir=args.out_dir)
    for name, row in report.metrics.items():
        print(
            f"{name}: bias={row['bias']:.3f} mae={row['mae']:.3f} "
            f"coverage={row['coverage']:.3f} failures={row['failures']}"
        )
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_heavytail(args) -> int:
    cfg = preset_heavy_tail(
        n=args.n, replications=args.replications, seed_base=args.seed_base
    )
    diag = heavy_tail_diagnostic(cfg)
    payload = {"diagnostic": diag}
    for name, quant in diag["quantiles"].items():
        print(
            f"{name}: q50={quant['q50']:.3f} q90={quant['q90']:.3f} "
            f"q99={quant['q99']:.3f} q99.5={quant['q99.5']:.3f}"
        )
    if "tail_ratio" in diag:
        print(f"tail ratio (aipw / clearner_linear, q99.5): {diag['tail_ratio']:.2f}")
    if args.meta > 0:
        meta = heavy_tail_meta(
            n=args.n,
            replications=args.replications,
            prefix=args.prefix,
            meta_reps=args.meta,
            seed_base=args.seed_base,
        )
        payload["meta"] = meta
        print(
            "aipw non-stabilized fraction: "
            f"{meta.get('aipw_nonstabilized_fraction', float('nan')):.2f}"
        )
        print(
            "clearner stabilized fraction: "
            f"{meta.get('clearner_stabilized_fraction', float('nan')):.2f}"
        )
    out = _resolve_out_dir(args.out_dir, None)
    path = out / "heavy_tail.json"
    path.write_text(json.dumps(payload))
    print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    rows = load_raw_csv(args.raw)
    metrics = aggregate_raw(rows)
    path = render_metrics(metrics, format=args.format, out_dir=args.out_dir)
    print(f"wrote {path}")
    return 0


_DISPATCH = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "benchmark": _cmd_benchmark,
    "heavytail": _cmd_heavytail,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except yaml.YAMLError as exc:
        print(f"error: bad config file: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
