"""Monte-Carlo study runner: configs, metrics, overlap summaries, reports.

The pieces here turn the per-dataset estimators into repeatable
experiments: a config object that a YAML file can mirror one-to-one, a
replication loop that records every recipe on identical datasets, metric
aggregation with Monte-Carlo standard errors, the heavy-tail variance
diagnostics, and CSV/markdown rendering that round-trips exactly.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field, fields, replace
from itertools import product
from pathlib import Path

import numpy as np

from .constrained import solve_constrained_ols
from .datagen import (
    Dataset,
    KsConfig,
    gen_heavy_tail,
    gen_kang_schafer,
    heavy_tail_mean,
    load_csv,
    make_folds,
)
from .estimators import (
    RECIPES,
    RecipeOptions,
    propensity_values,
    run_recipe,
    with_options,
)
from .gbrt import BoostParams

OUTPUT_DIR_ENV = "CLEARNER_OUTPUT_DIR"

# Errors larger than this count as blow-ups in the stability columns; the
# plug-in error scale in every bundled design is a few units.
EXTREME_ERROR = 50.0

_Z95 = 1.959964


class ConfigError(ValueError):
    """Bad experiment configuration."""


@dataclass(frozen=True)
class DgpSpec:
    """Which generator a study draws from, with its knobs."""

    kind: str = "ks"
    c: float = 1.0
    misspecified: bool = True
    flipped: bool = False
    degenerate: bool = False
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("ks", "heavy_tail", "csv"):
            raise ConfigError(f"unknown dgp kind: {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("csv dgp needs a path")


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulation study: data source, recipes, model options, seeds.

    ``folds=None`` means the single-split mode where the whole sample is
    both train and eval. ``gbrt_grid`` is a mapping of BoostParams fields
    to candidate lists (scalars allowed for fixed fields); ``mlp_grid``
    maps network training fields to single values.
    """

    dgp: DgpSpec = field(default_factory=DgpSpec)
    n: int = 200
    replications: int = 1000
    folds: int | None = None
    recipes: tuple = ("direct",)
    trunc_eta: float | None = None
    outcome_features: tuple | None = None
    outcome_intercept: bool = True
    propensity_intercept: bool = True
    propensity_l1: float = 0.0
    scale_alpha: float = 0.1
    gbrt_grid: dict | None = None
    mlp_grid: dict | None = None
    seed_base: int = 4242
    output_dir: str | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if not self.recipes:
            raise ConfigError("recipes must be nonempty")
        known = set(RECIPES)
        if self.dgp.kind == "heavy_tail":
            # direct_oracle exists only as a known-propensity diagnostic form.
            known |= set(HEAVY_TAIL_RECIPES)
        unknown = [r for r in self.recipes if r not in known]
        if unknown:
            raise ConfigError(f"unknown recipes: {unknown}")
        if self.folds is not None and self.folds < 2:
            raise ConfigError(f"folds must be >= 2 or omitted, got {self.folds}")
        if self.trunc_eta is not None and not 0.0 < self.trunc_eta < 0.5:
            raise ConfigError(f"trunc_eta must be in (0, 0.5), got {self.trunc_eta}")
        needs_grid = {"clearner_gbrt", "lagrangian_gbrt"} & set(self.recipes)
        if needs_grid and not self.gbrt_grid:
            raise ConfigError(f"recipes {sorted(needs_grid)} need a gbrt_grid")
        if self.dgp.kind == "csv" and self.replications != 1:
            raise ConfigError("csv dgp re-reads the same file; use replications=1")

    def recipe_options(self, replication: int = 0) -> RecipeOptions:
        """Model options for one replication (seeds vary with ``replication``)."""
        gbrt_params = expand_gbrt_grid(self.gbrt_grid) if self.gbrt_grid else None
        mlp_cfg = None
        if self.mlp_grid is not None:
            from .mlp import TrainConfig

            known = {f.name for f in fields(TrainConfig)}
            bad = set(self.mlp_grid) - known
            if bad:
                raise ConfigError(f"unknown mlp fields: {sorted(bad)}")
            kwargs = dict(self.mlp_grid)
            if "hidden" in kwargs:
                kwargs["hidden"] = tuple(kwargs["hidden"])
            mlp_cfg = TrainConfig(**kwargs)
        return RecipeOptions(
            outcome_features=self.outcome_features,
            outcome_intercept=self.outcome_intercept,
            propensity_intercept=self.propensity_intercept,
            propensity_l1=self.propensity_l1,
            trunc_eta=self.trunc_eta,
            scale_alpha=self.scale_alpha,
            gbrt_grid=gbrt_params,
            mlp=mlp_cfg,
            seed=(self.seed_base, 23, replication),
        )


def expand_gbrt_grid(grid: dict) -> tuple:
    """Cartesian product of candidate lists, in the listed key order.

    Fields given as scalars apply to every candidate. Earlier grid entries
    win val-MSE ties downstream, so the listed order is part of the
    contract.
    """
    known = {f.name for f in fields(BoostParams)}
    bad = set(grid) - known
    if bad:
        raise ConfigError(f"unknown gbrt grid fields: {sorted(bad)}")
    varying = [(k, list(v)) for k, v in grid.items() if isinstance(v, (list, tuple))]
    fixed = {k: v for k, v in grid.items() if not isinstance(v, (list, tuple))}
    if any(not v for _, v in varying):
        raise ConfigError("gbrt grid lists must be nonempty")
    if not varying:
        return (BoostParams(**fixed),)
    names = [k for k, _ in varying]
    candidates = []
    for combo in product(*(v for _, v in varying)):
        candidates.append(BoostParams(**fixed, **dict(zip(names, combo))))
    return tuple(candidates)


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Build a config from a parsed YAML/JSON document.

    A ``preset`` key selects a named baseline; remaining keys override its
    fields. The ``dgp`` key may be a mapping of DgpSpec fields. Unknown
    keys raise ConfigError so typos fail loudly.
    """
    if not isinstance(mapping, dict):
        raise ConfigError("config document must be a mapping")
    data = dict(mapping)
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; try one of {sorted(PRESETS)}")
        base = PRESETS[preset]()
    else:
        base = ExperimentConfig()

    cfg_fields = {f.name for f in fields(ExperimentConfig)}
    bad = set(data) - cfg_fields
    if bad:
        raise ConfigError(f"unknown config keys: {sorted(bad)}")
    if "dgp" in data:
        spec = data["dgp"]
        if isinstance(spec, str):
            spec = {"kind": spec}
        if not isinstance(spec, dict):
            raise ConfigError("dgp must be a mapping or a kind string")
        dgp_fields = {f.name for f in fields(DgpSpec)}
        bad = set(spec) - dgp_fields
        if bad:
            raise ConfigError(f"unknown dgp keys: {sorted(bad)}")
        data["dgp"] = replace(base.dgp, **spec)
    for key in ("recipes", "outcome_features"):
        if key in data and data[key] is not None:
            data[key] = tuple(data[key])
    try:
        return replace(base, **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def generate_dataset(cfg: ExperimentConfig, replication: int) -> Dataset:
    """Draw the dataset for one replication of ``cfg``."""
    seed = (cfg.seed_base, replication)
    if cfg.dgp.kind == "ks":
        return gen_kang_schafer(
            KsConfig(
                n=cfg.n,
                c=cfg.dgp.c,
                misspecified=cfg.dgp.misspecified,
                flipped=cfg.dgp.flipped,
                seed=seed,
            )
        )
    if cfg.dgp.kind == "heavy_tail":
        return gen_heavy_tail(cfg.n, seed=seed, degenerate=cfg.dgp.degenerate)
    return load_csv(cfg.dgp.path)


def dataset_hash(dataset: Dataset) -> str:
    """Stable fingerprint used to verify paired replications."""
    digest = hashlib.sha256()
    for arr in (dataset.x, dataset.a, dataset.y):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()[:16]


RAW_COLUMNS = (
    "replication",
    "recipe",
    "psi_hat",
    "err",
    "ci_low",
    "ci_high",
    "covered",
    "failed",
    "min_pi",
    "max_inv_pi",
    "constraint_residual",
    "dataset_hash",
    "error",
)

_PROP_KEYS = ("min_pi", "max_pi", "sd_pi", "cvar5_pi", "max_inv_pi", "cvar5_inv_pi")


@dataclass
class SimulationReport:
    """Everything run_monte_carlo measured.

    ``metrics`` maps recipe name to the aggregate table row; ``rows`` is
    the raw per-replication record the aggregates are recomputed from;
    ``propensity`` carries the overlap summary (mean and median across
    replications of per-dataset fitted-propensity statistics).
    """

    config: ExperimentConfig
    metrics: dict
    rows: list
    propensity: dict | None = None

    def __post_init__(self):
        for name, row in self.metrics.items():
            cov = row["coverage"]
            if not math.isnan(cov) and not 0.0 <= cov <= 1.0:
                raise ValueError(f"coverage out of range for {name}: {cov}")
            if not math.isnan(row["rmse"]) and row["rmse"] < abs(row["bias"]) - 1e-12:
                raise ValueError(f"rmse below |bias| for {name}")


def _propensity_stats(pi: np.ndarray) -> dict:
    inv = 1.0 / pi
    k = max(1, int(math.floor(0.05 * pi.size)))
    lo = np.sort(pi)[:k]
    hi = np.sort(inv)[-k:]
    return {
        "min_pi": float(pi.min()),
        "max_pi": float(pi.max()),
        "sd_pi": float(pi.std(ddof=1)) if pi.size > 1 else 0.0,
        "cvar5_pi": float(lo.mean()),
        "max_inv_pi": float(inv.max()),
        "cvar5_inv_pi": float(hi.mean()),
    }


def _aggregate_propensity(per_rep: list) -> dict | None:
    usable = [row for row in per_rep if row is not None]
    if not usable:
        return None
    summary = {"replications": len(usable), "mean": {}, "median": {}}
    for key in _PROP_KEYS:
        values = np.array([row[key] for row in usable])
        summary["mean"][key] = float(values.mean())
        summary["median"][key] = float(np.median(values))
    return summary


def _metrics_from_rows(rows: list) -> dict:
    """Aggregate raw rows into per-recipe metric rows, in appearance order."""
    order = []
    grouped = {}
    for row in rows:
        name = row["recipe"]
        if name not in grouped:
            grouped[name] = []
            order.append(name)
        grouped[name].append(row)

    metrics = {}
    for name in order:
        recs = grouped[name]
        ok = [r for r in recs if not r["failed"] and math.isfinite(r["err"])]
        errs = np.array([r["err"] for r in ok])
        covered = np.array([r["covered"] for r in ok])
        n_used = errs.size
        out = {
            "n_used": n_used,
            "failures": len(recs) - len(ok),
            "extreme_count": int((np.abs(errs) > EXTREME_ERROR).sum()),
        }
        if n_used == 0:
            out.update(
                {
                    k: float("nan")
                    for k in (
                        "bias",
                        "bias_se",
                        "mae",
                        "mae_se",
                        "rmse",
                        "rmse_se",
                        "median_ae",
                        "median_ae_se",
                        "coverage",
                        "coverage_se",
                    )
                }
            )
            metrics[name] = out
            continue
        ae = np.abs(errs)
        sq = errs**2
        sd = float(errs.std(ddof=1)) if n_used > 1 else 0.0
        ae_sd = float(ae.std(ddof=1)) if n_used > 1 else 0.0
        sq_sd = float(sq.std(ddof=1)) if n_used > 1 else 0.0
        rmse = float(np.sqrt(sq.mean()))
        root_r = math.sqrt(n_used)
        cov = float(covered.mean())
        out.update(
            {
                "bias": float(errs.mean()),
                "bias_se": sd / root_r,
                "mae": float(ae.mean()),
                "mae_se": ae_sd / root_r,
                "rmse": rmse,
                "rmse_se": sq_sd / (2.0 * rmse * root_r) if rmse > 0 else 0.0,
                "median_ae": float(np.median(ae)),
                "median_ae_se": 1.2533 * ae_sd / root_r,
                "coverage": cov,
                "coverage_se": math.sqrt(cov * (1.0 - cov) / n_used),
            }
        )
        metrics[name] = out
    return metrics


def run_monte_carlo(cfg: ExperimentConfig) -> SimulationReport:
    """Replicate every recipe on shared datasets and aggregate the errors.

    Within a replication all recipes see the identical dataset and share
    one nuisance cache, so differences between rows are estimator
    differences only. A recipe failure is recorded in its row (``failed``,
    ``error``) and the run continues.
    """
    rows: list = []
    prop_rows: list = []
    for r in range(cfg.replications):
        ds = generate_dataset(cfg, r)
        dhash = dataset_hash(ds)
        folds = (
            make_folds(ds.n, cfg.folds, seed=(cfg.seed_base, r, 101))
            if cfg.folds is not None
            else None
        )
        opts = cfg.recipe_options(r)
        shared: dict = {}
        truth = ds.truth if ds.truth is not None else float("nan")
        for name in cfg.recipes:
            row = dict.fromkeys(RAW_COLUMNS, float("nan"))
            row.update(replication=r, recipe=name, dataset_hash=dhash, error="", failed=0)
            try:
                res = run_recipe(name, ds, folds=folds, options=opts, shared=shared)
            except Exception as exc:  # noqa: BLE001 - failures become rows
                row["failed"] = 1
                row["error"] = f"{type(exc).__name__}: {exc}"
            else:
                err = res.psi_hat - truth
                row.update(
                    psi_hat=res.psi_hat,
                    err=err,
                    ci_low=res.ci_low,
                    ci_high=res.ci_high,
                    covered=float(res.ci_low <= truth <= res.ci_high),
                    min_pi=res.diagnostics.get("min_pi", float("nan")),
                    max_inv_pi=res.diagnostics.get("max_inv_pi", float("nan")),
                    constraint_residual=res.diagnostics.get(
                        "constraint_residual", float("nan")
                    ),
                )
            rows.append(row)
        try:
            prop_rows.append(_propensity_stats(propensity_values(ds, opts, shared)))
        except Exception:  # noqa: BLE001 - summary is best-effort
            prop_rows.append(None)

    return SimulationReport(
        config=cfg,
        metrics=_metrics_from_rows(rows),
        rows=rows,
        propensity=_aggregate_propensity(prop_rows),
    )


def grid_search_gbrt(train, val, grid, seed=0) -> BoostParams:
    """Pick stage-1 params by validation MSE over an explicit grid.

    ``grid`` is either a mapping of fields to candidate lists or an
    iterable of ready BoostParams; ties keep the earliest candidate.
    """
    from . import gbrt

    candidates = expand_gbrt_grid(grid) if isinstance(grid, dict) else tuple(grid)
    if not candidates:
        raise ConfigError("empty gbrt grid")
    return gbrt.grid_search(train, val, candidates, seed=seed)


# Recipes the known-propensity diagnostics can score. Each entry maps the
# fitted outcome predictions and the true propensities to an estimate.
HEAVY_TAIL_RECIPES = (
    "direct",
    "direct_oracle",
    "ipw",
    "ipw_sn",
    "aipw",
    "aipw_sn",
    "tmle",
    "clearner_linear",
)


def _known_pi_estimates(ds: Dataset, recipes) -> dict:
    """Closed-form estimates on one heavy-tail draw with known propensities."""
    pi = ds.true_pi
    a = ds.a
    y = ds.y
    design = np.column_stack([np.ones(ds.n), ds.x])
    treated = a == 1.0
    beta, *_ = np.linalg.lstsq(design[treated], y[treated], rcond=None)
    mu = design @ beta
    w = np.zeros(ds.n)
    w[treated] = 1.0 / pi[treated]
    wy = np.zeros(ds.n)
    wy[treated] = y[treated] / pi[treated]
    resid = np.zeros(ds.n)
    resid[treated] = (y[treated] - mu[treated]) / pi[treated]

    out = {}
    for name in recipes:
        if name == "direct":
            out[name] = float(mu.mean())
        elif name == "direct_oracle":
            out[name] = float(heavy_tail_mean(ds.x).mean())
        elif name == "ipw":
            out[name] = float(wy.mean())
        elif name == "ipw_sn":
            out[name] = float(wy.sum() / w.sum())
        elif name == "aipw":
            out[name] = float(mu.mean() + resid.mean())
        elif name == "aipw_sn":
            out[name] = float(mu.mean() + resid.sum() / w.sum())
        elif name == "tmle":
            den = float((w[treated] ** 2).sum())
            eps = resid.sum() / den if den > 0 else 0.0
            out[name] = float((mu + eps * (1.0 / pi)).mean())
        elif name == "clearner_linear":
            h_t = 1.0 / pi[treated]
            cfit = solve_constrained_ols(
                design[treated], y[treated], h_t, design[treated], y[treated], h_t
            )
            out[name] = float((design @ cfit.theta).mean())
        else:
            raise ConfigError(f"recipe {name!r} has no known-propensity form")
    return out


def _heavy_tail_errors(n, replications, seed, recipes) -> dict:
    errs = {name: np.empty(replications) for name in recipes}
    for r in range(replications):
        ds = gen_heavy_tail(n, seed=(*seed, r))
        est = _known_pi_estimates(ds, recipes)
        for name in recipes:
            errs[name][r] = est[name] - ds.truth
    return errs


def heavy_tail_diagnostic(cfg: ExperimentConfig) -> dict:
    """Tail and running-variance behavior with known propensities.

    Estimators use the true uniform propensities; only the outcome model
    is fitted. Reports per-recipe absolute-error quantiles, the running
    sample variance along the replication sequence, and the 99.5%
    tail-error ratio of AIPW to the constrained linear learner when both
    are present.
    """
    if cfg.dgp.kind != "heavy_tail":
        raise ConfigError("heavy_tail_diagnostic needs a heavy_tail dgp")
    bad = [r for r in cfg.recipes if r not in HEAVY_TAIL_RECIPES]
    if bad:
        raise ConfigError(f"recipes without a known-propensity form: {bad}")
    errs = _heavy_tail_errors(cfg.n, cfg.replications, (cfg.seed_base,), cfg.recipes)

    checkpoints = np.unique(
        np.geomspace(min(50, cfg.replications), cfg.replications, 25).astype(int)
    )
    quantiles = {}
    running = {}
    for name, e in errs.items():
        ae = np.abs(e)
        quantiles[name] = {
            "q50": float(np.quantile(ae, 0.50)),
            "q90": float(np.quantile(ae, 0.90)),
            "q99": float(np.quantile(ae, 0.99)),
            "q99.5": float(np.quantile(ae, 0.995)),
        }
        running[name] = [
            (int(m), float(e[:m].var(ddof=1)) if m > 1 else 0.0) for m in checkpoints
        ]

    report = {
        "n": cfg.n,
        "replications": cfg.replications,
        "quantiles": quantiles,
        "running_variance": running,
        "errors": {name: e.tolist() for name, e in errs.items()},
    }
    if "aipw" in errs and "clearner_linear" in errs:
        report["tail_ratio"] = quantiles["aipw"]["q99.5"] / quantiles["clearner_linear"]["q99.5"]
    return report


def heavy_tail_meta(
    n: int = 500,
    replications: int = 5000,
    prefix: int = 500,
    meta_reps: int = 20,
    seed_base: int = 4242,
    recipes=("aipw", "clearner_linear"),
) -> dict:
    """Repeat the running-variance experiment and count (non-)stabilizations.

    For each meta-repetition the ratio var(all R) / var(first ``prefix``)
    is computed per recipe. Inverse-propensity corrections with uniform
    propensities keep finding larger summands, so their ratio keeps
    exceeding 2; the constrained learner's errors are square-integrable
    and the ratio concentrates near 1.
    """
    if prefix < 2 or prefix >= replications:
        raise ConfigError("prefix must be in [2, replications)")
    ratios = {name: np.empty(meta_reps) for name in recipes}
    for m in range(meta_reps):
        errs = _heavy_tail_errors(n, replications, (seed_base, 577, m), recipes)
        for name, e in errs.items():
            early = float(e[:prefix].var(ddof=1))
            ratios[name][m] = float(e.var(ddof=1)) / early if early > 0 else float("inf")
    out = {
        "n": n,
        "replications": replications,
        "prefix": prefix,
        "meta_reps": meta_reps,
        "ratios": {name: r.tolist() for name, r in ratios.items()},
    }
    if "aipw" in ratios:
        out["aipw_nonstabilized_fraction"] = float((ratios["aipw"] > 2.0).mean())
    if "clearner_linear" in ratios:
        out["clearner_stabilized_fraction"] = float(
            (ratios["clearner_linear"] < 1.5).mean()
        )
    return out


def _resolve_out_dir(out_dir, config_dir) -> Path:
    chosen = out_dir or config_dir or os.environ.get(OUTPUT_DIR_ENV) or "."
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


METRIC_COLUMNS = (
    "recipe",
    "bias",
    "bias_se",
    "mae",
    "mae_se",
    "rmse",
    "rmse_se",
    "median_ae",
    "median_ae_se",
    "coverage",
    "coverage_se",
    "failures",
    "extreme_count",
    "n_used",
)


def _write_metrics_csv(metrics: dict, path: Path):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for name, row in metrics.items():
            writer.writerow([name] + [_fmt(row[c]) for c in METRIC_COLUMNS[1:]])


def _write_metrics_markdown(metrics: dict, propensity: dict | None, path: Path):
    lines = [
        "| estimator | bias (se) | MAE (se) | RMSE | median AE | coverage | failures |",
        "| --- | --- | --- | --- | --- | --- | --- |",
    ]
    for name, row in metrics.items():
        lines.append(
            "| {} | {:.2f} ({:.2f}) | {:.2f} ({:.2f}) | {:.2f} | {:.2f} | {:.3f} | {} |".format(
                name,
                row["bias"],
                row["bias_se"],
                row["mae"],
                row["mae_se"],
                row["rmse"],
                row["median_ae"],
                row["coverage"],
                row["failures"],
            )
        )
    if propensity is not None:
        lines += [
            "",
            "| overlap statistic | mean | median |",
            "| --- | --- | --- |",
        ]
        for key in _PROP_KEYS:
            lines.append(
                "| {} | {:.6g} | {:.6g} |".format(
                    key, propensity["mean"][key], propensity["median"][key]
                )
            )
    path.write_text("\n".join(lines) + "\n")


def _write_raw_csv(rows: list, path: Path):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAW_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RAW_COLUMNS])


def _write_propensity_csv(propensity: dict, path: Path):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["statistic", "mean", "median"])
        for key in _PROP_KEYS:
            writer.writerow(
                [key, _fmt(propensity["mean"][key]), _fmt(propensity["median"][key])]
            )


def render_report(report: SimulationReport, format: str = "csv", out_dir=None) -> list:
    """Write the metrics table plus the raw per-replication CSV.

    Returns the written paths. CSV numbers use shortest round-trip float
    formatting, so parsing them back reproduces the aggregates exactly.
    """
    if format not in ("csv", "markdown"):
        raise ConfigError(f"unknown report format: {format!r}")
    out = _resolve_out_dir(out_dir, report.config.output_dir)
    paths = []
    raw_path = out / "raw.csv"
    _write_raw_csv(report.rows, raw_path)
    paths.append(raw_path)
    if format == "csv":
        metrics_path = out / "metrics.csv"
        _write_metrics_csv(report.metrics, metrics_path)
        paths.append(metrics_path)
        if report.propensity is not None:
            prop_path = out / "propensity.csv"
            _write_propensity_csv(report.propensity, prop_path)
            paths.append(prop_path)
    else:
        metrics_path = out / "metrics.md"
        _write_metrics_markdown(report.metrics, report.propensity, metrics_path)
        paths.append(metrics_path)
    return [str(p) for p in paths]


def render_metrics(metrics: dict, format: str = "csv", out_dir=None) -> str:
    """Write just the metrics table (used when re-rendering from raw rows)."""
    if format not in ("csv", "markdown"):
        raise ConfigError(f"unknown report format: {format!r}")
    out = _resolve_out_dir(out_dir, None)
    if format == "csv":
        path = out / "metrics.csv"
        _write_metrics_csv(metrics, path)
    else:
        path = out / "metrics.md"
        _write_metrics_markdown(metrics, None, path)
    return str(path)


def load_raw_csv(path) -> list:
    """Parse a raw.csv back into row dicts (numbers as floats)."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RAW_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"raw csv missing columns: {sorted(missing)}")
        for rec in reader:
            row = dict(rec)
            row["replication"] = int(rec["replication"])
            row["failed"] = int(rec["failed"])
            for key in ("psi_hat", "err", "ci_low", "ci_high", "covered",
                        "min_pi", "max_inv_pi", "constraint_residual"):
                row[key] = float(rec[key])
            rows.append(row)
    return rows


def aggregate_raw(rows: list) -> dict:
    """Recompute the metrics table from raw rows (the round-trip identity)."""
    return _metrics_from_rows(rows)


def load_metrics_csv(path) -> dict:
    """Parse a metrics.csv back into the metrics mapping."""
    metrics = {}
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            name = rec.pop("recipe")
            row = {}
            for key, value in rec.items():
                row[key] = int(value) if key in ("failures", "extreme_count", "n_used") else float(value)
            metrics[name] = row
    return metrics


_LINEAR_KS = dict(
    outcome_features=(0, 1, 3),
    outcome_intercept=False,
    propensity_intercept=False,
)

_TABLE1_RECIPES = ("direct", "ipw", "ipw_sn", "aipw", "aipw_sn", "tmle", "clearner_linear")


def preset_table1_linear(n=200, replications=1000, seed_base=4242) -> ExperimentConfig:
    """Misspecified-covariate benchmark, linear nuisances, single split."""
    return ExperimentConfig(
        dgp=DgpSpec(kind="ks"),
        n=n,
        replications=replications,
        recipes=_TABLE1_RECIPES,
        seed_base=seed_base,
        **_LINEAR_KS,
    )


def preset_table1_logistic(n=200, replications=1000, seed_base=4242) -> ExperimentConfig:
    """Logistic-link outcome models on the scaled response."""
    return ExperimentConfig(
        dgp=DgpSpec(kind="ks"),
        n=n,
        replications=replications,
        recipes=("tmle_l", "clearner_l"),
        seed_base=seed_base,
        **_LINEAR_KS,
    )


def preset_truncation(eta=0.05, n=200, replications=1000, seed_base=4242) -> ExperimentConfig:
    """Same benchmark with propensities floored at ``eta``."""
    return replace(preset_table1_linear(n, replications, seed_base), trunc_eta=eta)


def preset_dual(n=200, replications=1000, seed_base=4242) -> ExperimentConfig:
    """Propensity-side constrained fits and the parametric fluctuations."""
    return ExperimentConfig(
        dgp=DgpSpec(kind="ks"),
        n=n,
        replications=replications,
        recipes=("direct", "dual_clearner", "dual_clearner_sn", "param_fluc", "param_fluc_sn"),
        seed_base=seed_base,
        **_LINEAR_KS,
    )


def preset_flipped(n=200, replications=1000, seed_base=4242) -> ExperimentConfig:
    """Relabeled arms: the estimation target is the rarely observed arm."""
    return ExperimentConfig(
        dgp=DgpSpec(kind="ks", flipped=True),
        n=n,
        replications=replications,
        recipes=_TABLE1_RECIPES,
        seed_base=seed_base,
        **_LINEAR_KS,
    )


def preset_overlap(c=1.0, n=200, replications=200, seed_base=4242) -> ExperimentConfig:
    """Overlap ladder point: the logit scale ``c`` controls degradation."""
    return ExperimentConfig(
        dgp=DgpSpec(kind="ks", c=c),
        n=n,
        replications=replications,
        recipes=("aipw", "clearner_linear"),
        seed_base=seed_base,
        **_LINEAR_KS,
    )


_DESK_GRID = {
    "eta": [0.05, 0.1],
    "colsample": [0.8],
    "max_depth": [3],
    "max_trees_j": 500,
    "max_trees_k": 500,
}

# Appendix-scale search: 4 x 3 x 3 = 36 candidates. Budget several hours
# at R=100; the desk preset below is the default for that reason.
FULL_GBRT_GRID = {
    "eta": [0.01, 0.05, 0.1, 0.2],
    "colsample": [0.5, 0.8, 1.0],
    "max_depth": [3, 4, 5],
    "max_trees_j": 500,
    "max_trees_k": 500,
}


def preset_gbrt_desk(n=200, replications=100, seed_base=4242) -> ExperimentConfig:
    """Cross-fitted boosted-tree benchmark at desk scale (reduced grid)."""
    return ExperimentConfig(
        dgp=DgpSpec(kind="ks"),
        n=n,
        replications=replications,
        folds=2,
        recipes=("direct", "aipw", "tmle", "clearner_gbrt", "lagrangian_gbrt"),
        gbrt_grid=dict(_DESK_GRID),
        propensity_l1=1e-4 * n,
        seed_base=seed_base,
    )


def preset_gbrt_full(n=200, replications=100, seed_base=4242) -> ExperimentConfig:
    """Full hyperparameter grid; expect a long run."""
    return replace(preset_gbrt_desk(n, replications, seed_base), gbrt_grid=dict(FULL_GBRT_GRID))


def preset_heavy_tail(n=500, replications=5000, seed_base=4242) -> ExperimentConfig:
    """Known-propensity heavy-tail design for the variance diagnostics."""
    return ExperimentConfig(
        dgp=DgpSpec(kind="heavy_tail"),
        n=n,
        replications=replications,
        recipes=("direct", "ipw", "aipw", "tmle", "clearner_linear"),
        seed_base=seed_base,
    )


PRESETS = {
    "table1_linear": preset_table1_linear,
    "table1_logistic": preset_table1_logistic,
    "truncation": preset_truncation,
    "dual": preset_dual,
    "flipped": preset_flipped,
    "overlap": preset_overlap,
    "gbrt_desk": preset_gbrt_desk,
    "gbrt_full": preset_gbrt_full,
    "heavy_tail": preset_heavy_tail,
}
