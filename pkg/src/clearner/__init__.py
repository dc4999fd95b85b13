"""Constrained-learning debiased estimation with a Monte-Carlo benchmark harness."""

from clearner.datagen import (
    Dataset,
    FoldPlan,
    KsConfig,
    flipped_truth,
    gen_heavy_tail,
    gen_kang_schafer,
    load_csv,
    make_folds,
)
from clearner.estimators import RECIPES, EstimateResult, RecipeOptions, run_recipe

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FoldPlan",
    "KsConfig",
    "flipped_truth",
    "gen_heavy_tail",
    "gen_kang_schafer",
    "load_csv",
    "make_folds",
    "RECIPES",
    "EstimateResult",
    "RecipeOptions",
    "run_recipe",
    "__version__",
]
