"""
Multi-seed synthetic experiments: end-to-end accuracy, ablations and localization concordance
"""

import logging
import time
from typing import Callable, Dict, Mapping, Sequence

import pandas as pd

from app.config.settings import RunConfig
from app.errors import UsageError
from app.tools.synthdata import gen_splits
from app.training.trainer import evaluate, train

logger = logging.getLogger(__name__)

GATED = "gated"
GLOBAL_ONLY = "global_only"
AVERAGE = "average"

DEFAULT_SEEDS = (0, 1, 2)

MIN_ACCURACY = 0.90
MIN_LOC_IOU = 0.30
MIN_BOX_COVERAGE = 0.60
# seeds out of three that must agree for the per-seed checks
MIN_AGREEING_SEEDS = 2

Variant = Callable[[RunConfig], RunConfig]


def _global_only(config: RunConfig) -> RunConfig:
    return config.model_copy(update={"layout": config.layout.model_copy(update={"fusion": False})})


def _average(config: RunConfig) -> RunConfig:
    attention = config.attention.model_copy(update={"attention_mode": "average"})
    return config.model_copy(update={"attention": attention})


VARIANTS: Dict[str, Variant] = {
    GATED: lambda config: config,
    GLOBAL_ONLY: _global_only,
    AVERAGE: _average,
}


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    return config.model_copy(update={"train": config.train.model_copy(update={"seed": seed})})


def run_experiments(
    config: RunConfig,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    variants: Sequence[str] = tuple(VARIANTS),
    progress: bool = False,
) -> pd.DataFrame:
    """
    Train and evaluate every variant on the same synthetic splits, once per seed.

    The seed drives both the dataset and the initialization, so the variants of
    one seed see identical train and test samples.

    Args:
        config: Base run configuration; the gated variant uses it unchanged
        seeds: Training seeds
        variants: Names from VARIANTS
        progress: Show a tqdm bar over the epochs of each run

    Returns:
        One row per (seed, variant) with the test-split metrics and wall time
    """
    unknown = [name for name in variants if name not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s): {', '.join(unknown)}; choose from {', '.join(VARIANTS)}")
    if not seeds:
        raise UsageError("at least one seed is required")

    rows = []
    for seed in seeds:
        base = _with_seed(config, seed)
        synth = base.synth
        train_set, test_set = gen_splits(synth.train_per_class, synth.test_per_class, seed, synth)
        for name in variants:
            run = VARIANTS[name](base)
            network = run.network_config()
            started = time.perf_counter()
            result = train(train_set, network, run.train, progress=progress)
            metrics = evaluate(test_set, result.params, network)
            seconds = time.perf_counter() - started
            logger.info(
                f"seed {seed} {name}: accuracy {metrics.accuracy:.3f} "
                f"loc_iou {metrics.mean_loc_iou} coverage {metrics.box_coverage} ({seconds:.1f}s)"
            )
            rows.append(
                {
                    "seed": seed,
                    "variant": name,
                    "accuracy": metrics.accuracy,
                    "mean_loc_iou": metrics.mean_loc_iou,
                    "box_coverage": metrics.box_coverage,
                    "mean_loss": metrics.mean_loss,
                    "final_train_loss": result.history[-1].loss if result.history else None,
                    "seconds": seconds,
                }
            )
    return pd.DataFrame(rows)


def summarize_experiments(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of every metric per variant."""
    metrics = ["accuracy", "mean_loc_iou", "box_coverage", "mean_loss", "seconds"]
    return frame.groupby("variant", sort=False)[metrics].agg(["mean", "std"])


def acceptance_checks(frame: pd.DataFrame) -> Mapping[str, bool]:
    """
    Score the gated rows of an experiment frame.

    Checks that need a variant absent from the frame are left out.
    """
    by_variant = frame.set_index(["variant", "seed"])
    if GATED not in by_variant.index.get_level_values("variant"):
        raise UsageError("experiment frame has no gated runs")
    gated = by_variant.loc[GATED]
    needed = min(MIN_AGREEING_SEEDS, len(gated))

    checks: Dict[str, bool] = {
        "end_to_end_accuracy": bool(gated["accuracy"].mean() >= MIN_ACCURACY),
        "localization_concordance": bool(
            (
                (gated["mean_loc_iou"].fillna(0.0) >= MIN_LOC_IOU)
                & (gated["box_coverage"].fillna(0.0) >= MIN_BOX_COVERAGE)
            ).sum()
            >= needed
        ),
    }
    for name, key in ((GLOBAL_ONLY, "gated_vs_global_only"), (AVERAGE, "gated_vs_average")):
        if name in by_variant.index.get_level_values("variant"):
            other = by_variant.loc[name]["accuracy"]
            wins = (gated["accuracy"] >= other.reindex(gated.index)).sum()
            checks[key] = bool(wins >= needed)
    return checks
