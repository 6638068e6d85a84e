"""Subject-disjoint splits, IoU scoring, method comparison, boxplot stats.

The split generator runs on the pinned portable PRNG from :mod:`irisseg.rng`
so plans reproduce exactly from a seed anywhere.  IoU failures (a segmenter
raising :class:`NoBoundaryFound`) score 0 rather than being dropped, so means
stay comparable across methods.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample
from .errors import ConfigError, NoBoundaryFound, ShapeError
from .rng import Xoshiro256StarStar


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of two binary masks; both-empty counts as 1.0."""
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = int(np.logical_or(pred, truth).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(pred, truth).sum())
    return inter / union


@dataclass
class SplitPlan:
    """Per-split train/test subject assignments (sorted lists) plus the seed."""

    splits: list[tuple[list[str], list[str]]]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed,
                "splits": [{"train": tr, "test": te} for tr, te in self.splits]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls([(list(s["train"]), list(s["test"])) for s in d["splits"]],
                   int(d["seed"]))


def make_splits(subject_ids, n_splits: int = 10, n_test: int = 3, seed: int = 0) -> SplitPlan:
    """Draw `n_splits` independent subject-disjoint splits.

    Per split: sort the subject ids, Fisher-Yates shuffle with the portable
    generator, take the first `n_test` as the test side.  Draws continue on
    one stream, so splits are independent but the whole plan is a pure
    function of (subject_ids, n_splits, n_test, seed).
    """
    ids = sorted(set(subject_ids))
    if len(ids) <= n_test:
        raise ConfigError(f"need more than {n_test} subjects, got {len(ids)}")
    if n_splits < 1 or n_test < 1:
        raise ConfigError("n_splits and n_test must be >= 1")
    gen = Xoshiro256StarStar(seed)
    splits = []
    for _ in range(n_splits):
        pool = list(ids)
        gen.shuffle(pool)
        test = sorted(pool[:n_test])
        train = sorted(pool[n_test:])
        splits.append((train, test))
    return SplitPlan(splits, seed)


@dataclass
class IoUResult:
    per_image: list[tuple[str, float]]
    mean_iou: float


def evaluate(segmenter, samples: list[tuple[Sample, np.ndarray]]) -> IoUResult:
    """Score a segmenter (image -> mask) over (sample, truth) pairs.

    A NoBoundaryFound from the segmenter records IoU 0 for that sample.
    """
    if not samples:
        raise ConfigError("evaluate needs at least one sample")
    per_image = []
    for i, (sample, truth) in enumerate(samples):
        sample_id = sample.source_path or f"sample:{i:04d}"
        try:
            pred = segmenter(sample.image)
        except NoBoundaryFound:
            per_image.append((sample_id, 0.0))
            continue
        per_image.append((sample_id, iou(pred, truth)))
    values = [v for _, v in per_image]
    return IoUResult(per_image, float(np.mean(values)))


@dataclass
class ComparisonRow:
    label: str
    mean_iou_a: float
    mean_iou_b: float
    improvement_pct: float | None  # None when a == 0 (undefined improvement)


def improvement_pct(a: float, b: float) -> float | None:
    if a == 0:
        return None
    return 100.0 * (b - a) / a


def compare(a: list[float], b: list[float]) -> list[ComparisonRow]:
    """Row-wise improvement of b over a, plus an average row.

    The average row compares the means of the two columns (not the mean of
    the row improvements).
    """
    if len(a) != len(b):
        raise ShapeError(f"column lengths differ: {len(a)} vs {len(b)}")
    if not a:
        raise ConfigError("compare needs at least one row")
    rows = [ComparisonRow(f"split {i + 1}", ai, bi, improvement_pct(ai, bi))
            for i, (ai, bi) in enumerate(zip(a, b))]
    mean_a = float(np.mean(a))
    mean_b = float(np.mean(b))
    rows.append(ComparisonRow("average", mean_a, mean_b, improvement_pct(mean_a, mean_b)))
    return rows


@dataclass
class BoxplotStats:
    median: float
    q1: float
    q3: float
    iqr: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]


def boxplot_stats(values) -> BoxplotStats:
    """Quartiles by linear interpolation between closest order statistics;
    whiskers clamp to the data inside the Q1-1.5*IQR / Q3+1.5*IQR fences."""
    vals = np.asarray(list(values), dtype=float)
    if vals.size == 0:
        raise ConfigError("boxplot_stats needs a nonempty list")
    q1, med, q3 = np.percentile(vals, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    fence_low = q1 - 1.5 * iqr
    fence_high = q3 + 1.5 * iqr
    outliers = vals[(vals < fence_low) | (vals > fence_high)]
    return BoxplotStats(float(med), float(q1), float(q3), float(iqr),
                        float(max(vals.min(), fence_low)), float(min(vals.max(), fence_high)),
                        [float(v) for v in np.sort(outliers)])


def boxplot_stats_as_dict(stats: BoxplotStats) -> dict:
    return {"median": stats.median, "q1": stats.q1, "q3": stats.q3, "iqr": stats.iqr,
            "whisker_low": stats.whisker_low, "whisker_high": stats.whisker_high,
            "outliers": stats.outliers}
