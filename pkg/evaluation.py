# Stratified splitting, confusion matrices and accuracy metrics
import logging
import math
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from models import Dataset

logger = logging.getLogger(__name__)

SCALAR_METRICS = ["overall_accuracy", "macro_f1", "weighted_f1"]


class EvaluationError(ValueError):
    """Inputs the split or metric code cannot handle"""


class SplitSpec(BaseModel):
    train_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)
    stratified: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _always_stratified(self):
        if not self.stratified:
            raise ValueError("only per-class stratified splits are supported")
        return self


def half_up_count(n: int, fraction: float) -> int:
    """floor(fraction * n + 1/2) in exact arithmetic on the decimal fraction"""
    return math.floor(Fraction(str(fraction)) * n + Fraction(1, 2))


def stratified_indices(labels: np.ndarray, train_fraction: float, seed: int,
                       min_per_class: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per class, shuffle by seed and put round-half-up(fraction * n) samples first

    Returns:
        (first indices, remaining indices), each sorted
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    first, rest = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < min_per_class:
            raise EvaluationError(f"class {cls} has {len(idx)} sample(s); at least {min_per_class} required")
        n_first = half_up_count(len(idx), train_fraction)
        shuffled = rng.permutation(idx)
        first.append(shuffled[:n_first])
        rest.append(shuffled[n_first:])
    if not first:
        return np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(rest))


def stratified_split(dataset: Dataset, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Class-stratified train/test partition of a dataset

    Raises:
        EvaluationError: A class with fewer than two samples
    """
    train, test = stratified_indices(dataset.labels, spec.train_fraction, spec.seed)
    logger.debug(f"Split seed {spec.seed}: {len(train)} train / {len(test)} test")
    return train, test


class ConfusionMatrix(BaseModel):
    """Rows are reference classes, columns predicted classes"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    counts: np.ndarray
    class_names: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int,
              class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise EvaluationError(f"label vectors differ in length: {len(y_true)} vs {len(y_pred)}")
    for name, y in (("reference", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise EvaluationError(f"{name} label outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = list(class_names) if class_names is not None else [str(k) for k in range(n_classes)]
    return ConfusionMatrix(counts=counts, class_names=names)


class MetricsReport(BaseModel):
    overall_accuracy: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    macro_f1: float
    weighted_f1: float
    class_names: List[str]
    # Classes whose F1 fell back to 0 because precision + recall was 0
    degenerate: List[str] = []

    def scalar(self, name: str) -> float:
        return float(getattr(self, name))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=den > 0)


def metrics(conf: ConfusionMatrix) -> MetricsReport:
    """
    Precision, recall and F1 per class, macro and support-weighted F1, overall accuracy

    Empty columns or rows give precision or recall 0; F1 is 0 when both are 0.
    """
    counts = conf.counts.astype(np.float64)
    if np.any(counts < 0):
        raise EvaluationError("confusion counts must be non-negative")
    diag = np.diag(counts)
    precision = _ratio(diag, counts.sum(axis=0))
    recall = _ratio(diag, counts.sum(axis=1))
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    support = counts.sum(axis=1)
    total = counts.sum()
    degenerate = [conf.class_names[k] for k in np.flatnonzero(precision + recall == 0)]
    weighted = float((f1 * support).sum() / support.sum()) if support.sum() > 0 else 0.0
    return MetricsReport(
        overall_accuracy=float(diag.sum() / total) if total > 0 else 0.0,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.astype(np.int64).tolist(),
        macro_f1=float(f1.mean()) if len(f1) else 0.0,
        weighted_f1=weighted,
        class_names=list(conf.class_names),
        degenerate=degenerate,
    )


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (n - 1); std is NaN for a single value"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    std = float(np.std(values, ddof=1)) if values.size > 1 else float("nan")
    return float(values.mean()), std


class SeedResult(BaseModel):
    seed: int
    confusion: ConfusionMatrix
    report: MetricsReport


class MultiSeedReport(BaseModel):
    """Seed-level reports of one pipeline plus their aggregates"""
    pipeline: str
    seeds: List[int]
    results: Dict[int, SeedResult] = {}
    failures: Dict[int, str] = {}

    @property
    def complete(self) -> bool:
        return not self.failures and set(self.results) == set(self.seeds)

    def values(self, metric: str) -> List[float]:
        return [self.results[s].report.scalar(metric) for s in self.seeds if s in self.results]

    def summary(self) -> Dict[str, Tuple[float, float]]:
        """metric -> (mean, std) over the stored seed reports"""
        return {m: mean_std(self.values(m)) for m in SCALAR_METRICS}

    def long_rows(self) -> List[Dict]:
        """(pipeline, seed, metric, class, value) rows"""
        rows = []
        for seed in self.seeds:
            if seed not in self.results:
                continue
            report = self.results[seed].report
            for metric in SCALAR_METRICS:
                rows.append({"pipeline": self.pipeline, "seed": seed, "metric": metric,
                             "class": "", "value": report.scalar(metric)})
            for k, name in enumerate(report.class_names):
                for metric in ("precision", "recall", "f1", "support"):
                    rows.append({"pipeline": self.pipeline, "seed": seed, "metric": metric,
                                 "class": name, "value": float(getattr(report, metric)[k])})
        return rows
