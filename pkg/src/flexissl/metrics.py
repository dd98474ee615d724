"""Macro-F1, AUROC and bootstrap uncertainty."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgumentError, UndefinedMetricError

logger = logging.getLogger(__name__)

N_BOOTSTRAP = 1000


def macro_f1(predictions, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no TP, FP or FN scores 0."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if pred.size == 0 or pred.size != true.size:
        raise InvalidArgumentError("macro_f1 needs equally sized, non-empty inputs")
    if true.min() < 0 or true.max() >= n_classes or pred.min() < 0 or pred.max() >= n_classes:
        raise InvalidArgumentError(f"labels and predictions must lie in [0, {n_classes})")
    cm = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(0) - tp
    fn = cm.sum(1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    return float(f1.mean())


def _binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    # Mann-Whitney U from midranks; ties count one half
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(scores, labels) -> float:
    """Binary AUROC for 1-D scores; one-vs-rest macro average for (N, C) score matrices."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if s.ndim == 1:
        if s.size != y.size:
            raise InvalidArgumentError("scores and labels differ in length")
        if set(np.unique(y)) - {0, 1}:
            raise InvalidArgumentError("binary AUROC needs 0/1 labels")
        return _binary_auroc(s, y == 1)
    if s.shape[0] != y.size:
        raise InvalidArgumentError("scores and labels differ in length")
    n_classes = s.shape[1]
    if n_classes == 2:
        return _binary_auroc(s[:, 1], y == 1)
    present = np.unique(y)
    if present.size < 2:
        raise UndefinedMetricError("AUROC needs at least two classes present")
    return float(np.mean([_binary_auroc(s[:, c], y == c) for c in range(n_classes) if c in present]))


@dataclass
class MetricReport:
    metric: str
    point: float
    mean: float
    std: float
    n_bootstrap: int
    seed: int
    redrawn: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def bootstrap(metric_fn, data: tuple, n: int = N_BOOTSTRAP, seed: int = 0, name: str = "metric",
              max_redraws: int = 100_000) -> MetricReport:
    """Resample rows of every array in ``data`` with replacement, ``n`` times.

    ``metric_fn(*arrays)`` gives the metric. Resamples on which the metric is
    undefined (e.g. a single class for AUROC) are redrawn so that exactly ``n``
    values are collected.
    """
    if n < 1:
        raise InvalidArgumentError("need at least one bootstrap resample")
    arrays = [np.asarray(a) for a in data]
    size = arrays[0].shape[0]
    if size == 0 or any(a.shape[0] != size for a in arrays):
        raise InvalidArgumentError("bootstrap arrays must share a non-empty first dimension")
    point = float(metric_fn(*arrays))
    rng = np.random.default_rng(seed)
    values = np.empty(n)
    redrawn = 0
    i = 0
    while i < n:
        idx = rng.integers(0, size, size=size)
        try:
            values[i] = metric_fn(*(a[idx] for a in arrays))
        except UndefinedMetricError:
            redrawn += 1
            if redrawn > max_redraws:
                raise
            continue
        i += 1
    if redrawn:
        logger.info("bootstrap %s: redrew %d degenerate resamples", name, redrawn)
    return MetricReport(name, point, float(values.mean()), float(values.std(ddof=1)) if n > 1 else 0.0, n, seed,
                        redrawn)
