"""Normalization, binarization and quality metrics for expert anomaly maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ArgumentError, UndefinedMetricError
from .map_io import AnomalyMap, BinaryMask
from .validation import (
    as_anomaly_map,
    as_mask,
    check_binarize_threshold,
    check_normalized,
    check_same_shape,
)

NEGATIVE_RULES = ("rank", "value")
SIZE_CLASSES = ("small", "medium", "large")

# positive thresholds high to low, then the two "lowest-score" rows
DEFAULT_SWEEP = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, -0.1, -0.2)


@dataclass(frozen=True)
class PixelRates:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def tpr(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 0.0

    @property
    def fpr(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    def __add__(self, other):
        return PixelRates(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "tpr": self.tpr, "fpr": self.fpr}


@dataclass(frozen=True)
class SizeClass:
    value: str
    area_ratio: float


def normalize_map(amap) -> AnomalyMap:
    """Per-map min-max scaling to ``[0, 1]``; a constant map becomes all zeros."""
    amap = as_anomaly_map(amap, normalized=False)
    lo, hi = amap.scores.min(), amap.scores.max()
    if hi > lo:
        scaled = (amap.scores - lo) / (hi - lo)
        # guard against 1 ulp overshoot
        np.clip(scaled, 0.0, 1.0, out=scaled)
    else:
        scaled = np.zeros_like(amap.scores)
    return AnomalyMap(scaled, normalized=True, source_expert=amap.source_expert)


def binarize(amap, threshold: float = 0.9, negative_rule: str = "rank") -> BinaryMask:
    """Mark suspicious pixels of a normalized map.

    A positive ``threshold`` marks pixels scoring strictly above it. A negative
    one marks the lowest-scoring ``|threshold|`` fraction of pixels: with
    ``negative_rule="rank"`` exactly ``floor(|t| * n)`` pixels are taken in
    ascending score order (stable, so ties resolve by raster position); with
    ``negative_rule="value"`` every pixel scoring below ``|t|`` is marked.
    """
    amap = as_anomaly_map(amap)
    check_normalized(amap)
    t = check_binarize_threshold(threshold)
    scores = amap.scores
    if t > 0:
        return BinaryMask(scores > t)
    if negative_rule == "value":
        return BinaryMask(scores < -t)
    if negative_rule != "rank":
        raise ArgumentError(f"negative_rule must be one of {NEGATIVE_RULES}, got {negative_rule!r}")
    flat = scores.ravel()
    k = int(np.floor(-t * flat.size + 1e-9))
    bits = np.zeros(flat.size, dtype=bool)
    bits[np.argsort(flat, kind="stable")[:k]] = True
    return BinaryMask(bits.reshape(scores.shape))


def pixel_rates(pred, gt) -> PixelRates:
    pred, gt = as_mask(pred), as_mask(gt)
    check_same_shape(pred, gt)
    p, g = pred.bits, gt.bits
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return PixelRates(tp=tp, fp=fp, tn=tn, fn=fn)


def pixel_auroc(maps_with_masks: Iterable[tuple]) -> float:
    """Pooled pixel AUROC via the Mann-Whitney rank statistic (ties count 1/2)."""
    scores, labels = [], []
    for amap, mask in maps_with_masks:
        amap, mask = as_anomaly_map(amap), as_mask(mask)
        check_same_shape(amap, mask, names=("map", "mask"))
        scores.append(amap.scores.ravel())
        labels.append(mask.bits.ravel())
    if not scores:
        raise UndefinedMetricError("pixel AUROC needs at least one map")
    s = np.concatenate(scores)
    y = np.concatenate(labels)
    n_pos = int(np.count_nonzero(y))
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("pixel AUROC is undefined without both positive and negative pixels")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_sweep(maps_with_masks: Sequence[tuple], thresholds=DEFAULT_SWEEP, negative_rule="rank"):
    """Pooled TPR/FPR of the binarized, per-map normalized maps at each threshold."""
    pairs = []
    for m, g in maps_with_masks:
        m = m if isinstance(m, AnomalyMap) and m.normalized else normalize_map(m)
        pairs.append((m, as_mask(g)))
    rows = []
    for t in thresholds:
        total = PixelRates(0, 0, 0, 0)
        for amap, mask in pairs:
            total = total + pixel_rates(binarize(amap, t, negative_rule=negative_rule), mask)
        rows.append({"threshold": float(t), **total.to_dict()})
    return rows


def image_decision(amap, global_min: float, global_max: float, threshold: float = 0.5) -> str:
    """``"defect"`` iff the map maximum, scaled by the evaluation-set range, exceeds ``threshold``."""
    amap = as_anomaly_map(amap, normalized=False)
    if not global_min < global_max:
        raise ArgumentError(f"global_min ({global_min}) must be below global_max ({global_max})")
    if not 0.0 < threshold < 1.0:
        raise ArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    top = (amap.scores.max() - global_min) / (global_max - global_min)
    return "defect" if top > threshold else "normal"


def size_class_from_ratio(ratio: float) -> str:
    if ratio < 0.01:
        return "small"
    if ratio <= 0.1:
        return "medium"
    return "large"


def defect_size_class(gt) -> SizeClass:
    """Small / medium / large partition of a defect by its area fraction.

    Boundaries are compared with integer arithmetic so exact ratios such as
    1/100 never fall on the wrong side through rounding.
    """
    gt = as_mask(gt)
    pos = int(np.count_nonzero(gt.bits))
    total = int(gt.bits.size)
    if pos == 0:
        raise ArgumentError("mask has no defect pixels; size class is undefined for normal samples")
    if pos * 100 < total:
        value = "small"
    elif pos * 10 <= total:
        value = "medium"
    else:
        value = "large"
    return SizeClass(value=value, area_ratio=pos / total)


class MapNormalizer(TransformerMixin, BaseEstimator):
    """Stateless per-map min-max normalization over a list of maps."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [normalize_map(m) for m in X]


class MapBinarizer(TransformerMixin, BaseEstimator):
    """Threshold normalized maps into suspicious-pixel masks."""

    def __init__(self, threshold=0.9, negative_rule="rank"):
        self.threshold = threshold
        self.negative_rule = negative_rule

    def fit(self, X=None, y=None):
        check_binarize_threshold(self.threshold)
        if self.negative_rule not in NEGATIVE_RULES:
            raise ArgumentError(f"negative_rule must be one of {NEGATIVE_RULES}")
        return self

    def transform(self, X):
        return [binarize(m, self.threshold, self.negative_rule) for m in X]


class ExpertImageClassifier(ClassifierMixin, BaseEstimator):
    """Image-level defect decision from raw expert maps.

    ``fit`` records the minimum and maximum raw score over the evaluation
    set; ``predict`` scales each map's maximum by that range and compares it
    with ``threshold``. Labels are the strings ``"defect"`` and ``"normal"``.
    """

    def __init__(self, threshold=0.5):
        self.threshold = threshold

    def fit(self, X, y=None):
        maps = [as_anomaly_map(m, normalized=False) for m in X]
        if not maps:
            raise ArgumentError("cannot fit on an empty set of maps")
        self.global_min_ = float(min(m.scores.min() for m in maps))
        self.global_max_ = float(max(m.scores.max() for m in maps))
        if not self.global_min_ < self.global_max_:
            raise ArgumentError("all maps share one constant score; global range is empty")
        self.classes_ = np.array(["defect", "normal"])
        return self

    def predict(self, X):
        check_is_fitted(self, "global_max_")
        return np.array([image_decision(m, self.global_min_, self.global_max_, self.threshold) for m in X])

    def accuracy_sweep(self, X, y, thresholds=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)):
        """Accuracy at each threshold, keeping the fitted global range."""
        check_is_fitted(self, "global_max_")
        y = np.asarray(y)
        maps = [as_anomaly_map(m, normalized=False) for m in X]
        g_min, g_max = self.global_min_, self.global_max_
        tops = np.array([(m.scores.max() - g_min) / (g_max - g_min) for m in maps])
        out = {}
        for t in thresholds:
            pred = np.where(tops > t, "defect", "normal")
            out[float(t)] = float(np.mean(pred == y)) if y.size else 0.0
        return out
