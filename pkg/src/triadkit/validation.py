"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import ArgumentError
from .map_io import AnomalyMap, BinaryMask


def as_anomaly_map(obj, normalized=None) -> AnomalyMap:
    """Coerce an ``AnomalyMap`` or a 2-D array-like into an ``AnomalyMap``.

    Plain arrays are flagged normalized when ``normalized`` is true, or, if
    ``normalized`` is None, when every value already lies in ``[0, 1]``.
    """
    if isinstance(obj, AnomalyMap):
        return obj
    arr = np.asarray(obj, dtype=np.float64)
    if normalized is None:
        normalized = bool(arr.size) and np.all(np.isfinite(arr)) and arr.min() >= 0.0 and arr.max() <= 1.0
    return AnomalyMap(arr, normalized=bool(normalized))


def as_mask(obj) -> BinaryMask:
    if isinstance(obj, BinaryMask):
        return obj
    return BinaryMask(np.asarray(obj))


def check_normalized(amap: AnomalyMap, what="map"):
    if not amap.normalized:
        raise ArgumentError(f"{what} must be normalized first (see normalize_map)")


def check_same_shape(a, b, names=("pred", "gt")):
    if a.shape != b.shape:
        raise ArgumentError(f"{names[0]} is {a.shape[1]}x{a.shape[0]} but {names[1]} is {b.shape[1]}x{b.shape[0]}")


def check_binarize_threshold(t):
    if not isinstance(t, numbers.Real) or not np.isfinite(t):
        raise ArgumentError(f"threshold must be a real number, got {t!r}")
    if t == 0 or abs(t) > 1:
        raise ArgumentError(f"threshold must lie in [-1, 1] excluding 0, got {t}")
    return float(t)


def check_fraction(value, name, low_open=True, high_open=False):
    value = float(value)
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        lo = "(0" if low_open else "[0"
        hi = "1)" if high_open else "1]"
        raise ArgumentError(f"{name} must lie in {lo}, {hi}, got {value}")
    return value


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ArgumentError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
