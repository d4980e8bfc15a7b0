"""Series aggregations. Empty input yields NA except for ``count``."""

from __future__ import annotations

import numpy as np

from ..cohort import Series
from ..tools import NA


class AggregationError(ValueError):
    pass


def mean(s: Series):
    return float(np.mean(s.values)) if len(s) else NA


def std(s: Series):
    # population convention: one point -> 0.0
    return float(np.std(s.values)) if len(s) else NA


def minimum(s: Series):
    return float(np.min(s.values)) if len(s) else NA


def maximum(s: Series):
    return float(np.max(s.values)) if len(s) else NA


def total(s: Series):
    return float(np.sum(s.values)) if len(s) else NA


def count(s: Series):
    return float(len(s))


def first(s: Series):
    return float(s.values[0]) if len(s) else NA


def last(s: Series):
    return float(s.values[-1]) if len(s) else NA


def quantile(s: Series, q: float):
    """Linear interpolation between order statistics."""
    if not 0.0 <= q <= 1.0:
        raise AggregationError(f"quantile level must be in [0, 1], got {q!r}")
    return float(np.quantile(s.values, q)) if len(s) else NA


def slope(s: Series):
    """Ordinary least-squares slope of value on time."""
    if len(s) < 2:
        return NA
    t = s.times - s.times.mean()
    sxx = float(np.dot(t, t))
    if sxx == 0.0:
        return NA
    return float(np.dot(t, s.values - s.values.mean()) / sxx)


def times(s: Series) -> Series:
    return Series(s.times, s.times)


def values(s: Series) -> Series:
    return s


SERIES_AGGREGATIONS = {
    "mean": mean,
    "std": std,
    "min": minimum,
    "max": maximum,
    "sum": total,
    "count": count,
    "first": first,
    "last": last,
    "slope": slope,
}
