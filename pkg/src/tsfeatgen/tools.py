"""Temporal query tools over irregular per-variable series.

These are the only primitives a generated feature program can use to read a
record. ``NA`` (``None``) marks a structurally missing scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import EMPTY_SERIES, PatientRecord, Series


class _NAType:
    __slots__ = ()

    def __repr__(self):
        return "NA"

    def __bool__(self):
        raise TypeError("NA has no truth value")

    def __reduce__(self):
        return (_na, ())


def _na():
    return NA


NA = object.__new__(_NAType)


class WindowError(ValueError):
    pass


def get_all_measurements(record: PatientRecord, variable: str) -> Series:
    return record.events.get(variable, EMPTY_SERIES)


def get_in_window(record: PatientRecord, variable: str, t_start: float, t_end: float) -> Series:
    if t_start > t_end:
        raise WindowError(f"window start {t_start!r} is after end {t_end!r}")
    s = get_all_measurements(record, variable)
    lo = np.searchsorted(s.times, t_start, side="left")
    hi = np.searchsorted(s.times, t_end, side="right")
    if lo == 0 and hi == len(s):
        return s
    return Series(s.times[lo:hi], s.values[lo:hi])


def _last_index(s: Series, t: float) -> int:
    return int(np.searchsorted(s.times, t, side="right")) - 1


def last_value_before(record: PatientRecord, variable: str, t: float):
    s = get_all_measurements(record, variable)
    i = _last_index(s, t)
    return NA if i < 0 else float(s.values[i])


def count_measurements(record: PatientRecord, variable: str) -> float:
    return float(len(get_all_measurements(record, variable)))


def time_since_last(record: PatientRecord, variable: str, t: float):
    s = get_all_measurements(record, variable)
    i = _last_index(s, t)
    return NA if i < 0 else float(t - s.times[i])


@dataclass(frozen=True)
class ToolSpec:
    name: str
    params: tuple[str, ...]  # "variable" or "number"
    returns: str  # "series" or "number"
    signature: str
    doc: str


TOOLS: dict[str, ToolSpec] = {
    t.name: t
    for t in (
        ToolSpec(
            "get_all_measurements",
            ("variable",),
            "series",
            "get_all_measurements(VAR) -> series",
            "all (time, value) observations of VAR sorted by time; empty if never measured",
        ),
        ToolSpec(
            "get_in_window",
            ("variable", "number", "number"),
            "series",
            "get_in_window(VAR, t_start, t_end) -> series",
            "observations of VAR with t_start <= time <= t_end (both ends inclusive); error if t_start > t_end",
        ),
        ToolSpec(
            "last_value_before",
            ("variable", "number"),
            "number",
            "last_value_before(VAR, t) -> number or NA",
            "value of the latest observation of VAR with time <= t; NA if there is none",
        ),
        ToolSpec(
            "count_measurements",
            ("variable",),
            "number",
            "count_measurements(VAR) -> number",
            "number of observations of VAR (0 if never measured)",
        ),
        ToolSpec(
            "time_since_last",
            ("variable", "number"),
            "number",
            "time_since_last(VAR, t) -> number or NA",
            "t minus the time of the latest observation of VAR with time <= t; NA if there is none",
        ),
    )
}

TOOL_FUNCS = {
    "get_all_measurements": get_all_measurements,
    "get_in_window": get_in_window,
    "last_value_before": last_value_before,
    "count_measurements": count_measurements,
    "time_since_last": time_since_last,
}

UNIVARIATE_TOOLS = ("get_all_measurements",)
MULTIVARIATE_TOOLS = tuple(TOOLS)


def tool_docs(names=MULTIVARIATE_TOOLS) -> str:
    """The tool documentation block injected verbatim into prompts."""
    lines = []
    for name in names:
        spec = TOOLS[name]
        lines.append(f"- {spec.signature}: {spec.doc}")
    return "\n".join(lines)
