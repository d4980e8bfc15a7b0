"""Irregular event data model: records, ingestion, restriction, schema, splitting.

Events are stored per variable as sorted ``(times, values)`` columns so every
temporal query is a binary search.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

EVENT_HEADER = ("patient_id", "time", "variable", "value")
STAT_FIELDS = (
    "observation_count",
    "patient_coverage_fraction",
    "mean",
    "std",
    "min",
    "p25",
    "median",
    "p75",
    "max",
)


class CohortError(ValueError):
    """Malformed cohort input (bad rows, missing labels, degenerate splits)."""


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


class Series:
    """Time-sorted observations of one variable within one record."""

    __slots__ = ("times", "values")

    def __init__(self, times=(), values=()):
        times = _frozen(times)
        values = _frozen(values)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        self.times = times
        self.values = values

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Series):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.times.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        pairs = ", ".join(f"({t:g}, {v:g})" for t, v in zip(self.times, self.values))
        return f"Series([{pairs}])"

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(t), float(v)) for t, v in zip(self.times, self.values)]


EMPTY_SERIES = Series()


@dataclass(frozen=True, eq=False)
class PatientRecord:
    patient_id: str
    statics: Mapping[str, float | str]
    events: Mapping[str, Series]
    horizon: float

    def __post_init__(self):
        if not self.patient_id:
            raise CohortError("patient_id must be nonempty")
        if not self.horizon > 0:
            raise CohortError(f"horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "statics", MappingProxyType(dict(self.statics)))
        object.__setattr__(self, "events", MappingProxyType(dict(self.events)))
        for name, s in self.events.items():
            if len(s) and (s.times[0] < 0 or s.times[-1] > self.horizon):
                raise CohortError(f"{self.patient_id}/{name}: event times outside [0, horizon]")
            if len(s) > 1 and np.any(np.diff(s.times) <= 0):
                raise CohortError(f"{self.patient_id}/{name}: times must be strictly increasing")
            if not np.all(np.isfinite(s.values)):
                raise CohortError(f"{self.patient_id}/{name}: non-finite values")

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild from plain dicts (worker processes)
        return (PatientRecord, (self.patient_id, dict(self.statics), dict(self.events), self.horizon))

    def series(self, variable: str) -> Series:
        return self.events.get(variable, EMPTY_SERIES)

    def observed(self) -> set[str]:
        return {name for name, s in self.events.items() if len(s)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and dict(self.statics) == dict(other.statics)
            and self.horizon == other.horizon
            and _events_equal(self.events, other.events)
        )

    __hash__ = None


def _events_equal(a: Mapping[str, Series], b: Mapping[str, Series]) -> bool:
    # absent and empty variables are the same at query level
    names = {k for k, s in a.items() if len(s)} | {k for k, s in b.items() if len(s)}
    return all(a.get(n, EMPTY_SERIES) == b.get(n, EMPTY_SERIES) for n in names)


@dataclass(frozen=True)
class VariableMeta:
    name: str
    unit: str
    stats: Mapping[str, float]

    def to_dict(self) -> dict:
        return {"name": self.name, "unit": self.unit, "stats": dict(self.stats)}

    @classmethod
    def from_dict(cls, d: dict) -> "VariableMeta":
        return cls(d["name"], d.get("unit", ""), dict(d["stats"]))


@dataclass(frozen=True)
class Schema:
    variables: tuple[VariableMeta, ...]
    static_covariate_names: tuple[str, ...] = ()
    task_description: str = ""
    # categorical covariate -> sorted level vocabulary (training split)
    static_categories: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise CohortError("schema variable names must be unique")
        if names != sorted(names):
            raise CohortError("schema variables must be in lexicographic order")

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def __getitem__(self, name: str) -> VariableMeta:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(v.name == name for v in self.variables)

    def to_dict(self) -> dict:
        return {
            "task_description": self.task_description,
            "static_covariate_names": list(self.static_covariate_names),
            "static_categories": {k: list(v) for k, v in sorted(self.static_categories.items())},
            "variables": [v.to_dict() for v in self.variables],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(
            variables=tuple(VariableMeta.from_dict(v) for v in d["variables"]),
            static_covariate_names=tuple(d.get("static_covariate_names", ())),
            task_description=d.get("task_description", ""),
            static_categories={k: tuple(v) for k, v in d.get("static_categories", {}).items()},
        )

    def with_task(self, task_description: str) -> "Schema":
        return Schema(self.variables, self.static_covariate_names, task_description, self.static_categories)


@dataclass(frozen=True, eq=False)
class Cohort:
    records: tuple[PatientRecord, ...]
    labels: Mapping[str, int]
    schema: Schema
    units: Mapping[str, str] = field(default_factory=dict)
    ingest_stats: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate patient ids in cohort")
        missing = [pid for pid in ids if pid not in self.labels]
        if missing:
            raise CohortError(f"missing label for patients: {', '.join(missing)}")
        bad = [pid for pid in ids if self.labels[pid] not in (0, 1)]
        if bad:
            raise CohortError(f"labels must be 0/1; offending patients: {', '.join(bad)}")
        object.__setattr__(self, "labels", MappingProxyType({pid: int(self.labels[pid]) for pid in ids}))

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        return self.records == other.records and dict(self.labels) == dict(other.labels)

    __hash__ = None

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def label_array(self) -> np.ndarray:
        return np.array([self.labels[r.patient_id] for r in self.records], dtype=int)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        keep = set(ids)
        records = tuple(r for r in self.records if r.patient_id in keep)
        return Cohort(records, {r.patient_id: self.labels[r.patient_id] for r in records}, self.schema, self.units)

    def with_schema(self, schema: Schema) -> "Cohort":
        return Cohort(self.records, self.labels, schema, self.units, self.ingest_stats)


# ---------------------------------------------------------------- ingestion


def _parse_float(text: str, what: str, path: Path, line: int) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise CohortError(f"{path}: unparseable {what} {text!r} at line {line}") from None


def _parse_static(text: str) -> float | str | None:
    text = text.strip()
    if text == "" or text.upper() == "NA":
        return None
    try:
        value = float(text)
    except ValueError:
        return text
    return value if math.isfinite(value) else None


def read_events(path: Path, horizon: float) -> tuple[dict[str, dict[str, Series]], dict[str, int]]:
    """Parse an event log into ``{patient: {variable: Series}}`` plus drop counts."""
    path = Path(path)
    raw: dict[str, dict[str, dict[float, float]]] = defaultdict(lambda: defaultdict(dict))
    stats = {"rows": 0, "dropped_after_horizon": 0, "dropped_nonfinite": 0, "duplicates_replaced": 0}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}, stats
        if tuple(h.strip() for h in header) != EVENT_HEADER:
            raise CohortError(f"{path}: expected header {','.join(EVENT_HEADER)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise CohortError(f"{path}: expected 4 fields at line {line}, got {len(row)}")
            pid, t_text, var, v_text = (c.strip() for c in row)
            if not pid or not var:
                raise CohortError(f"{path}: empty patient_id or variable at line {line}")
            t = _parse_float(t_text, "time", path, line)
            v = _parse_float(v_text, "value", path, line)
            if not math.isfinite(t):
                raise CohortError(f"{path}: non-finite time at line {line}")
            if t < 0:
                raise CohortError(f"negative time at line {line}")
            stats["rows"] += 1
            if t > horizon:
                stats["dropped_after_horizon"] += 1
                continue
            if not math.isfinite(v):
                stats["dropped_nonfinite"] += 1
                continue
            slot = raw[pid][var]
            if t in slot:
                stats["duplicates_replaced"] += 1
                log.warning("duplicate observation %s/%s at t=%r (line %d); keeping last", pid, var, t, line)
            slot[t] = v
    events: dict[str, dict[str, Series]] = {}
    for pid, by_var in raw.items():
        events[pid] = {}
        for var, obs in by_var.items():
            ts = sorted(obs)
            events[pid][var] = Series(ts, [obs[t] for t in ts])
    for key in ("dropped_after_horizon", "dropped_nonfinite", "duplicates_replaced"):
        if stats[key]:
            log.warning("%s: %s=%d", path.name, key, stats[key])
    return events, stats


def read_labels(path: Path) -> dict[str, int]:
    path = Path(path)
    labels: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["patient_id", "label"]:
            raise CohortError(f"{path}: expected header patient_id,label")
        for row in reader:
            if not row:
                continue
            if len(row) != 2 or row[1].strip() not in ("0", "1"):
                raise CohortError(f"{path}: bad label row at line {reader.line_num}: {row}")
            pid = row[0].strip()
            if pid in labels:
                raise CohortError(f"{path}: duplicate patient {pid!r} at line {reader.line_num}")
            labels[pid] = int(row[1])
    return labels


def read_statics(path: Path) -> dict[str, dict[str, float | str]]:
    path = Path(path)
    out: dict[str, dict[str, float | str]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if not header or header[0].strip() != "patient_id":
            raise CohortError(f"{path}: first column must be patient_id")
        names = [h.strip() for h in header[1:]]
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise CohortError(f"{path}: expected {len(header)} fields at line {reader.line_num}")
            values = {}
            for name, cell in zip(names, row[1:]):
                parsed = _parse_static(cell)
                if parsed is not None:
                    values[name] = parsed
            out[row[0].strip()] = values
    return out


def read_units(path: Path) -> dict[str, str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return {row[0].strip(): row[1].strip() for row in reader if row}


def ingest(events_path, statics_path, labels_path, horizon: float, units_path=None) -> Cohort:
    """Load the three-file cohort format. Record order follows the labels file."""
    if not horizon > 0:
        raise CohortError("horizon must be positive")
    events, stats = read_events(Path(events_path), horizon)
    labels = read_labels(Path(labels_path))
    statics = read_statics(Path(statics_path)) if statics_path else {}
    units = read_units(Path(units_path)) if units_path else {}

    unlabeled = sorted((set(events) | set(statics)) - set(labels))
    if unlabeled:
        raise CohortError(f"missing label for patients: {', '.join(unlabeled)}")
    records = tuple(
        PatientRecord(pid, statics.get(pid, {}), events.get(pid, {}), float(horizon)) for pid in labels
    )
    cohort = Cohort(records, labels, Schema(()), units, stats)
    return cohort.with_schema(compute_schema(cohort)) if records else cohort


# --------------------------------------------------------------- operations


def restrict(record: PatientRecord, variables: Iterable[str]) -> PatientRecord:
    keep = set(variables)
    events = {name: s for name, s in record.events.items() if name in keep and len(s)}
    return PatientRecord(record.patient_id, record.statics, events, record.horizon)


def _variable_stats(values: np.ndarray, n_patients_with: int, n_patients: int) -> dict[str, float]:
    p25, median, p75 = np.percentile(values, [25, 50, 75])
    return {
        "observation_count": int(values.size),
        "patient_coverage_fraction": n_patients_with / n_patients,
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
        "min": float(np.min(values)),
        "p25": float(p25),
        "median": float(median),
        "p75": float(p75),
        "max": float(np.max(values)),
    }


def compute_schema(train: Cohort, task_description: str = "", units: Mapping[str, str] | None = None) -> Schema:
    """Per-variable metadata pooled over the (training) cohort."""
    if not len(train):
        raise CohortError("cannot compute a schema from an empty cohort")
    units = dict(train.units if units is None else units)
    pooled: dict[str, list[np.ndarray]] = defaultdict(list)
    declared: set[str] = set()
    for r in train.records:
        for name, s in r.events.items():
            declared.add(name)
            if len(s):
                pooled[name].append(s.values)
    for name in sorted(declared - set(pooled)):
        log.info("variable %s has no training observations; excluded from schema", name)
    metas = tuple(
        VariableMeta(name, units.get(name, ""), _variable_stats(np.concatenate(pooled[name]), len(pooled[name]), len(train)))
        for name in sorted(pooled)
    )

    static_names: set[str] = set()
    tokens: dict[str, set[str]] = defaultdict(set)
    for r in train.records:
        for k, v in r.statics.items():
            static_names.add(k)
            if isinstance(v, str):
                tokens[k].add(v)
    categories = {k: tuple(sorted(v)) for k, v in sorted(tokens.items())}
    return Schema(metas, tuple(sorted(static_names)), task_description, categories)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split(cohort: Cohort, test_fraction: float, seed: int) -> tuple[Cohort, Cohort]:
    """Label-stratified train/test partition, deterministic in ``seed``."""
    if not 0 < test_fraction < 1:
        raise CohortError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_ids: set[str] = set()
    for cls in (0, 1):
        members = [r.patient_id for r in cohort.records if cohort.labels[r.patient_id] == cls]
        if len(members) < 2:
            raise CohortError(f"class {cls} has {len(members)} member(s); need at least 2 to split")
        n_test = min(max(_round_half_up(len(members) * test_fraction), 1), len(members) - 1)
        order = rng.permutation(len(members))
        test_ids.update(members[i] for i in order[:n_test])
    train_ids = [pid for pid in cohort.patient_ids if pid not in test_ids]
    return cohort.subset(train_ids), cohort.subset(test_ids)


# ------------------------------------------------------------------- export


def _fmt(x: float) -> str:
    return repr(float(x))


def export_cohort(cohort: Cohort, out_dir) -> dict[str, Path]:
    """Write events/statics/labels CSVs and a schema manifest; re-ingestable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("events", "statics", "labels")}
    with paths["events"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for r in cohort.records:
            for name in sorted(r.events):
                for t, v in zip(r.events[name].times, r.events[name].values):
                    w.writerow((r.patient_id, _fmt(t), name, _fmt(v)))
    static_names = sorted({k for r in cohort.records for k in r.statics})
    with paths["statics"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", *static_names))
        for r in cohort.records:
            cells = []
            for k in static_names:
                v = r.statics.get(k)
                cells.append("" if v is None else (v if isinstance(v, str) else _fmt(v)))
            w.writerow((r.patient_id, *cells))
    with paths["labels"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "label"))
        for r in cohort.records:
            w.writerow((r.patient_id, cohort.labels[r.patient_id]))
    horizons = {r.horizon for r in cohort.records}
    manifest = {
        "horizon": horizons.pop() if len(horizons) == 1 else None,
        "n_patients": len(cohort),
        "schema": cohort.schema.to_dict(),
    }
    paths["schema"] = out / "schema.json"
    paths["schema"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if cohort.units:
        paths["units"] = out / "units.csv"
        with paths["units"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("variable", "unit"))
            for k in sorted(cohort.units):
                w.writerow((k, cohort.units[k]))
    return paths


def load_exported(dir_path, horizon: float | None = None) -> Cohort:
    d = Path(dir_path)
    manifest = json.loads((d / "schema.json").read_text(encoding="utf-8"))
    horizon = horizon if horizon is not None else manifest["horizon"]
    units = d / "units.csv"
    return ingest(d / "events.csv", d / "statics.csv", d / "labels.csv", horizon, units if units.exists() else None)
