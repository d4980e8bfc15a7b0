"""Design-matrix construction: generated programs, baseline summaries, statics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import Cohort, Schema, restrict
from .featscript import DEFAULT_BUDGET, EvalBudget, FeatScriptRuntimeError, evaluate, parse
from .generation import UNIVARIATE, FeatureProgram, FeatureRegistry
from .tools import NA

log = logging.getLogger(__name__)

NA_TOKEN = "NA"
BASELINE_STATS = ("mean", "std", "min", "max")


class MatrixFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    provenance: Mapping[str, object]


@dataclass(eq=False)
class FeatureMatrix:
    patient_ids: tuple[str, ...]
    columns: tuple[Column, ...]
    values: np.ndarray  # (N, d); NaN marks masked cells
    error_counts: np.ndarray = None

    def __post_init__(self):
        self.patient_ids = tuple(self.patient_ids)
        self.columns = tuple(self.columns)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.patient_ids), len(self.columns))
        if self.error_counts is None:
            self.error_counts = np.zeros(len(self.columns), dtype=int)
        self.error_counts = np.asarray(self.error_counts, dtype=int)
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def mask(self) -> np.ndarray:
        return np.isnan(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select_columns(self, names: Sequence[str]) -> "FeatureMatrix":
        idx = [self.names.index(n) for n in names]
        return FeatureMatrix(self.patient_ids, [self.columns[i] for i in idx], self.values[:, idx], self.error_counts[idx])

    def select_rows(self, patient_ids: Sequence[str]) -> "FeatureMatrix":
        pos = {pid: i for i, pid in enumerate(self.patient_ids)}
        idx = [pos[p] for p in patient_ids]
        return FeatureMatrix(patient_ids, self.columns, self.values[idx], self.error_counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.patient_ids == other.patient_ids
            and [(c.name, dict(c.provenance)) for c in self.columns]
            == [(c.name, dict(c.provenance)) for c in other.columns]
            and np.array_equal(self.values, other.values, equal_nan=True)
            and np.array_equal(self.error_counts, other.error_counts)
        )

    __hash__ = None


@dataclass
class ExtractionReport:
    non_missing_fraction: dict[str, float] = field(default_factory=dict)
    error_fraction: dict[str, float] = field(default_factory=dict)
    constant: dict[str, bool] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "columns": {
                name: {
                    "non_missing_fraction": self.non_missing_fraction[name],
                    "error_fraction": self.error_fraction[name],
                    "constant": self.constant[name],
                }
                for name in self.non_missing_fraction
            }
        }


def summarize(matrix: FeatureMatrix, wall_time: float = 0.0) -> ExtractionReport:
    n = max(len(matrix.patient_ids), 1)
    report = ExtractionReport(wall_time=wall_time)
    for j, col in enumerate(matrix.columns):
        x = matrix.values[:, j]
        observed = x[~np.isnan(x)]
        report.non_missing_fraction[col.name] = observed.size / n
        report.error_fraction[col.name] = int(matrix.error_counts[j]) / n
        report.constant[col.name] = bool(observed.size == 0 or np.all(observed == observed[0]))
    return report


# ------------------------------------------------------------ generated

def program_column_name(p: FeatureProgram) -> str:
    if p.kind == UNIVARIATE:
        return f"uni_{p.variables[0]}_{p.id}"
    return f"multi_{p.id}"


def program_provenance(p: FeatureProgram) -> dict:
    return {
        "source": "program",
        "id": p.id,
        "kind": p.kind,
        "variables": list(p.variables),
        "round": p.round_index,
        "prompt_hash": p.prompt_hash,
        "candidate_index": p.candidate_index,
        "program": p.source_canonical,
    }


def _eval_rows(records, specs, budget) -> tuple[np.ndarray, np.ndarray]:
    programs = [(parse(src), tuple(vs)) for src, vs in specs]
    out = np.full((len(records), len(programs)), np.nan)
    errors = np.zeros(len(programs), dtype=int)
    for i, record in enumerate(records):
        restricted: dict[tuple, object] = {}
        for j, (prog, vs) in enumerate(programs):
            rec = restricted.get(vs)
            if rec is None:
                rec = restricted[vs] = restrict(record, vs)
            try:
                value = evaluate(prog, rec, budget)
            except FeatScriptRuntimeError:
                errors[j] += 1
                continue
            if value is not NA:
                out[i, j] = value
    return out, errors


def extract(
    cohort: Cohort,
    registry: FeatureRegistry | Iterable[FeatureProgram],
    budget: EvalBudget = DEFAULT_BUDGET,
    workers: int = 1,
) -> tuple[FeatureMatrix, ExtractionReport]:
    """Evaluate every valid program on every record restricted to its variables.

    Runtime errors become masked cells and are tallied per column.
    """
    started = time.perf_counter()
    programs = registry.valid() if isinstance(registry, FeatureRegistry) else [p for p in registry if p.is_valid]
    columns, specs, seen = [], [], set()
    for p in programs:
        name = program_column_name(p)
        if name in seen:
            continue
        seen.add(name)
        columns.append(Column(name, program_provenance(p)))
        specs.append((p.source_canonical, p.variables))
    records = list(cohort.records)
    if workers > 1 and len(records) > 1 and specs:
        chunks = np.array_split(np.arange(len(records)), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(_eval_rows, [[records[i] for i in c] for c in chunks if len(c)], [specs] * workers, [budget] * workers)
            )
        values = np.vstack([v for v, _ in parts])
        errors = np.sum([e for _, e in parts], axis=0)
    else:
        values, errors = _eval_rows(records, specs, budget)
    matrix = FeatureMatrix(cohort.patient_ids, columns, values, errors)
    report = summarize(matrix, time.perf_counter() - started)
    n_err = int(matrix.error_counts.sum())
    if n_err:
        log.info("extraction: %d runtime-error cells masked across %d columns", n_err, int((matrix.error_counts > 0).sum()))
    return matrix, report


# ------------------------------------------------------------- baseline


def baseline_features(cohort: Cohort, schema: Schema | None = None) -> FeatureMatrix:
    """Mean, population std, min and max of each schema variable; NA if unobserved."""
    schema = schema or cohort.schema
    names = schema.names
    columns = [
        Column(f"{v}_{stat}", {"source": "baseline", "variable": v, "stat": stat})
        for v in names
        for stat in BASELINE_STATS
    ]
    values = np.full((len(cohort), 4 * len(names)), np.nan)
    for i, r in enumerate(cohort.records):
        for k, v in enumerate(names):
            s = r.series(v)
            if len(s):
                x = s.values
                values[i, 4 * k: 4 * k + 4] = (x.mean(), x.std(), x.min(), x.max())
    return FeatureMatrix(cohort.patient_ids, columns, values)


def static_features(cohort: Cohort, schema: Schema | None = None) -> FeatureMatrix:
    """Static covariates as passthrough columns; categoricals one-hot on the schema vocabulary."""
    schema = schema or cohort.schema
    columns: list[Column] = []
    extractors = []
    for name in schema.static_covariate_names:
        levels = schema.static_categories.get(name)
        if levels:
            for level in levels:
                columns.append(Column(f"static_{name}={level}", {"source": "static", "covariate": name, "level": level}))
                extractors.append((name, level))
        else:
            columns.append(Column(f"static_{name}", {"source": "static", "covariate": name}))
            extractors.append((name, None))
    values = np.full((len(cohort), len(columns)), np.nan)
    for i, r in enumerate(cohort.records):
        for j, (name, level) in enumerate(extractors):
            v = r.statics.get(name)
            if v is None:
                continue
            if level is None:
                if not isinstance(v, str):
                    values[i, j] = v
            else:
                values[i, j] = 1.0 if v == level else 0.0
    return FeatureMatrix(cohort.patient_ids, columns, values)


# --------------------------------------------------------------- concat


def _provenance_tag(prov: Mapping) -> str:
    return hashlib.sha256(json.dumps(prov, sort_keys=True, default=str).encode()).hexdigest()[:8]


def concat(matrices: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Column-wise concatenation; all inputs must share the same row order."""
    if not matrices:
        raise ValueError("concat needs at least one matrix")
    rows = matrices[0].patient_ids
    columns: list[Column] = []
    names: set[str] = set()
    for m in matrices:
        if m.patient_ids != rows:
            raise ValueError("row order mismatch: matrices must list the same patients in the same order")
        for c in m.columns:
            name = c.name
            if name in names:
                name = f"{c.name}__{_provenance_tag(c.provenance)}"
                log.warning("column name collision %r renamed to %r", c.name, name)
                k = 2
                while name in names:
                    name = f"{c.name}__{_provenance_tag(c.provenance)}_{k}"
                    k += 1
            names.add(name)
            columns.append(Column(name, c.provenance))
    values = np.hstack([m.values for m in matrices]) if columns else np.zeros((len(rows), 0))
    errors = np.concatenate([m.error_counts for m in matrices])
    return FeatureMatrix(rows, columns, values, errors)


# ------------------------------------------------------------ file format


def provenance_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".provenance.json")


def export_matrix(matrix: FeatureMatrix, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *matrix.names])
        for pid, row in zip(matrix.patient_ids, matrix.values):
            w.writerow([pid, *(NA_TOKEN if math.isnan(x) else repr(float(x)) for x in row)])
    sidecar = {
        "na_token": NA_TOKEN,
        "columns": [
            {"name": c.name, "provenance": dict(c.provenance), "error_count": int(e)}
            for c, e in zip(matrix.columns, matrix.error_counts)
        ],
    }
    provenance_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def import_matrix(path) -> FeatureMatrix:
    path = Path(path)
    side = provenance_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {"columns": []}
    by_name = {c["name"]: c for c in meta["columns"]}
    na = meta.get("na_token", NA_TOKEN)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "patient_id":
            raise MatrixFormatError(f"{path}: line 1: header must start with patient_id")
        names = header[1:]
        ids, rows = [], []
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise MatrixFormatError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            cells = []
            for cell in row[1:]:
                if cell == na:
                    cells.append(np.nan)
                    continue
                try:
                    x = float(cell)
                except ValueError:
                    raise MatrixFormatError(f"{path}: line {line}: bad number {cell!r}") from None
                if not math.isfinite(x):
                    raise MatrixFormatError(f"{path}: line {line}: non-finite value {cell!r}")
                cells.append(x)
            ids.append(row[0])
            rows.append(cells)
    columns = [Column(n, by_name.get(n, {}).get("provenance", {})) for n in names]
    errors = [by_name.get(n, {}).get("error_count", 0) for n in names]
    values = np.array(rows, dtype=float).reshape(len(ids), len(names))
    return FeatureMatrix(ids, columns, values, errors)
