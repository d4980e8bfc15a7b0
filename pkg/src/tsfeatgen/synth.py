"""Seeded synthetic irregular cohorts with planted, documented signal.

The label is logistic in three latent features, each computable from the
emitted events with the temporal tools:

* ``nadir``: minimum of the nadir variable in the final window (carried
  forward from the last earlier value when the window is empty);
* ``slope_ratio``: least-squares slope of the first slope variable divided by
  ``1 + |slope|`` of the second;
* ``sparse_count``: number of observations of the sparse variable.

Observation times come from an inhomogeneous Poisson process (thinning) whose
rate depends on the variable, the patient, and optionally the label.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cohort import Cohort, PatientRecord, Schema, Series, compute_schema, export_cohort
from .featscript import aggregates
from .llm import MockBank
from .tools import NA, count_measurements, get_all_measurements, get_in_window, last_value_before

VARIABLE_NAMES = ("HR", "SBP", "RR", "LACTATE", "CREAT", "TEMP", "SPO2", "WBC")
UNITS = {
    "HR": "bpm",
    "SBP": "mmHg",
    "RR": "breaths/min",
    "LACTATE": "mmol/L",
    "CREAT": "mg/dL",
    "TEMP": "degC",
    "SPO2": "%",
    "WBC": "10^9/L",
}
# (level mean, between-patient sd, within-patient noise sd)
_LEVELS = {
    "LACTATE": (2.0, 0.6, 0.4),
    "CREAT": (1.1, 0.3, 0.1),
    "TEMP": (37.0, 0.5, 0.3),
    "SPO2": (96.0, 2.0, 1.0),
    "WBC": (9.0, 3.0, 1.0),
}
LATENTS = ("nadir", "slope_ratio", "sparse_count")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 2000
    n_variables: int = 8
    horizon: float = 48.0
    rate_range: tuple[float, float] = (0.3, 1.2)  # observations per hour
    rate_multiplier_sd: float = 0.4
    nadir_window: float = 12.0
    sparse_rate: float = 0.12
    label_weights: tuple[float, float, float] = (-1.8, 1.8, 1.5)
    target_prevalence: float = 0.2
    informative_factor: float = 1.0  # rate multiplier for positives on the informative variable
    noise_scale: float = 1.0
    seed: int = 0
    nadir_variable: str = "SBP"
    slope_variables: tuple[str, str] = ("HR", "RR")
    sparse_variable: str = "LACTATE"
    informative_variable: str = "CREAT"
    variable_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.n_patients < 4:
            raise SynthError("need at least 4 patients")
        if self.n_variables < 4:
            raise SynthError("need at least 4 variables (nadir, two slope, sparse)")
        if not 0.05 <= self.target_prevalence <= 0.5:
            raise SynthError("target prevalence must be in [0.05, 0.5]")
        if not 0 < self.nadir_window < self.horizon:
            raise SynthError("nadir window must lie inside the horizon")
        if not self.variable_names:
            names = list(VARIABLE_NAMES[: self.n_variables])
            names += [f"V{k}" for k in range(len(names), self.n_variables)]
            object.__setattr__(self, "variable_names", tuple(names))
        if len(self.variable_names) != self.n_variables:
            raise SynthError("variable_names must have n_variables entries")
        needed = {self.nadir_variable, self.sparse_variable, *self.slope_variables}
        if not needed <= set(self.variable_names):
            raise SynthError(f"designated variables {sorted(needed)} missing from {self.variable_names}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        tuple_fields = ("rate_range", "label_weights", "slope_variables", "variable_names")
        return cls(**{k: tuple(v) if k in tuple_fields else v for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SynthResult:
    cohort: Cohort
    latents: dict[str, np.ndarray]  # name -> (N,) array, aligned with cohort.records
    logit_offset: float
    spec: SynthSpec

    def latent_matrix(self) -> np.ndarray:
        return np.column_stack([self.latents[k] for k in LATENTS])


def _event_times(rng: np.random.Generator, rate: float, horizon: float) -> np.ndarray:
    """Thinning for lambda(t) = rate * (0.5 + t / horizon), i.e. surveillance intensifying over the stay."""
    lam_max = 1.5 * rate
    n = rng.poisson(lam_max * horizon)
    t = rng.uniform(0.0, horizon, size=n)
    keep = rng.uniform(size=n) < (0.5 + t / horizon) / 1.5
    return np.unique(t[keep])


def _ensure_min(rng, times: np.ndarray, k: int, horizon: float) -> np.ndarray:
    while len(times) < k:
        times = np.unique(np.append(times, rng.uniform(0.0, horizon)))
    return times


def latent_features(record: PatientRecord, spec: SynthSpec) -> tuple[float, float, float]:
    """Recompute the planted latent features from a record via the temporal tools."""
    h = record.horizon
    window = get_in_window(record, spec.nadir_variable, h - spec.nadir_window, h)
    nadir = aggregates.minimum(window)
    if nadir is NA:
        nadir = last_value_before(record, spec.nadir_variable, h)
    a, b = spec.slope_variables
    sa = aggregates.slope(get_all_measurements(record, a))
    sb = aggregates.slope(get_all_measurements(record, b))
    sa = 0.0 if sa is NA else sa
    sb = 0.0 if sb is NA else sb
    ratio = sa / (1.0 + abs(sb))
    return float(nadir), float(ratio), count_measurements(record, spec.sparse_variable)


def _trajectory(rng, name: str, spec: SynthSpec, t: np.ndarray, params: dict) -> np.ndarray:
    h, ns = spec.horizon, spec.noise_scale
    if name == spec.nadir_variable:
        base, depth, center, drift = params["sbp"]
        dip = depth * np.exp(-(((t - center) / 3.0) ** 2))
        late = drift * np.clip((t - (h - spec.nadir_window)) / spec.nadir_window, 0.0, 1.0)
        return base - dip + late + rng.normal(0.0, 4.0 * ns, size=t.size)
    if name in spec.slope_variables:
        level, slope = params[name]
        sd = 3.0 if name == spec.slope_variables[0] else 1.5
        return level + slope * (t - h / 2) + rng.normal(0.0, sd * ns, size=t.size)
    mean, between, within = _LEVELS.get(name, (50.0, 10.0, 3.0))
    if name not in params:
        params[name] = rng.normal(mean, between)
    level = params[name]
    return level + rng.normal(0.0, within * ns, size=t.size)


def _intercept(logit: np.ndarray, target: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if expit(logit + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def generate(spec: SynthSpec = SynthSpec()) -> SynthResult:
    """Draw a cohort and its latent table; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    names = spec.variable_names
    h = spec.horizon
    base_rates = dict(zip(names, rng.uniform(*spec.rate_range, size=len(names))))
    base_rates[spec.sparse_variable] = spec.sparse_rate
    a, b = spec.slope_variables

    pending = []  # (pid, statics, events, rate multiplier, trajectory params)
    for i in range(spec.n_patients):
        pid = f"P{i:05d}"
        mult = math.exp(rng.normal(0.0, spec.rate_multiplier_sd))
        params = {
            "sbp": (
                rng.normal(120.0, 12.0),
                rng.exponential(15.0),
                rng.uniform(0.0, h - spec.nadir_window - 6.0),
                rng.normal(0.0, 15.0),
            ),
            a: (rng.normal(80.0, 10.0), rng.normal(0.0, 0.25)),
            b: (rng.normal(18.0, 3.0), rng.normal(0.0, 0.5)),
        }
        events = {}
        for name in names:
            if name == spec.informative_variable:
                continue  # drawn after labels
            rate = base_rates[name] * mult
            if name == spec.sparse_variable:
                rate *= math.exp(rng.normal(0.0, 0.8))
            t = _event_times(rng, rate, h)
            if name in (a, b):
                t = _ensure_min(rng, t, 2, h)
            elif name == spec.nadir_variable:
                t = _ensure_min(rng, t, 1, h)
            if len(t):
                events[name] = Series(t, _trajectory(rng, name, spec, t, params))
        statics = {"age": float(np.round(rng.normal(65.0, 15.0), 1)), "sex": "F" if rng.uniform() < 0.5 else "M"}
        pending.append((pid, statics, events, mult, params))

    provisional = [PatientRecord(pid, st, ev, h) for pid, st, ev, _, _ in pending]
    lat = np.array([latent_features(r, spec) for r in provisional])
    z = (lat - lat.mean(axis=0)) / np.where(lat.std(axis=0) > 0, lat.std(axis=0), 1.0)
    logit = z @ np.asarray(spec.label_weights)
    offset = _intercept(logit, spec.target_prevalence)
    y = (rng.uniform(size=spec.n_patients) < expit(logit + offset)).astype(int)
    prevalence = y.mean()
    if not 0.05 <= prevalence <= 0.5 or y.sum() < 2 or (1 - y).sum() < 2:
        raise SynthError(f"realized prevalence {prevalence:.3f} outside [0.05, 0.5]")

    records = []
    for (pid, statics, events, mult, params), label in zip(pending, y):
        name = spec.informative_variable
        if name in names:
            rate = base_rates[name] * mult * (spec.informative_factor if label else 1.0)
            t = _event_times(rng, rate, h)
            if len(t):
                events = {**events, name: Series(t, _trajectory(rng, name, spec, t, params))}
        records.append(PatientRecord(pid, statics, events, h))

    labels = {r.patient_id: int(v) for r, v in zip(records, y)}
    cohort = Cohort(records, labels, compute_schema(Cohort(records, labels, Schema(())), units=UNITS), UNITS)
    latents = {k: lat[:, j] for j, k in enumerate(LATENTS)}
    return SynthResult(cohort, latents, offset, spec)


def write(result: SynthResult, out_dir) -> dict[str, Path]:
    """Emit the cohort files plus ``latent.csv`` and the spec used."""
    out = Path(out_dir)
    paths = export_cohort(result.cohort, out)
    paths["latent"] = out / "latent.csv"
    with paths["latent"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", *LATENTS))
        for i, pid in enumerate(result.cohort.patient_ids):
            w.writerow((pid, *(repr(float(result.latents[k][i])) for k in LATENTS)))
    paths["spec"] = out / "synth_spec.json"
    paths["spec"].write_text(json.dumps(result.spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_latents(path) -> dict[str, dict[str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return {row["patient_id"]: {k: float(row[k]) for k in LATENTS} for row in csv.DictReader(fh)}


# ----------------------------------------------------------- mock banks


def oracle_programs(spec: SynthSpec = SynthSpec()) -> dict[str, str]:
    """FeatScript sources that compute the planted latents exactly."""
    a, b = spec.slope_variables
    w = repr(float(spec.nadir_window)).removesuffix(".0")
    v = spec.nadir_variable
    return {
        "nadir": f"coalesce(min(get_in_window({v}, horizon() - {w}, horizon())), last_value_before({v}, horizon()))",
        "slope_ratio": (
            f"coalesce(slope(get_all_measurements({a})), 0) / (1 + abs(coalesce(slope(get_all_measurements({b})), 0)))"
        ),
        "sparse_count": f"count_measurements({spec.sparse_variable})",
    }


_GENERIC_UNI = [
    "mean(get_all_measurements({var}))",
    "last(get_all_measurements({var}))",
    "quantile(get_all_measurements({var}), 0.9)",
    "max(get_all_measurements({var})) - min(get_all_measurements({var}))",
    "let s = get_all_measurements({var}) in if count(s) > 1 then std(s) else NA",
]

_GENERIC_MULTI = [
    "coalesce(last(get_all_measurements({v0})), 0) - coalesce(last(get_all_measurements({v1})), 0)",
    "let a = mean(get_all_measurements({v0})) in let b = mean(get_all_measurements({v1})) in if is_na(a) or is_na(b) then NA else a / (1 + abs(b))",
    "count_measurements({v0}) + count_measurements({v1})",
    "coalesce(time_since_last({v0}, horizon()), horizon())",
    "coalesce(last_value_before({v1}, horizon()), mean(get_all_measurements({v1})))",
]


def _questions(spec: SynthSpec, slope_question: str) -> list[dict]:
    a, b = spec.slope_variables
    others = [n for n in spec.variable_names if n not in (a, b)]
    qs = [{"question": slope_question, "variables": [a, b], "rationale": "rising drive relative to ventilation"}]
    for k in range(0, len(others) - 1, 2):
        qs.append(
            {
                "question": f"How do {others[k]} and {others[k + 1]} trend together over the stay?",
                "variables": [others[k], others[k + 1]],
                "rationale": "joint deterioration signal",
            }
        )
    return qs


SLOPE_QUESTION = "Is heart rate rising faster than respiratory rate changes over the stay?"


def oracle_bank(spec: SynthSpec = SynthSpec()) -> MockBank:
    """Bank whose sampled programs include the exact planted-signal programs."""
    progs = oracle_programs(spec)
    a, _ = spec.slope_variables
    uni = {
        spec.nadir_variable: [progs["nadir"], *_GENERIC_UNI[:4]],
        spec.sparse_variable: [progs["sparse_count"], *_GENERIC_UNI[:4]],
        a: [f"coalesce(slope(get_all_measurements({a})), 0)", *_GENERIC_UNI[:4]],
    }
    multi = {SLOPE_QUESTION: [progs["slope_ratio"], *_GENERIC_MULTI[:4]]}
    return MockBank(
        univariate={k: [s.replace("{var}", k) for s in v] for k, v in uni.items()},
        multivariate=multi,
        questions=_questions(spec, SLOPE_QUESTION),
        default_univariate=list(_GENERIC_UNI),
        default_multivariate=list(_GENERIC_MULTI),
    )


def plausible_bank(spec: SynthSpec = SynthSpec()) -> MockBank:
    """Clinically reasonable but imperfect programs: wrong windows, partial signals."""
    a, b = spec.slope_variables
    v = spec.nadir_variable
    s = spec.sparse_variable
    uni = {
        v: [
            f"min(get_in_window({v}, horizon() - 24, horizon()))",
            f"last(get_all_measurements({v}))",
            f"let s = get_in_window({v}, horizon() - 24, horizon()) in coalesce(mean(s), last_value_before({v}, horizon()))",
            *_GENERIC_UNI[:2],
        ],
        s: [
            f"if count(get_all_measurements({s})) > 0 then max(get_all_measurements({s})) else 0",
            f"count(get_in_window({s}, 0, 24))",
            *_GENERIC_UNI[:3],
        ],
        a: [
            f"coalesce(last(get_all_measurements({a})) - first(get_all_measurements({a})), 0)",
            *_GENERIC_UNI[:4],
        ],
    }
    multi = {
        SLOPE_QUESTION: [
            f"coalesce(last(get_all_measurements({a})) - first(get_all_measurements({a})), 0) - coalesce(last(get_all_measurements({b})) - first(get_all_measurements({b})), 0)",
            *_GENERIC_MULTI[:4],
        ]
    }
    return MockBank(
        univariate={k: [x.replace("{var}", k) for x in vals] for k, vals in uni.items()},
        multivariate=multi,
        questions=_questions(spec, SLOPE_QUESTION),
        default_univariate=list(_GENERIC_UNI),
        default_multivariate=list(_GENERIC_MULTI),
    )
