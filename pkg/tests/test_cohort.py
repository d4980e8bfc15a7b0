import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsfeatgen.cohort import (
    CohortError,
    PatientRecord,
    Schema,
    Series,
    compute_schema,
    export_cohort,
    ingest,
    load_exported,
    restrict,
    split,
)

from .conftest import make_cohort, make_record, random_cohort


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def files(tmp_path):
    events = write(
        tmp_path / "events.csv",
        "patient_id,time,variable,value\n"
        "a,1.5,HR,80\n"
        "a,0.5,HR,90\n"
        "a,2,SBP,120\n"
        "b,3,HR,70\n"
        "b,60,HR,71\n"
        "c,1,SBP,nan\n",
    )
    statics = write(tmp_path / "statics.csv", "patient_id,age,sex\na,61,F\nb,,M\nc,45,NA\n")
    labels = write(tmp_path / "labels.csv", "patient_id,label\nc,0\na,1\nb,0\n")
    return events, statics, labels


def test_ingest_sorts_events_and_follows_label_order(files):
    cohort = ingest(*files, horizon=48)
    assert cohort.patient_ids == ["c", "a", "b"]
    a = cohort.records[1]
    assert a.series("HR").pairs() == [(0.5, 90.0), (1.5, 80.0)]
    assert dict(a.statics) == {"age": 61.0, "sex": "F"}
    assert dict(cohort.records[2].statics) == {"sex": "M"}
    assert cohort.ingest_stats["dropped_after_horizon"] == 1
    assert cohort.ingest_stats["dropped_nonfinite"] == 1


def test_record_without_events_is_kept(files):
    cohort = ingest(*files, horizon=48)
    c = cohort.records[0]
    assert c.observed() == set()
    assert len(c.series("HR")) == 0


def test_negative_time_reports_line(tmp_path, files):
    _, statics, labels = files
    ev = write(tmp_path / "bad.csv", "patient_id,time,variable,value\na,1,HR,80\na,-2,HR,81\n")
    with pytest.raises(CohortError, match="negative time at line 3"):
        ingest(ev, statics, labels, 48)


def test_bad_header_rejected(tmp_path, files):
    _, statics, labels = files
    ev = write(tmp_path / "bad.csv", "pid,t,var,val\n")
    with pytest.raises(CohortError, match="expected header"):
        ingest(ev, statics, labels, 48)


def test_missing_label_names_patients(tmp_path, files):
    events, statics, _ = files
    labels = write(tmp_path / "l.csv", "patient_id,label\na,1\n")
    with pytest.raises(CohortError, match="missing label.*b.*c"):
        ingest(events, statics, labels, 48)


def test_duplicate_observation_last_wins(tmp_path, files, caplog):
    _, statics, labels = files
    ev = write(tmp_path / "d.csv", "patient_id,time,variable,value\na,1,HR,80\na,1,HR,99\n")
    with caplog.at_level(logging.WARNING):
        cohort = ingest(ev, statics, labels, 48)
    assert cohort.records[1].series("HR").pairs() == [(1.0, 99.0)]
    assert cohort.ingest_stats["duplicates_replaced"] == 1
    assert "duplicate" in caplog.text


def test_series_arrays_are_read_only(record):
    s = record.series("HR")
    with pytest.raises(ValueError):
        s.values[0] = 1.0


def test_record_rejects_unsorted_times():
    with pytest.raises(CohortError):
        PatientRecord("x", {}, {"HR": Series([2.0, 1.0], [1.0, 2.0])}, 48.0)


def test_restrict_keeps_only_named_variables(record):
    r = restrict(record, ["HR", "TEMP"])
    assert r.observed() == {"HR"}
    assert r.series("HR") == record.series("HR")
    assert len(r.series("SBP")) == 0
    assert dict(r.statics) == dict(record.statics)


def test_compute_schema_stats_match_numpy():
    cohort = make_cohort(
        [
            make_record("a", {"HR": [(1, 1.0), (2, 2.0)]}),
            make_record("b", {"HR": [(1, 3.0)], "SBP": [(1, 100.0)]}),
            make_record("c", {}),
        ],
        {"a": 1, "b": 0, "c": 0},
    )
    schema = compute_schema(cohort, "task", {"HR": "bpm"})
    hr = schema["HR"]
    x = np.array([1.0, 2.0, 3.0])
    assert hr.unit == "bpm"
    assert hr.stats["observation_count"] == 3
    assert hr.stats["patient_coverage_fraction"] == pytest.approx(2 / 3)
    assert hr.stats["mean"] == pytest.approx(x.mean())
    assert hr.stats["std"] == pytest.approx(x.std())
    assert hr.stats["p25"] == pytest.approx(np.percentile(x, 25))
    assert schema.names == ["HR", "SBP"]
    assert schema.task_description == "task"


def test_schema_round_trips_through_dict(small_cohort):
    schema = compute_schema(small_cohort, "t")
    assert Schema.from_dict(schema.to_dict()) == schema


def test_static_categories_from_training_split(small_cohort):
    schema = compute_schema(small_cohort)
    assert schema.static_covariate_names == ("age", "sex")
    assert schema.static_categories == {"sex": ("F", "M")}


def test_split_is_stratified_and_deterministic():
    cohort = random_cohort(n=50, prevalence=0.2)
    tr1, te1 = split(cohort, 0.2, seed=7)
    tr2, te2 = split(cohort, 0.2, seed=7)
    assert te1.patient_ids == te2.patient_ids
    assert set(tr1.patient_ids).isdisjoint(te1.patient_ids)
    assert len(tr1) + len(te1) == 50
    # 10 positives, 40 negatives -> 2 and 8 in test
    assert int(te1.label_array().sum()) == 2
    assert len(te1) == 10
    _, te3 = split(cohort, 0.2, seed=8)
    assert te3.patient_ids != te1.patient_ids


def test_split_needs_two_per_class():
    cohort = make_cohort([make_record("a"), make_record("b"), make_record("c")], {"a": 1, "b": 0, "c": 0})
    with pytest.raises(CohortError, match="class 1"):
        split(cohort, 0.5, 0)


@settings(max_examples=30, deadline=None)
@given(n_pos=st.integers(2, 30), n_neg=st.integers(2, 30), frac=st.floats(0.05, 0.95))
def test_split_class_counts_round_half_up(n_pos, n_neg, frac):
    records = [make_record(f"p{i}") for i in range(n_pos + n_neg)]
    labels = {f"p{i}": int(i < n_pos) for i in range(n_pos + n_neg)}
    cohort = make_cohort(records, labels)
    _, test = split(cohort, frac, 0)
    y = test.label_array()
    for cls, n in ((1, n_pos), (0, n_neg)):
        expected = min(max(int(np.floor(n * frac + 0.5 + 1e-9)), 1), n - 1)
        assert int((y == cls).sum()) == expected


def test_export_and_reload_round_trip(tmp_path, small_cohort):
    export_cohort(small_cohort, tmp_path / "c")
    again = load_exported(tmp_path / "c")
    assert again == small_cohort
    assert again.schema == small_cohort.schema
