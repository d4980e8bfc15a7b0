"""Staged end-to-end runs: split, generate, extract, evaluate.

Every stage reads its inputs from the run directory and writes its outputs
there, so a run can be resumed from any stage.  ``manifest.json`` records a
fingerprint per stage (config slice chained with the previous stage) plus a
hash of every artifact; wall-clock data lives only in ``meta.json`` so two runs
with the same config are byte-identical apart from it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import Cohort, Schema, compute_schema, export_cohort, ingest, load_exported, split
from .config import ABLATIONS, RunConfig, config_from_dict, fingerprint
from .evaluation import (
    EvalReport,
    evaluate_pipeline,
    first_of_b,
    format_summary,
    format_table,
    select_best_of_b,
)
from .extraction import (
    baseline_features,
    concat,
    export_matrix,
    extract,
    import_matrix,
    program_column_name,
    static_features,
)
from .featscript import GRAMMAR, GRAMMAR_VERSION
from .generation import MULTIVARIATE, UNIVARIATE, FeatureRegistry, run_generation, smoke_sample
from .llm import MockBank, make_provider
from .llm.prompts import TEMPLATES, templates_hash
from .synth import generate as synth_generate
from .synth import write as synth_write
from .tools import MULTIVARIATE_TOOLS, UNIVARIATE_TOOLS, tool_docs

log = logging.getLogger(__name__)

STAGES = ("split", "generate", "extract", "evaluate")
BASELINE = "BL"
FULL_NAMES = {"both": "BL+generated", "uni": "w/o multi", "multi": "w/o uni"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class ResumeError(RuntimeError):
    pass


@dataclass
class RunResult:
    run_dir: Path
    reports: list[EvalReport]
    stages_run: list[str]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _input_hashes(config: RunConfig) -> dict:
    if not config.cohort:
        return {}
    return {k: _sha(Path(v)) for k, v in sorted(config.cohort.items()) if k != "horizon" and v}


def stage_fingerprints(config: RunConfig) -> dict[str, str]:
    """Chained per-stage fingerprints: a change upstream invalidates everything after it."""
    d = config.to_dict()
    fps = {}
    fps["split"] = fingerprint(
        {"cohort": d["cohort"], "inputs": _input_hashes(config), "synth": d["synth"], "split": d["split"],
         "seed": config.seed, "task": config.task_description}
    )
    fps["generate"] = fingerprint(
        {"prev": fps["split"], "generation": d["generation"], "llm": d["llm"], "templates": templates_hash(),
         "grammar": GRAMMAR_VERSION}
    )
    fps["extract"] = fingerprint({"prev": fps["generate"]})
    fps["evaluate"] = fingerprint({"prev": fps["extract"], "predictor": d["predictor"], "evaluate": d["evaluate"]})
    return fps


# ------------------------------------------------------------------ stages


def _stage_split(config: RunConfig, run_dir: Path) -> list[Path]:
    cohort_dir = run_dir / "cohort"
    if config.synth is not None:
        result = synth_generate(config.synth)
        paths = list(synth_write(result, cohort_dir).values())
    else:
        c = config.cohort
        cohort = ingest(c["events"], c["statics"], c["labels"], c["horizon"], c.get("units"))
        paths = list(export_cohort(cohort, cohort_dir).values())
    cohort = load_exported(cohort_dir)
    train, test = split(cohort, config.test_fraction, config.seed)
    schema = compute_schema(train, config.task_description, cohort.units)
    split_path = run_dir / "split.json"
    _write_json(split_path, {"seed": config.seed, "test_fraction": config.test_fraction,
                             "train": train.patient_ids, "test": test.patient_ids})
    schema_path = run_dir / "schema.json"
    _write_json(schema_path, schema.to_dict())
    log.info("split: %d train / %d test, %d variables", len(train), len(test), len(schema.variables))
    return [*paths, split_path, schema_path]


def _load_split(run_dir: Path) -> tuple[Cohort, Cohort, Schema]:
    cohort = load_exported(run_dir / "cohort")
    s = _read_json(run_dir / "split.json")
    schema = Schema.from_dict(_read_json(run_dir / "schema.json"))
    return cohort.subset(s["train"]), cohort.subset(s["test"]), schema


def _stage_generate(config: RunConfig, run_dir: Path, transport=None) -> list[Path]:
    train, _, schema = _load_split(run_dir)
    provider = make_provider(config.llm, transport)
    try:
        smoke = smoke_sample(train, config.generation.smoke_sample_size, config.generation.seed)
        registry = run_generation(schema, config.task_description, config.generation, provider, config.mode, smoke)
    finally:
        if hasattr(provider, "close"):
            provider.close()
    path = run_dir / "registry.json"
    registry.save(path)
    counts = registry.manifest["status_counts"]
    log.info("generate: univariate %s; multivariate %s", counts[UNIVARIATE], counts[MULTIVARIATE])
    return [path]


def _stage_extract(config: RunConfig, run_dir: Path) -> list[Path]:
    train, test, schema = _load_split(run_dir)
    registry = FeatureRegistry.load(run_dir / "registry.json")
    out = run_dir / "matrices"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for part, cohort in (("train", train), ("test", test)):
        gen, _ = extract(cohort, registry, workers=config.workers)
        blocks = {"baseline": baseline_features(cohort, schema), "static": static_features(cohort, schema), "generated": gen}
        for name, matrix in blocks.items():
            p = out / f"{part}_{name}.csv"
            export_matrix(matrix, p)
            paths += [p, p.with_name(p.name + ".provenance.json")]
        log.info("extract[%s]: %d x %d generated, %.1f%% missing", part, *gen.shape, 100 * float(np.isnan(gen.values).mean()) if gen.values.size else 0.0)
    return paths


def method_registries(config: RunConfig, registry: FeatureRegistry, train_generated, y_train) -> dict[str, FeatureRegistry]:
    """Registries feeding each report row after the baseline, in report order."""
    out = {FULL_NAMES[config.mode]: registry.subset(registry.valid())}
    for name in config.ablations:
        if name == "w/o multi" and config.mode == "both":
            out[name] = registry.subset([p for p in registry.valid() if p.kind == UNIVARIATE])
        elif name == "w/o uni" and config.mode == "both":
            out[name] = registry.subset([p for p in registry.valid() if p.kind == MULTIVARIATE])
        elif name == "best-of-B":
            out[name] = select_best_of_b(registry, train_generated, y_train)
        elif name == "B=1":
            out[name] = first_of_b(registry)
        elif name == "single round":
            out[name] = registry.subset([p for p in registry.valid() if p.round_index == 1])
        elif name in ("w/o multi", "w/o uni"):
            log.warning("ablation %r needs mode=both; skipped", name)
    return out


def _stage_evaluate(config: RunConfig, run_dir: Path) -> tuple[list[Path], list[EvalReport]]:
    train, test, _ = _load_split(run_dir)
    registry = FeatureRegistry.load(run_dir / "registry.json")
    m = {name: import_matrix(run_dir / "matrices" / f"{name}.csv")
         for name in (f"{part}_{b}" for part in ("train", "test") for b in ("baseline", "static", "generated"))}
    bl_tr = concat([m["train_baseline"], m["train_static"]])
    bl_te = concat([m["test_baseline"], m["test_static"]])
    y_tr, y_te = train.label_array(), test.label_array()

    methods = {BASELINE: (bl_tr, bl_te)}
    for name, reg in method_registries(config, registry, m["train_generated"], y_tr).items():
        cols = [program_column_name(p) for p in reg.valid()]
        methods[name] = (
            concat([bl_tr, m["train_generated"].select_columns(cols)]),
            concat([bl_te, m["test_generated"].select_columns(cols)]),
        )
    reports = evaluate_pipeline(y_tr, y_te, methods, config.predictor, config.n_boot, config.seed)
    table, summary = run_dir / "report.csv", run_dir / "summary.txt"
    table.write_text(format_table(reports), encoding="utf-8")
    summary.write_text(format_summary(reports), encoding="utf-8")
    for r in reports:
        log.info("evaluate: %-14s AUROC %.4f ±%.4f", r.method, r.auroc, r.half_width)
    return [table, summary], reports


# ------------------------------------------------------------------ driver


def _manifest(config: RunConfig, fps: dict) -> dict:
    return {
        "package_version": __version__,
        "config": config.to_dict(),
        "fingerprints": fps,
        "stages": {},
        "prompt_templates": dict(TEMPLATES),
        "templates_hash": templates_hash(),
        "tool_docs": {"univariate": tool_docs(UNIVARIATE_TOOLS), "multivariate": tool_docs(MULTIVARIATE_TOOLS)},
        "grammar": GRAMMAR,
        "grammar_version": GRAMMAR_VERSION,
        "ablations_available": list(ABLATIONS),
    }


def _rel_hashes(run_dir: Path, paths) -> dict[str, str]:
    return {str(Path(p).relative_to(run_dir)): _sha(Path(p)) for p in sorted(set(map(Path, paths)))}


def _execute(config: RunConfig, run_dir: Path, manifest: dict, todo: list[str], transport=None) -> RunResult:
    meta_path = run_dir / "meta.json"
    meta = _read_json(meta_path) if meta_path.exists() else {"stages": {}}
    meta.update({"python": platform.python_version(), "package_version": __version__})
    reports: list[EvalReport] = []
    for stage in todo:
        started = time.perf_counter()
        meta["stages"][stage] = {"started_at": datetime.now(timezone.utc).isoformat()}
        manifest["stages"][stage] = {"status": "running", "fingerprint": manifest["fingerprints"][stage]}
        _write_json(run_dir / "manifest.json", manifest)
        try:
            if stage == "split":
                paths = _stage_split(config, run_dir)
            elif stage == "generate":
                paths = _stage_generate(config, run_dir, transport)
            elif stage == "extract":
                paths = _stage_extract(config, run_dir)
            else:
                paths, reports = _stage_evaluate(config, run_dir)
        except Exception as exc:
            manifest["stages"][stage]["status"] = "failed"
            manifest["stages"][stage]["error"] = f"{type(exc).__name__}: {exc}"
            _write_json(run_dir / "manifest.json", manifest)
            meta["stages"][stage]["wall_time_s"] = time.perf_counter() - started
            _write_json(meta_path, meta)
            raise StageError(stage, exc) from exc
        manifest["stages"][stage] = {
            "status": "done",
            "fingerprint": manifest["fingerprints"][stage],
            "artifacts": _rel_hashes(run_dir, paths),
        }
        meta["stages"][stage]["wall_time_s"] = time.perf_counter() - started
        meta["stages"][stage]["finished_at"] = datetime.now(timezone.utc).isoformat()
        _write_json(run_dir / "manifest.json", manifest)
        _write_json(meta_path, meta)
    if not reports and (run_dir / "report.csv").exists():
        reports = read_report(run_dir / "report.csv")
    return RunResult(run_dir, reports, list(todo))


def _save_config(config: RunConfig, run_dir: Path) -> None:
    _write_json(run_dir / "config.json", config.to_dict())
    if config.llm.mock_bank is not None:
        _write_json(run_dir / "mock_bank.json", config.llm.mock_bank.to_dict())


def load_run_config(run_dir) -> RunConfig:
    run_dir = Path(run_dir)
    bank_path = run_dir / "mock_bank.json"
    bank = MockBank.load(bank_path) if bank_path.exists() else None
    return config_from_dict(_read_json(run_dir / "config.json"), bank)


def run(config: RunConfig, out_dir, transport=None) -> RunResult:
    """Execute all stages into ``out_dir`` (created if needed)."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if (run_dir / "manifest.json").exists():
        raise ResumeError(f"{run_dir} already holds a run; use resume or pick a new directory")
    _save_config(config, run_dir)
    manifest = _manifest(config, stage_fingerprints(config))
    return _execute(config, run_dir, manifest, list(STAGES), transport)


def resume(run_dir, from_stage: str | None = None, config: RunConfig | None = None, transport=None) -> RunResult:
    """Re-run from ``from_stage`` (or the first incomplete stage).

    Stages before ``from_stage`` must be complete, with a fingerprint matching
    the (possibly updated) config and untouched artifacts; otherwise resuming
    would mix outputs of different configurations and is refused.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ResumeError(f"{run_dir} has no manifest.json")
    if from_stage is not None and from_stage not in STAGES:
        raise ResumeError(f"unknown stage {from_stage!r}; choose from {STAGES}")
    manifest = _read_json(manifest_path)
    config = config or load_run_config(run_dir)
    fps = stage_fingerprints(config)

    def complete(stage):
        s = manifest["stages"].get(stage, {})
        return s.get("status") == "done" and s.get("fingerprint") == fps[stage]

    if from_stage is None:
        pending = [s for s in STAGES if not complete(s)]
        if not pending:
            log.info("run in %s is already complete; nothing to do", run_dir)
            return RunResult(run_dir, read_report(run_dir / "report.csv"), [])
        from_stage = pending[0]
    start = STAGES.index(from_stage)
    for stage in STAGES[:start]:
        s = manifest["stages"].get(stage)
        if s is None or s.get("status") != "done":
            raise ResumeError(f"cannot resume from {from_stage!r}: earlier stage {stage!r} is not complete")
        if s["fingerprint"] != fps[stage]:
            raise ResumeError(
                f"cannot resume from {from_stage!r}: stage {stage!r} fingerprint {s['fingerprint']} "
                f"does not match the current config ({fps[stage]})"
            )
        for rel, digest in s.get("artifacts", {}).items():
            p = run_dir / rel
            if not p.exists() or _sha(p) != digest:
                raise ResumeError(f"cannot resume from {from_stage!r}: artifact {rel} of stage {stage!r} changed")
    _save_config(config, run_dir)
    manifest["config"] = config.to_dict()
    manifest["fingerprints"] = fps
    for stage in STAGES[start:]:
        manifest["stages"].pop(stage, None)
    return _execute(config, run_dir, manifest, list(STAGES[start:]), transport)


def read_report(path) -> list[EvalReport]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EvalReport(
                    row["method"], float(row["auroc"]), float(row["ci_lower"]), float(row["ci_upper"]),
                    int(row["n_boot"]), int(row["seed"]), int(row["n_train"]), int(row["n_test"]), int(row["n_features"]),
                )
            )
    return out


def report_lift(reports, method: str | None = None) -> float:
    """AUROC of ``method`` (default: the full generated row) minus the baseline."""
    by = {r.method: r.auroc for r in reports}
    if method is None:
        method = next(r.method for r in reports if r.method != BASELINE)
    return float(np.float64(by[method]) - by[BASELINE])


__all__ = [
    "STAGES",
    "RunResult",
    "StageError",
    "ResumeError",
    "run",
    "resume",
    "stage_fingerprints",
    "method_registries",
    "load_run_config",
    "read_report",
    "report_lift",
]
