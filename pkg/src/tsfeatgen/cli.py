"""Command-line entry point: ``tsfeatgen <subcommand> ...``.

Exit codes: 0 success, 1 stage or runtime failure, 2 bad arguments or config.
The HTTP provider token is read only from the environment variable named by
``--token-env`` (or ``token_env`` in the config); it is never a CLI argument.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .cohort import CohortError, compute_schema, export_cohort, ingest, load_exported, split
from .config import ConfigError, RunConfig, load_config, resolve_bank
from .evaluation import PredictorSpec, evaluate_method, format_summary, format_table
from .extraction import MatrixFormatError, baseline_features, concat, export_matrix, extract, import_matrix, static_features
from .generation import MODES, GenConfig, FeatureRegistry, run_generation, smoke_sample
from .llm import ProviderConfig, ProviderError, make_provider
from .pipeline import STAGES, ResumeError, StageError, resume, run
from .synth import SynthSpec, generate as synth_generate, write as synth_write

log = logging.getLogger("tsfeatgen")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default: config value or 0)")
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("--config", default=None, help="run configuration file (INI)")


def _llm_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider", choices=("mock", "http"), default=None)
    p.add_argument("--bank", default=None, help="mock bank: oracle, plausible or a JSON file")
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--token-env", default=None, help="name of the environment variable holding the API token")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsfeatgen", description="Generate and evaluate time-series features.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate raw cohort files and write a normalized copy")
    _common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--statics")
    p.add_argument("--labels", required=True)
    p.add_argument("--units")
    p.add_argument("--horizon", type=float, required=True)

    p = sub.add_parser("synth", help="draw a synthetic cohort with planted signal")
    _common(p)
    p.add_argument("--n-patients", type=int, default=None)
    p.add_argument("--spec", default=None, help="JSON synth spec")

    p = sub.add_parser("generate", help="generate feature programs for a cohort")
    _common(p)
    p.add_argument("--cohort", required=True, help="cohort directory (ingest/synth output)")
    p.add_argument("--task", default=None, help="task description")
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--candidates", type=int, default=None, help="candidates per prompt (B)")
    p.add_argument("--questions", type=int, default=None, help="questions per round (n_q)")
    p.add_argument("--test-fraction", type=float, default=None)
    _llm_args(p)

    p = sub.add_parser("extract", help="evaluate programs on a cohort into a feature matrix")
    _common(p)
    p.add_argument("--registry", default=None)
    p.add_argument("--cohort", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--baseline-only", action="store_true")
    g.add_argument("--with-baseline", action="store_true")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("evaluate", help="train on one matrix, score another, report AUROC with bootstrap CI")
    _common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--labels", required=True, help="labels CSV (patient_id,label) covering both matrices")
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--name", default="model")
    p.add_argument("--l2", type=float, default=1.0)

    p = sub.add_parser("run", help="run every stage from a config file")
    _common(p)
    p.add_argument("--mode", choices=MODES, default=None)

    p = sub.add_parser("resume", help="resume a run directory")
    _common(p)
    p.add_argument("--run-dir", default=None, help="run directory (defaults to --out)")
    p.add_argument("--from-stage", choices=STAGES, default=None)
    return parser


def _load_cfg(args) -> RunConfig | None:
    return load_config(args.config) if args.config else None


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def cmd_ingest(args) -> int:
    cohort = ingest(args.events, args.statics, args.labels, args.horizon, args.units)
    out = _require_out(args)
    export_cohort(cohort, out)
    print(json.dumps({"patients": len(cohort), "variables": cohort.schema.names, **cohort.ingest_stats}, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    spec = SynthSpec.load(args.spec) if args.spec else (cfg.synth if cfg and cfg.synth else SynthSpec())
    if args.n_patients is not None:
        spec = replace(spec, n_patients=args.n_patients)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    result = synth_generate(spec)
    synth_write(result, _require_out(args))
    y = result.cohort.label_array()
    print(f"wrote {len(y)} patients, prevalence {y.mean():.3f}, to {args.out}")
    return 0


def _provider_config(args, cfg: RunConfig | None, spec: SynthSpec | None) -> ProviderConfig:
    base = cfg.llm if cfg else None
    kind = args.provider or (base.kind if base else None)
    if kind is None:
        raise UsageError("no LLM provider: pass --provider or a --config with an [llm] section")
    model = args.model or (base.model if base else GenConfig().model_name)
    if kind == "mock":
        bank = resolve_bank(args.bank, spec) if args.bank else (base.mock_bank if base and base.mock_bank else resolve_bank("oracle", spec))
        seed = args.seed if args.seed is not None else (base.mock_seed if base else 0)
        return ProviderConfig(kind="mock", model=model, mock_seed=seed, mock_bank=bank)
    return ProviderConfig(
        kind="http",
        endpoint=args.endpoint or (base.endpoint if base else None),
        model=model,
        token_env=args.token_env or (base.token_env if base else None),
        max_retries=base.max_retries if base else 3,
        backoff=base.backoff if base else 1.0,
        timeout=base.timeout if base else 120.0,
    )


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    cohort = load_exported(args.cohort)
    spec_path = Path(args.cohort) / "synth_spec.json"
    spec = SynthSpec.load(spec_path) if spec_path.exists() else None
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    gen = cfg.generation if cfg else GenConfig()
    gen = replace(
        gen,
        seed=seed,
        n_r=args.rounds or gen.n_r,
        B=args.candidates or gen.B,
        n_q=args.questions or gen.n_q,
        model_name=args.model or gen.model_name,
    )
    mode = args.mode or (cfg.mode if cfg else "both")
    task = args.task or (cfg.task_description if cfg else "")
    fraction = args.test_fraction or (cfg.test_fraction if cfg else 0.2)
    train, _ = split(cohort, fraction, seed)
    schema = compute_schema(train, task, cohort.units)
    provider = make_provider(_provider_config(args, cfg, spec))
    registry = run_generation(schema, task, gen, provider, mode, smoke_sample(train, gen.smoke_sample_size, seed))
    registry.save(_require_out(args))
    print(json.dumps(registry.manifest["status_counts"], sort_keys=True))
    return 0


def cmd_extract(args) -> int:
    cohort = load_exported(args.cohort)
    out = _require_out(args)
    if args.baseline_only:
        matrix = concat([baseline_features(cohort), static_features(cohort)])
    else:
        if not args.registry:
            raise UsageError("--registry is required unless --baseline-only")
        gen, _ = extract(cohort, FeatureRegistry.load(args.registry), workers=args.workers)
        matrix = concat([baseline_features(cohort), static_features(cohort), gen]) if args.with_baseline else gen
    export_matrix(matrix, out)
    print(f"wrote {matrix.shape[0]} x {matrix.shape[1]} matrix to {out}")
    return 0


def _labels_for(path, ids):
    from .cohort import read_labels

    labels = read_labels(Path(path))
    missing = [i for i in ids if i not in labels]
    if missing:
        raise UsageError(f"labels file lacks {len(missing)} patients, e.g. {missing[:5]}")
    return [labels[i] for i in ids]


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    tr, te = import_matrix(args.train), import_matrix(args.test)
    y_tr, y_te = _labels_for(args.labels, tr.patient_ids), _labels_for(args.labels, te.patient_ids)
    spec = cfg.predictor if cfg else PredictorSpec(l2_strength=args.l2)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    report = evaluate_method(args.name, tr, te, y_tr, y_te, spec, args.n_boot, seed)
    if args.out:
        Path(args.out).write_text(format_table([report]), encoding="utf-8")
    sys.stdout.write(format_summary([report]))
    return 0


def _run_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("run needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(
            cfg,
            seed=args.seed,
            generation=replace(cfg.generation, seed=args.seed),
            llm=replace(cfg.llm, mock_seed=args.seed) if cfg.llm.kind == "mock" else cfg.llm,
        )
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode)
    return cfg


def cmd_run(args) -> int:
    cfg = _run_config(args)
    out = args.out or cfg.out_dir
    if not out:
        raise UsageError("no output directory: pass --out or set [run] out")
    result = run(cfg, out)
    sys.stdout.write((Path(out) / "summary.txt").read_text(encoding="utf-8"))
    log.info("run complete: %s", result.run_dir)
    return 0


def cmd_resume(args) -> int:
    run_dir = args.run_dir or args.out
    if not run_dir:
        raise UsageError("resume needs --run-dir (or --out)")
    cfg = _run_config(args) if args.config else None
    result = resume(run_dir, args.from_stage, cfg)
    if not result.stages_run:
        print(f"{run_dir}: all stages complete, nothing to do")
    else:
        sys.stdout.write((Path(run_dir) / "summary.txt").read_text(encoding="utf-8"))
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "generate": cmd_generate,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
    "resume": cmd_resume,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as e:
        print(f"error: stage {e.stage} failed: {e.cause}", file=sys.stderr)
        return 1
    except (ConfigError, UsageError, ResumeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CohortError, MatrixFormatError, ProviderError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
