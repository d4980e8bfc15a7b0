"""Run configuration: a sectioned key-value (INI) file with documented defaults.

Example::

    [run]
    seed = 0
    task_description = Predict in-hospital mortality from the first 48 hours of ICU data.

    [synth]                 ; or a [cohort] section with events/statics/labels/horizon
    n_patients = 2000

    [split]
    test_fraction = 0.2

    [generation]
    mode = both
    B = 5
    n_q = 20
    n_r = 5
    temperature = 1.0

    [llm]
    kind = mock             ; or http (endpoint, model, token_env)
    mock_seed = 0
    mock_bank = oracle      ; oracle | plausible | path to a JSON bank

    [predictor]
    l2_strength = 1.0

    [evaluate]
    n_boot = 1000
    ablations = w/o multi, w/o uni, best-of-B, B=1, single round
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .evaluation import PredictorSpec
from .generation import MODES, GenConfig
from .llm import MockBank, ProviderConfig
from .synth import SynthSpec, oracle_bank, plausible_bank

ABLATIONS = ("w/o multi", "w/o uni", "best-of-B", "B=1", "single round")
DEFAULT_TASK = "Predict the binary outcome of each patient stay from its time-series measurements."


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    task_description: str = DEFAULT_TASK
    seed: int = 0
    cohort: dict | None = None  # events, statics, labels, units, horizon
    synth: SynthSpec | None = None
    test_fraction: float = 0.2
    generation: GenConfig = field(default_factory=GenConfig)
    mode: str = "both"
    llm: ProviderConfig = field(default_factory=ProviderConfig)
    mock_bank_ref: str = "oracle"
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    n_boot: int = 1000
    ablations: tuple[str, ...] = ()
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if (self.cohort is None) == (self.synth is None):
            raise ConfigError("exactly one of the [cohort] or [synth] sections is required")
        if self.mode not in MODES:
            raise ConfigError(f"[generation] mode must be one of {MODES}")
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ConfigError(f"[evaluate] unknown ablations {unknown}; choose from {ABLATIONS}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("[split] test_fraction must be in (0, 1)")
        if self.n_boot < 1:
            raise ConfigError("[evaluate] n_boot must be positive")

    def to_dict(self) -> dict:
        llm = asdict(replace(self.llm, mock_bank=None))
        llm.pop("mock_bank")
        llm["mock_bank_ref"] = self.mock_bank_ref
        llm["mock_bank_digest"] = self.llm.mock_bank.digest() if self.llm.mock_bank else None
        return {
            "run": {"task_description": self.task_description, "seed": self.seed, "workers": self.workers},
            "cohort": self.cohort,
            "synth": self.synth.to_dict() if self.synth else None,
            "split": {"test_fraction": self.test_fraction},
            "generation": {**asdict(self.generation), "mode": self.mode},
            "llm": llm,
            "predictor": asdict(self.predictor),
            "evaluate": {"n_boot": self.n_boot, "ablations": list(self.ablations)},
        }


def config_from_dict(d: dict, mock_bank: MockBank | None = None) -> RunConfig:
    """Inverse of ``RunConfig.to_dict``; the mock bank travels separately."""
    llm = dict(d["llm"])
    bank_ref = llm.pop("mock_bank_ref", "oracle")
    llm.pop("mock_bank_digest", None)
    gen = dict(d["generation"])
    mode = gen.pop("mode")
    return RunConfig(
        task_description=d["run"]["task_description"],
        seed=d["run"]["seed"],
        workers=d["run"].get("workers", 1),
        cohort=d["cohort"],
        synth=SynthSpec.from_dict(d["synth"]) if d["synth"] else None,
        test_fraction=d["split"]["test_fraction"],
        generation=GenConfig(**gen),
        mode=mode,
        llm=ProviderConfig(**llm, mock_bank=mock_bank),
        mock_bank_ref=bank_ref,
        predictor=PredictorSpec(**d["predictor"]),
        n_boot=d["evaluate"]["n_boot"],
        ablations=tuple(d["evaluate"]["ablations"]),
    )


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def resolve_bank(ref: str, spec: SynthSpec | None, base_dir: Path | None = None) -> MockBank:
    spec = spec or SynthSpec()
    if ref == "oracle":
        return oracle_bank(spec)
    if ref == "plausible":
        return plausible_bank(spec)
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    if not path.exists():
        raise ConfigError(f"[llm] mock_bank {ref!r} is neither oracle/plausible nor an existing file")
    return MockBank.load(path)


def _get(section, key, conv, default):
    if section is None or key not in section:
        return default
    raw = section.get(key).strip()
    if raw == "":
        return default
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key}: cannot parse {raw!r}") from None


def _gen_and_llm(g, llm, seed, synth, base) -> tuple[GenConfig, ProviderConfig]:
    gen = GenConfig(
        B=_get(g, "B", int, 5),
        n_q=_get(g, "n_q", int, 20),
        n_r=_get(g, "n_r", int, 5),
        temperature=_get(g, "temperature", float, 1.0),
        smoke_sample_size=_get(g, "smoke_sample_size", int, 32),
        seed=_get(g, "seed", int, seed),
        model_name=_get(llm, "model", str, GenConfig().model_name),
        max_in_flight=_get(llm, "max_in_flight", int, 4),
    )
    kind = _get(llm, "kind", str, None)
    if kind is None:
        raise ConfigError("[llm] kind is required (mock or http)")
    provider = ProviderConfig(
        kind=kind,
        endpoint=_get(llm, "endpoint", str, None),
        model=gen.model_name,
        token_env=_get(llm, "token_env", str, None),
        max_retries=_get(llm, "max_retries", int, 3),
        backoff=_get(llm, "backoff", float, 1.0),
        timeout=_get(llm, "timeout", float, 120.0),
        mock_seed=_get(llm, "mock_seed", int, seed),
        mock_bank=resolve_bank(_get(llm, "mock_bank", str, "oracle"), synth, base) if kind == "mock" else None,
        max_in_flight=gen.max_in_flight,
    )
    return gen, provider


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (B vs b)
    cp.read_string(text)
    known = {"run", "cohort", "synth", "split", "generation", "llm", "predictor", "evaluate"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    if not cp.has_section("llm"):
        raise ConfigError("config is missing the required [llm] section")
    sec = {name: (cp[name] if cp.has_section(name) else None) for name in known}
    base = base_dir or Path.cwd()

    run = sec["run"]
    seed = _get(run, "seed", int, 0)

    cohort = synth = None
    if sec["cohort"] is not None:
        c = sec["cohort"]
        for key in ("events", "labels", "horizon"):
            if key not in c:
                raise ConfigError(f"[cohort] is missing {key}")

        def path(key):
            v = _get(c, key, str, None)
            return None if v is None else str((base / v) if not Path(v).is_absolute() else Path(v))

        cohort = {
            "events": path("events"),
            "statics": path("statics"),
            "labels": path("labels"),
            "units": path("units"),
            "horizon": _get(c, "horizon", float, None),
        }
    if sec["synth"] is not None:
        s = sec["synth"]
        if "spec" in s:
            p = Path(s["spec"])
            synth = SynthSpec.load(p if p.is_absolute() else base / p)
        else:
            d = {**SynthSpec().to_dict(), "seed": seed, "variable_names": []}
            for key, default in list(d.items()):
                if key in s and not isinstance(default, list):
                    d[key] = _get(s, key, type(default), default)
            try:
                synth = SynthSpec.from_dict(d)
            except ValueError as e:
                raise ConfigError(f"[synth] {e}") from None

    g = sec["generation"]
    try:
        gen, provider = _gen_and_llm(g, sec["llm"], seed, synth, base)
    except ConfigError:
        raise
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None
    mode = _get(g, "mode", str, "both")
    bank_ref = _get(sec["llm"], "mock_bank", str, "oracle")

    p = sec["predictor"]
    predictor = PredictorSpec(
        l2_strength=_get(p, "l2_strength", float, 1.0),
        max_iterations=_get(p, "max_iterations", int, 100),
        tolerance=_get(p, "tolerance", float, 1e-8),
    )
    e = sec["evaluate"]
    ablations = tuple(a.strip() for a in _get(e, "ablations", str, "").split(",") if a.strip())
    return RunConfig(
        task_description=_get(run, "task_description", str, DEFAULT_TASK),
        seed=seed,
        cohort=cohort,
        synth=synth,
        test_fraction=_get(sec["split"], "test_fraction", float, 0.2),
        generation=gen,
        mode=mode,
        llm=provider,
        mock_bank_ref=bank_ref,
        predictor=predictor,
        n_boot=_get(e, "n_boot", int, 1000),
        ablations=ablations,
        workers=_get(run, "workers", int, 1),
        out_dir=_get(run, "out", str, None),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
