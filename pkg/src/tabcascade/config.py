"""Run configuration shared by every CLI command.

A config file is a JSON object with up to five sections; every field is
optional and falls back to the defaults below::

    {"seed": 0, "jobs": 1,
     "synthetic": {...SyntheticSpec fields...},
     "plan": {...StagePlan fields, stage configs as nested objects...},
     "evaluation": {"k": 5, "models": [...], "hyperparams": {...}, "missing_threshold": 0.05},
     "paths": {"data": ..., "checkpoint": ..., "rows": ..., "out": ...}}

Unknown keys anywhere are rejected.  ``resolved()`` is the fully expanded
document that gets embedded in output artifacts as provenance.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .cascade import StagePlan
from .encoder import EncoderConfig
from .errors import ConfigError
from .experiment import DEFAULT_MODELS
from .synthetic import SyntheticSpec


@dataclass(frozen=True)
class EvaluationSettings:
    k: int = 5
    models: tuple[str, ...] = DEFAULT_MODELS
    hyperparams: dict = field(default_factory=dict)
    missing_threshold: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"evaluation.k: must be at least 1, got {self.k}")
        if not 0 < self.missing_threshold <= 1:
            raise ConfigError("evaluation.missing_threshold: must lie in (0, 1]")


@dataclass(frozen=True)
class Paths:
    data: str | None = None
    checkpoint: str | None = None
    rows: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    plan: StagePlan = field(default_factory=StagePlan)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    paths: Paths = field(default_factory=Paths)

    def with_seed(self, seed: int) -> RunConfig:
        """Apply one seed to every seeded component."""
        return replace(self, seed=seed, synthetic=replace(self.synthetic, seed=seed),
                       plan=replace(self.plan, seed=seed))

    def resolved(self) -> dict:
        doc = asdict(self)
        doc["synthetic"]["priors"] = list(self.synthetic.priors)
        doc["evaluation"]["models"] = list(self.evaluation.models)
        return doc

    def provenance(self) -> dict:
        return {"tool": "tabcascade", "seed": self.seed, "config": self.resolved()}


def _check_keys(section: str, doc, allowed) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    return doc


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _build(section: str, cls, doc: dict):
    try:
        return cls(**doc)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    _check_keys("config", doc, _names(RunConfig))
    kwargs = {}
    for key in ("seed", "jobs"):
        if key in doc:
            if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                raise ConfigError(f"{key}: expected an integer, got {doc[key]!r}")
            kwargs[key] = doc[key]
    if kwargs.get("jobs", 1) < 1:
        raise ConfigError("jobs: must be at least 1")

    syn = dict(_check_keys("synthetic", doc.get("synthetic", {}), _names(SyntheticSpec)))
    if "priors" in syn:
        syn["priors"] = tuple(syn["priors"])
    spec = _build("synthetic", SyntheticSpec, syn)
    spec.validate()
    kwargs["synthetic"] = spec

    plan_doc = dict(_check_keys("plan", doc.get("plan", {}), _names(StagePlan)))
    for stage in ("stage1", "stage2p", "stage2h"):
        if stage in plan_doc:
            base = getattr(StagePlan(), stage)
            sub = _check_keys(f"plan.{stage}", plan_doc[stage], _names(EncoderConfig))
            plan_doc[stage] = _build(f"plan.{stage}", EncoderConfig, {**asdict(base), **sub})
    kwargs["plan"] = _build("plan", StagePlan, plan_doc)

    ev = dict(_check_keys("evaluation", doc.get("evaluation", {}), _names(EvaluationSettings)))
    if "models" in ev:
        ev["models"] = tuple(ev["models"])
    kwargs["evaluation"] = _build("evaluation", EvaluationSettings, ev)
    kwargs["paths"] = _build("paths", Paths,
                             _check_keys("paths", doc.get("paths", {}), _names(Paths)))
    cfg = RunConfig(**kwargs)
    return cfg.with_seed(cfg.seed) if "seed" in doc else cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(doc)
