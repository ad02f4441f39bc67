"""Experiment configuration: every hyperparameter in one JSON-serialisable object."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from need.corpus import SynthConfig
from need.dri import DriConfig, DriHyper
from need.errors import ConfigError
from need.graph import TrainHyper


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    k_folds: int = 5
    threshold: float = 0.5
    include_debunking_nodes: bool = True
    fractions: tuple = (0.25, 0.5, 0.75, 1.0)
    temporal_ratios: tuple = (0.70, 0.15, 0.15)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ga: TrainHyper = field(default_factory=TrainHyper)
    baseline: TrainHyper = field(default_factory=TrainHyper)
    dri: DriHyper = field(default_factory=DriHyper)

    def validate(self) -> "ExperimentConfig":
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if not self.fractions or any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")
        self.synth.validate()
        self.ga.validate()
        self.baseline.validate()
        self.dri.validate()
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fractions"] = list(self.fractions)
        out["temporal_ratios"] = list(self.temporal_ratios)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw = {}
        if "synth" in obj:
            kw["synth"] = _build(SynthConfig, obj.pop("synth"), "synth")
        for name in ("ga", "baseline"):
            if name in obj:
                kw[name] = _build(TrainHyper, obj.pop(name), name)
        if "dri" in obj:
            dri = dict(obj.pop("dri"))
            model = _build(DriConfig, dri.pop("model", {}), "dri.model")
            kw["dri"] = _build(DriHyper, {**dri, "model": model}, "dri")
        for name in ("fractions", "temporal_ratios"):
            if name in obj:
                obj[name] = tuple(obj[name])
        try:
            return cls(**obj, **kw).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)
