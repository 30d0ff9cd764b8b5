"""Run configuration: a YAML file with one section per component."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigurationError
from .gate import DetectorConfig
from .learner import SacConfig
from .pipeline import PipelineConfig
from .synthesis import SynthesisConfig
from .world import WorldConfig

EXPERIMENTS = ("main", "no_penalty", "static_only", "gating_efficiency", "eval")


@dataclass
class EvalConfig:
    routes_path: str | None = None  # None: the shipped route fixture
    max_steps: int = 3000
    during_training: bool = False  # evaluate the 10 routes at every checkpoint
    stop_at_sr: float | None = None  # end training early once a checkpoint reaches this SR
    checkpoint: str | None = None  # parameters to load for the eval experiment

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigurationError("eval.max_steps must be positive")


@dataclass
class RunConfig:
    experiment: str = "main"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    total_steps: int = 200_000
    output_dir: str = "runs/out"
    world: WorldConfig = field(default_factory=WorldConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    vocabulary: str | None = None  # path to a one-description-per-line file
    critical_classes: list[str] | None = None
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    learner: SacConfig = field(default_factory=SacConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"experiment must be one of {EXPERIMENTS}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be non-negative")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
        sections = {
            "world": WorldConfig.from_dict,
            "detector": lambda s: _plain(DetectorConfig, s, "detector"),
            "synthesis": SynthesisConfig.from_dict,
            "pipeline": PipelineConfig.from_dict,
            "learner": SacConfig.from_dict,
            "eval": lambda s: _plain(EvalConfig, s, "eval"),
        }
        for key, build in sections.items():
            if key in d:
                d[key] = build(d[key] or {})
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seeds": list(self.seeds),
            "total_steps": self.total_steps,
            "output_dir": self.output_dir,
            "world": self.world.to_dict(),
            "detector": {f.name: getattr(self.detector, f.name) for f in fields(self.detector)},
            "vocabulary": self.vocabulary,
            "critical_classes": self.critical_classes,
            "synthesis": self.synthesis.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "learner": self.learner.to_dict(),
            "eval": {f.name: getattr(self.eval, f.name) for f in fields(self.eval)},
        }

    def dump(self) -> str:
        """Resolved configuration as YAML with a stable key order."""
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)


def _plain(cls, section: Mapping, name: str):
    unknown = set(section) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown {name} options: {sorted(unknown)}")
    return cls(**section)


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("configuration root must be a mapping")
    return RunConfig.from_dict(data)
