"""Noisy detector stand-in and the binary attentional gate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .apparatus import counted
from .embedding import CRITICAL_CLASSES, SIM_TO_LABEL, SceneDescriptor, View
from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True, slots=True)
class Detection:
    cls: str
    confidence: float
    distance_m: float
    is_critical: bool


@dataclass(frozen=True)
class CriticalClassSet:
    classes: frozenset[str] = frozenset(CRITICAL_CLASSES)

    def __post_init__(self):
        if not self.classes:
            raise ConfigurationError("critical class set must not be empty")
        object.__setattr__(self, "classes", frozenset(self.classes))

    def __contains__(self, label: str) -> bool:
        return label in self.classes

    @classmethod
    def parse(cls, text: str) -> "CriticalClassSet":
        return cls(frozenset(x.strip() for x in text.split(",") if x.strip()))


DEFAULT_CRITICAL = CriticalClassSet()


@dataclass
class DetectorConfig:
    recall: float = 0.95
    false_positive_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ConfigurationError(f"recall {self.recall} outside [0, 1]")
        if self.false_positive_rate < 0:
            raise ConfigurationError("false_positive_rate must be non-negative")


class Detector:
    """Per-worker detector with its own seeded generator."""

    def __init__(self, cfg: DetectorConfig | None = None, critical: CriticalClassSet = DEFAULT_CRITICAL,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg or DetectorConfig()
        self.critical = critical
        self.rng = rng if rng is not None else np.random.default_rng(self.cfg.seed)

    def __call__(self, front: SceneDescriptor) -> list[Detection]:
        return detect(front, self.cfg, self.rng, self.critical)


@counted("detect")
def detect(
    front: SceneDescriptor,
    cfg: DetectorConfig,
    rng: np.random.Generator,
    critical: CriticalClassSet = DEFAULT_CRITICAL,
) -> list[Detection]:
    """Emit each true hazard with probability ``recall``; add Poisson false positives."""
    if front.view is not View.FRONT:
        raise InvalidInputError("detector runs on front-view descriptors only")
    out = []
    if front.hazards:
        hits = rng.random(len(front.hazards)) < cfg.recall
        conf = rng.uniform(0.5, 1.0, len(front.hazards))
        for h, hit, c in zip(front.hazards, hits, conf):
            if hit:
                label = SIM_TO_LABEL.get(h.cls, h.cls)
                out.append(Detection(label, float(c), h.distance_m, label in critical))
    if cfg.false_positive_rate > 0:
        labels = sorted(critical.classes)
        for _ in range(int(rng.poisson(cfg.false_positive_rate))):
            label = labels[int(rng.integers(len(labels)))]
            out.append(Detection(label, float(rng.uniform(0.3, 0.6)), float(rng.uniform(5.0, 40.0)), True))
    return out


def gate(detections: Iterable[Detection], critical: CriticalClassSet = DEFAULT_CRITICAL) -> int:
    return int(any(d.cls in critical for d in detections))


def gate_rate(trace: Sequence[int]) -> float:
    if len(trace) == 0:
        raise InvalidInputError("gate rate of an empty trace")
    return float(np.mean(np.asarray(trace, dtype=float)))


def expected_cost(p: float, t_det: float, t_lvlm: float) -> float:
    """Expected per-frame reward-computation time of the gated pathway."""
    return t_det + p * t_lvlm


def savings(p: float, t_det: float, t_lvlm: float) -> float:
    """Fractional saving of gated over always-on description."""
    return (t_lvlm - expected_cost(p, t_det, t_lvlm)) / t_lvlm
