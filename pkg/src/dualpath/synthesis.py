"""Hierarchical reward synthesis: fusion, normalisation, shaping, penalty override."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

from .apparatus import counted
from .embedding import (
    DEFAULT_SPACE,
    ClgWeights,
    ContrastingLanguageGoal,
    EmbeddingSpace,
    SceneDescriptor,
    static_reward,
)
from .errors import ConfigurationError, InvalidInputError
from .gate import DEFAULT_CRITICAL, CriticalClassSet, Detection, gate
from .reasoner import DEFAULT_VOCABULARY, RiskVocabulary, TemporalWindow, describe, dynamic_reward
from .world import StepEvents, WorldConfig

STANDARD = "standard"
NO_PENALTY = "no_penalty"


@dataclass(frozen=True)
class NormalizationBounds:
    theta_min: float = -0.1
    theta_max: float = 0.2

    def __post_init__(self):
        if not self.theta_min < self.theta_max:
            raise ConfigurationError("theta_min must be below theta_max")


@dataclass(frozen=True)
class ShapingInputs:
    v_actual: float  # km/h
    v_max: float  # km/h
    lateral_deviation: float = 0.0
    lane_half_width: float = 2.0
    heading_error: float = 0.0
    lateral_velocity: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.v_actual <= self.v_max + 1e-9:
            raise InvalidInputError(f"v_actual {self.v_actual} outside [0, {self.v_max}]")


@dataclass(frozen=True)
class ShapingConfig:
    w_lat: float = 2.0  # m/s of lateral velocity that zeroes the stability factor


@dataclass(frozen=True)
class ShapingFactors:
    f_speed: float
    f_center: float
    f_angle: float
    f_stability: float


@dataclass(frozen=True)
class RewardBreakdown:
    r_static: float
    g: int
    l_dyn_text: str | None
    r_dynamic: float
    r_combined: float
    r_norm: float
    f_speed: float
    f_center: float
    f_angle: float
    f_stability: float
    r_shaping: float
    r_final: float

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class SynthesisConfig:
    weights: ClgWeights = field(default_factory=ClgWeights)
    bounds: NormalizationBounds = field(default_factory=NormalizationBounds)
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    penalty: float = -10.0
    mode: str = STANDARD
    dynamic_enabled: bool = True

    def __post_init__(self):
        if self.penalty > 0:
            raise ConfigurationError("collision penalty must be non-positive")
        if self.mode not in (STANDARD, NO_PENALTY):
            raise ConfigurationError(f"unknown reward mode {self.mode!r}")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "SynthesisConfig":
        d = dict(d or {})
        kw = {}
        if "alpha" in d or "beta" in d:
            kw["weights"] = ClgWeights(d.pop("alpha", 0.5), d.pop("beta", 0.5))
        if "theta_min" in d or "theta_max" in d:
            kw["bounds"] = NormalizationBounds(d.pop("theta_min", -0.1), d.pop("theta_max", 0.2))
        if "w_lat" in d:
            kw["shaping"] = ShapingConfig(d.pop("w_lat"))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown synthesis options: {sorted(unknown)}")
        return cls(**kw, **d)

    def to_dict(self) -> dict:
        return {
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
            "theta_min": self.bounds.theta_min,
            "theta_max": self.bounds.theta_max,
            "w_lat": self.shaping.w_lat,
            "penalty": self.penalty,
            "mode": self.mode,
            "dynamic_enabled": self.dynamic_enabled,
        }


def combine(r_static: float, r_dynamic: float) -> float:
    return r_static + r_dynamic


def normalize(r_combined: float, b: NormalizationBounds = NormalizationBounds()) -> float:
    c = min(max(r_combined, b.theta_min), b.theta_max)
    return (c - b.theta_min) / (b.theta_max - b.theta_min)


def shaping(r_norm: float, s: ShapingInputs, cfg: ShapingConfig = ShapingConfig()) -> tuple[ShapingFactors, float]:
    if not 0.0 <= r_norm <= 1.0:
        raise InvalidInputError(f"r_norm {r_norm} outside [0, 1]")
    v_desired = r_norm * s.v_max
    f_speed = max(0.0, 1.0 - abs(s.v_actual - v_desired) / s.v_max)
    f_center = max(0.0, 1.0 - abs(s.lateral_deviation) / s.lane_half_width)
    f_angle = max(0.0, 1.0 - abs(s.heading_error) / (math.pi / 2))
    f_stability = max(0.0, 1.0 - abs(s.lateral_velocity) / cfg.w_lat)
    factors = ShapingFactors(f_speed, f_center, f_angle, f_stability)
    return factors, f_speed * f_center * f_angle * f_stability


def final_reward(r_shaping: float, events: StepEvents, penalty: float = -10.0, mode: str = STANDARD) -> float:
    if penalty > 0:
        raise ConfigurationError("collision penalty must be non-positive")
    if mode == NO_PENALTY:
        return r_shaping
    if mode != STANDARD:
        raise ConfigurationError(f"unknown reward mode {mode!r}")
    return penalty if events.collision else r_shaping


class Synthesizer:
    """Bundles the fixed reward apparatus: goal pair, space, vocabulary, detector."""

    def __init__(
        self,
        cfg: SynthesisConfig | None = None,
        detector: Callable[[SceneDescriptor], list[Detection]] | None = None,
        space: EmbeddingSpace | None = None,
        vocab: RiskVocabulary = DEFAULT_VOCABULARY,
        critical: CriticalClassSet = DEFAULT_CRITICAL,
        clg: ContrastingLanguageGoal | None = None,
        world_config: WorldConfig | None = None,
    ):
        self.cfg = cfg or SynthesisConfig()
        self.space = space or DEFAULT_SPACE
        self.clg = clg or ContrastingLanguageGoal.from_texts(space=self.space)
        self.detector = detector
        self.vocab = vocab
        self.critical = critical
        self.describer_calls = 0
        self.world_config = world_config or WorldConfig()

    def __call__(self, bev, front, window, ego: ShapingInputs, events: StepEvents) -> RewardBreakdown:
        detections = []
        if self.cfg.dynamic_enabled and self.detector is not None:
            detections = self.detector(front)
        return synthesize(bev, front, detections, window, ego, events, self.cfg, self)


@counted("synthesize")
def synthesize(
    bev: SceneDescriptor,
    front: SceneDescriptor,
    detections: Sequence[Detection],
    window: TemporalWindow | None,
    ego: ShapingInputs,
    events: StepEvents,
    cfg: SynthesisConfig = SynthesisConfig(),
    apparatus: Synthesizer | None = None,
) -> RewardBreakdown:
    space = apparatus.space if apparatus else DEFAULT_SPACE
    clg = apparatus.clg if apparatus else ContrastingLanguageGoal.from_texts(space=space)
    vocab = apparatus.vocab if apparatus else DEFAULT_VOCABULARY
    critical = apparatus.critical if apparatus else DEFAULT_CRITICAL
    w = cfg.weights

    r_static = static_reward(bev, clg, w, space)
    g = gate(detections, critical) if cfg.dynamic_enabled else 0
    l_dyn = None
    if g:
        if window is None:
            raise InvalidInputError("an open gate needs a temporal window")
        l_dyn = describe(window, detections, vocab, critical)
        if apparatus is not None:
            apparatus.describer_calls += 1
    r_dynamic = dynamic_reward(front, g, clg.positive_embedding, l_dyn, w, space)
    r_combined = combine(r_static, r_dynamic)
    r_norm = normalize(r_combined, cfg.bounds)
    factors, r_shape = shaping(r_norm, ego, cfg.shaping)
    r_final = final_reward(r_shape, events, cfg.penalty, cfg.mode)
    return RewardBreakdown(
        r_static=r_static,
        g=g,
        l_dyn_text=l_dyn.text if l_dyn else None,
        r_dynamic=r_dynamic,
        r_combined=r_combined,
        r_norm=r_norm,
        f_speed=factors.f_speed,
        f_center=factors.f_center,
        f_angle=factors.f_angle,
        f_stability=factors.f_stability,
        r_shaping=r_shape,
        r_final=r_final,
    )


def shaping_inputs(vehicle, v_max_kmh: float, lane_half_width: float) -> ShapingInputs:
    """Build shaping inputs from a world ``VehicleState``."""
    return ShapingInputs(
        v_actual=min(max(vehicle.speed_kmh, 0.0), v_max_kmh),
        v_max=v_max_kmh,
        lateral_deviation=vehicle.lateral_deviation_m,
        lane_half_width=lane_half_width,
        heading_error=vehicle.heading_error_rad,
        lateral_velocity=vehicle.lateral_velocity_mps,
    )
