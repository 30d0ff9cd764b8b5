"""Synthetic joint text/scene embedding space and the static CLG reward.

The space is built from orthonormal concept anchors so that every cosine
similarity the reward code produces can be evaluated by hand:

    axis 0        positive goal ("the road is clear ...")
    axis 1        negative goal ("two cars have collided ...")
    axes 2..12    the eleven safety-critical object classes
    axis 13       car (non-critical traffic)
    axis 14       motion / intent axis used by the risk-description anchors
    axis 15       lane-blockage axis, also the neutral fallback direction

Free-form text that is not a canonical entry is hashed token by token onto
the axes (FNV-1a, sign taken from the bits above the axis index).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .apparatus import counted
from .errors import InvalidInputError

DIM = 16

POSITIVE_GOAL = "the road is clear with no car accidents"
NEGATIVE_GOAL = "two cars have collided with each other on the road"

CRITICAL_CLASSES = (
    "person",
    "bicycle",
    "motorcycle",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
)

# simulator agent class -> detector label
SIM_TO_LABEL = {
    "pedestrian": "person",
    "bicycle": "bicycle",
    "motorcycle": "motorcycle",
    "vehicle": "car",
}

CLEAR_THRESHOLD_M = 25.0

MOTION_AXIS = 14
LANE_AXIS = 15

# (text, class label or None, kind). The kind sets how strongly the entry
# leans on its class axis versus the motion/lane axes.
RISK_DESCRIPTIONS: tuple[tuple[str, str | None, str], ...] = (
    ("a pedestrian is crossing the road ahead", "person", "crossing"),
    ("a pedestrian is stepping toward the ego lane", "person", "merging"),
    ("a pedestrian is walking away from the road", "person", "receding"),
    ("a cyclist is riding in the ego lane ahead", "bicycle", "crossing"),
    ("a cyclist is merging into the ego lane", "bicycle", "merging"),
    ("a cyclist is riding away from the ego vehicle", "bicycle", "receding"),
    ("a motorcyclist is cutting in ahead", "motorcycle", "crossing"),
    ("a motorcyclist is merging into the ego lane", "motorcycle", "merging"),
    ("a motorcyclist is pulling away ahead", "motorcycle", "receding"),
    ("the ego lane is blocked ahead", None, "blocked"),
)

# weight on the class axis; the remainder goes to the motion axis
KIND_CLASS_WEIGHT = {"crossing": 0.95, "merging": 0.8, "receding": 0.4}


class View(str, Enum):
    BEV = "BEV"
    FRONT = "Front"


@dataclass(frozen=True, slots=True)
class Hazard:
    cls: str
    distance_m: float
    closing_speed_mps: float = 0.0
    in_ego_lane: bool = False
    bearing_rad: float = 0.0

    def __post_init__(self):
        if self.distance_m < 0:
            raise InvalidInputError(f"negative hazard distance {self.distance_m}")


@dataclass(frozen=True, slots=True)
class SceneDescriptor:
    """Symbolic summary of what one camera or BEV frame shows."""

    view: View
    road_clear: bool
    collision_present: bool = False
    hazards: tuple[Hazard, ...] = ()
    lane_blocked: bool = False

    def __post_init__(self):
        if self.road_clear:
            for h in self.hazards:
                if h.in_ego_lane and h.distance_m < CLEAR_THRESHOLD_M:
                    raise InvalidInputError(
                        "road_clear scene carries an in-lane hazard inside the clear threshold"
                    )


@dataclass(frozen=True)
class ClgWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise InvalidInputError("CLG weights must lie in (0, 1)")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise InvalidInputError("CLG weights must sum to 1")


def _unit(i: int, dim: int = DIM) -> np.ndarray:
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def normalize_text(text: str) -> str:
    return " ".join(text.lower().strip().rstrip(".").split())


def fnv1a_32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def default_anchor_table(dim: int = DIM) -> dict[str, np.ndarray]:
    """Named concept anchors: goals, object classes, risk descriptions."""
    if dim < DIM:
        raise InvalidInputError(f"anchor table needs at least {DIM} dimensions")
    table = {
        POSITIVE_GOAL: _unit(0, dim),
        NEGATIVE_GOAL: _unit(1, dim),
    }
    for i, label in enumerate(CRITICAL_CLASSES):
        table[label] = _unit(2 + i, dim)
    table["car"] = _unit(13, dim)
    for text, label, kind in RISK_DESCRIPTIONS:
        if kind == "blocked":
            v = 0.7 * _unit(13, dim) + 0.7 * _unit(LANE_AXIS, dim)
        else:
            w = KIND_CLASS_WEIGHT[kind]
            v = w * table[label] + math.sqrt(1.0 - w * w) * _unit(MOTION_AXIS, dim)
        table[text] = v / np.linalg.norm(v)
    return table


@dataclass
class EmbeddingSpace:
    """Deterministic stand-in for a frozen image/text encoder pair."""

    dim: int = DIM
    w_clear: float = 1.0
    w_crash: float = 1.5
    w_hazard: float = 0.8
    lambda_dist: float = 15.0
    anchors: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.anchors:
            self.anchors = default_anchor_table(self.dim)
        self.anchors = {normalize_text(k): np.asarray(v, dtype=float) for k, v in self.anchors.items()}
        for k, v in self.anchors.items():
            if v.shape != (self.dim,):
                raise InvalidInputError(f"anchor {k!r} has shape {v.shape}, expected ({self.dim},)")
        self._pos = self.anchors[normalize_text(POSITIVE_GOAL)]
        self._neg = self.anchors[normalize_text(NEGATIVE_GOAL)]
        self._hashed: dict[str, np.ndarray] = {}

    def class_anchor(self, cls: str) -> np.ndarray:
        label = SIM_TO_LABEL.get(cls, cls)
        try:
            return self.anchors[label]
        except KeyError:
            # unknown object classes fall back to their hashed name
            return self._hash_text(label)

    def _hash_text(self, text: str) -> np.ndarray:
        cached = self._hashed.get(text)
        if cached is None:
            cached = self._hashed[text] = self._hash_uncached(text)
        return cached.copy()

    def _hash_uncached(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in text.split():
            h = fnv1a_32(tok.encode("utf-8"))
            sign = 1.0 if (h // self.dim) % 2 == 0 else -1.0
            v[h % self.dim] += sign
        n = np.linalg.norm(v)
        if n == 0.0:
            return _unit(fnv1a_32(text.encode("utf-8")) % self.dim, self.dim)
        return v / n

    def embed_text(self, goal: str) -> np.ndarray:
        if not isinstance(goal, str) or not goal.strip():
            raise InvalidInputError("goal text must be non-empty")
        key = normalize_text(goal)
        anchor = self.anchors.get(key)
        if anchor is not None:
            return anchor.copy()
        return self._hash_text(key)

    def embed_scene(self, scene: SceneDescriptor) -> np.ndarray:
        v = np.zeros(self.dim)
        if scene.road_clear:
            v += self.w_clear * self._pos
        if scene.collision_present:
            v += self.w_crash * self._neg
        for h in scene.hazards:
            v += self.w_hazard * math.exp(-h.distance_m / self.lambda_dist) * self.class_anchor(h.cls)
        n = math.sqrt(float(v @ v))
        if n == 0.0:
            return _unit(LANE_AXIS, self.dim)
        return v / n

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name"] + [f"v{i}" for i in range(self.dim)])
        for name, vec in self.anchors.items():
            w.writerow([name] + [repr(float(x)) for x in vec])
        return buf.getvalue()

    @classmethod
    def from_config(cls, section: Mapping | None) -> "EmbeddingSpace":
        section = dict(section or {})
        anchors = section.pop("anchors", None)
        space = cls(**section)
        if anchors:
            merged = dict(space.anchors)
            for k, v in anchors.items():
                merged[normalize_text(k)] = np.asarray(v, dtype=float)
            space = cls(**section, anchors=merged)
        return space


DEFAULT_SPACE = EmbeddingSpace()


@dataclass(frozen=True)
class ContrastingLanguageGoal:
    positive: str
    negative: str
    positive_embedding: np.ndarray
    negative_embedding: np.ndarray

    @classmethod
    def from_texts(
        cls,
        positive: str = POSITIVE_GOAL,
        negative: str = NEGATIVE_GOAL,
        space: EmbeddingSpace | None = None,
    ) -> "ContrastingLanguageGoal":
        if normalize_text(positive) == normalize_text(negative):
            raise InvalidInputError("positive and negative goals must differ")
        space = space or DEFAULT_SPACE
        return cls(positive, negative, space.embed_text(positive), space.embed_text(negative))


@counted("embed_text")
def embed_text(goal: str, space: EmbeddingSpace | None = None) -> np.ndarray:
    return (space or DEFAULT_SPACE).embed_text(goal)


@counted("embed_scene")
def embed_scene(scene: SceneDescriptor, space: EmbeddingSpace | None = None) -> np.ndarray:
    return (space or DEFAULT_SPACE).embed_scene(scene)


def cosine_sim(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine similarity of a zero vector")
    s = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, s))


def clg_score(v: np.ndarray, positive: np.ndarray, negative: np.ndarray, w: ClgWeights) -> float:
    """alpha * sim(v, positive) - beta * sim(v, negative)."""
    return w.alpha * cosine_sim(v, positive) - w.beta * cosine_sim(v, negative)


@counted("static_reward")
def static_reward(
    bev: SceneDescriptor,
    clg: ContrastingLanguageGoal,
    w: ClgWeights = ClgWeights(),
    space: EmbeddingSpace | None = None,
) -> float:
    if bev.view is not View.BEV:
        raise InvalidInputError("static reward is defined on BEV descriptors only")
    v = (space or DEFAULT_SPACE).embed_scene(bev)
    return clg_score(v, clg.positive_embedding, clg.negative_embedding, w)


def anchors_csv(space: EmbeddingSpace | None = None) -> str:
    return (space or DEFAULT_SPACE).to_csv()


def random_scene(rng: np.random.Generator, view: View = View.BEV, max_hazards: int = 6) -> SceneDescriptor:
    """Draw an arbitrary valid descriptor; used by property tests and sweeps."""
    classes = list(SIM_TO_LABEL) + list(CRITICAL_CLASSES)
    n = int(rng.integers(0, max_hazards + 1))
    # one block per scene: class, distance, lane, bearing, then three scene-level draws
    u = rng.random(4 * n + 3)
    closing = rng.normal(0.0, 5.0, n)
    hazards = [
        Hazard(
            classes[int(u[4 * i] * len(classes))],
            60.0 * float(u[4 * i + 1]),
            float(closing[i]),
            bool(u[4 * i + 2] < 0.5),
            math.pi * (2.0 * float(u[4 * i + 3]) - 1.0),
        )
        for i in range(n)
    ]
    blocking = any(h.in_ego_lane and h.distance_m < CLEAR_THRESHOLD_M for h in hazards)
    return SceneDescriptor(
        view=view,
        road_clear=(not blocking) and bool(u[-3] < 0.7),
        collision_present=bool(u[-2] < 0.1),
        hazards=tuple(hazards),
        lane_blocked=bool(blocking and u[-1] < 0.3),
    )
