"""Temporal frame window, rule-based risk describer and the dynamic reward."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .apparatus import counted
from .embedding import (
    DEFAULT_SPACE,
    RISK_DESCRIPTIONS,
    SIM_TO_LABEL,
    ClgWeights,
    EmbeddingSpace,
    SceneDescriptor,
    clg_score,
)
from .errors import ContractViolation, InvalidInputError
from .gate import DEFAULT_CRITICAL, CriticalClassSet, Detection

K = 3

# detector label -> vocabulary slot name
LABEL_TO_ROLE = {"person": "person", "bicycle": "bicycle", "motorcycle": "motorcycle"}


@dataclass(frozen=True)
class TemporalWindow:
    frames: tuple[tuple[int, SceneDescriptor], ...]

    @property
    def newest(self) -> tuple[int, SceneDescriptor]:
        return self.frames[-1]

    @property
    def steps(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.frames)


class FrameBuffer:
    """Ring buffer of the last K+1 front frames of one trajectory."""

    def __init__(self, k: int = K):
        self.k = k
        self._frames: deque[tuple[int, SceneDescriptor]] = deque(maxlen=k + 1)

    def push(self, step: int, front: SceneDescriptor) -> TemporalWindow:
        if self._frames and step <= self._frames[-1][0]:
            raise ContractViolation(f"frame {step} pushed after frame {self._frames[-1][0]}")
        self._frames.append((step, front))
        return self.window()

    def window(self) -> TemporalWindow:
        if not self._frames:
            raise ContractViolation("window requested from an empty buffer")
        frames = list(self._frames)
        # episode start: repeat the oldest frame until the window is full
        pad = [frames[0]] * (self.k + 1 - len(frames))
        return TemporalWindow(tuple(pad + frames))

    def clear(self) -> None:
        self._frames.clear()


def push_frame(buffer: FrameBuffer, step: int, front: SceneDescriptor) -> TemporalWindow:
    return buffer.push(step, front)


@dataclass(frozen=True)
class RiskVocabulary:
    """Ten canonical risk descriptions, addressed by (class label, kind) slot."""

    entries: tuple[str, ...] = tuple(t for t, _, _ in RISK_DESCRIPTIONS)

    def __post_init__(self):
        if len(self.entries) != len(RISK_DESCRIPTIONS):
            raise InvalidInputError(f"vocabulary needs exactly {len(RISK_DESCRIPTIONS)} entries")
        if len(set(self.entries)) != len(self.entries):
            raise InvalidInputError("vocabulary entries must be distinct")

    def entry(self, label: str | None, kind: str) -> str:
        for text, (_, lab, k) in zip(self.entries, RISK_DESCRIPTIONS):
            if lab == label and k == kind:
                return text
        raise KeyError((label, kind))

    @classmethod
    def from_file(cls, path) -> "RiskVocabulary":
        """One description per line, in the slot order of the default vocabulary."""
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
        return cls(tuple(lines))


DEFAULT_VOCABULARY = RiskVocabulary()


@dataclass(frozen=True)
class DynamicGoal:
    text: str
    source: str  # "vocabulary" | "composed"

    def __post_init__(self):
        if not self.text:
            raise InvalidInputError("dynamic goal text is empty")


def _track(window: TemporalWindow, label: str):
    """Closest hazard of ``label`` in each frame; None where absent."""
    out = []
    for _, frame in window.frames:
        best = None
        for h in frame.hazards:
            if SIM_TO_LABEL.get(h.cls, h.cls) == label and (best is None or h.distance_m < best.distance_m):
                best = h
        out.append(best)
    return out


@counted("describe")
def describe(
    window: TemporalWindow,
    detections: Sequence[Detection],
    vocab: RiskVocabulary = DEFAULT_VOCABULARY,
    critical: CriticalClassSet = DEFAULT_CRITICAL,
) -> DynamicGoal:
    crit = [d for d in detections if d.cls in critical]
    if not crit:
        raise ContractViolation("describe() called without a critical detection")
    target = min(crit, key=lambda d: (d.distance_m, d.cls))
    _, newest = window.newest
    if newest.lane_blocked:
        return DynamicGoal(vocab.entry(None, "blocked"), "vocabulary")
    role = LABEL_TO_ROLE.get(target.cls)
    track = _track(window, target.cls)
    if role is None or track[-1] is None:
        return DynamicGoal(f"a {target.cls} is near the roadway", "composed")
    seen = [h for h in track if h is not None]
    closing = seen[-1].distance_m < seen[0].distance_m
    if closing:
        kind = "crossing" if seen[-1].in_ego_lane else "merging"
    else:
        kind = "receding"
    return DynamicGoal(vocab.entry(role, kind), "vocabulary")


@counted("dynamic_reward")
def dynamic_reward(
    front: SceneDescriptor,
    g: int,
    l_pos_embedding: np.ndarray,
    l_dyn: DynamicGoal | None,
    w: ClgWeights = ClgWeights(),
    space: EmbeddingSpace | None = None,
) -> float:
    if not g:
        return 0.0
    if l_dyn is None:
        raise ContractViolation("gate is open but no dynamic goal was supplied")
    space = space or DEFAULT_SPACE
    v = space.embed_scene(front)
    return clg_score(v, l_pos_embedding, space.embed_text(l_dyn.text), w)
