"""Per-episode logs and the driving metrics computed from them."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

METRIC_NAMES = ("AS", "RC", "TD", "CS", "CR", "ICT", "DCF", "TCF", "SR", "AC")


@dataclass
class EpisodeLog:
    episode: int
    steps: int = 0
    distance_m: float = 0.0
    speed_sum_kmh: float = 0.0
    collisions: int = 0
    collision_speed_sum_kmh: float = 0.0
    collision_steps: list[int] = field(default_factory=list)  # run-global step index of each impact
    routes_completed: int = 0
    reason: str = ""
    success: bool = False
    start_step: int = 0
    route: str = ""

    def record(self, speed_kmh: float, distance_m: float) -> None:
        self.steps += 1
        self.speed_sum_kmh += speed_kmh
        self.distance_m += distance_m

    def to_row(self) -> dict:
        row = asdict(self)
        row["collision_steps"] = " ".join(str(s) for s in self.collision_steps)
        # repr round-trips exactly, so metrics recomputed from the CSV match the live values
        for k in ("distance_m", "speed_sum_kmh", "collision_speed_sum_kmh"):
            row[k] = repr(float(getattr(self, k)))
        return row

    @classmethod
    def from_row(cls, row: dict) -> "EpisodeLog":
        kw = {}
        for f in fields(cls):
            v = row[f.name]
            if f.name == "collision_steps":
                kw[f.name] = [int(x) for x in v.split()] if v else []
            elif f.name == "success":
                kw[f.name] = v in (True, "True", "true", "1")
            elif f.name in ("reason", "route"):
                kw[f.name] = v
            elif f.name in ("distance_m", "speed_sum_kmh", "collision_speed_sum_kmh"):
                kw[f.name] = float(v)
            else:
                kw[f.name] = int(v)
        return cls(**kw)


def logs_to_csv(logs: Sequence[EpisodeLog]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[f.name for f in fields(EpisodeLog)], lineterminator="\n")
    w.writeheader()
    for log in logs:
        w.writerow(log.to_row())
    return buf.getvalue()


def logs_from_csv(text: str) -> list[EpisodeLog]:
    return [EpisodeLog.from_row(r) for r in csv.DictReader(io.StringIO(text))]


@dataclass(frozen=True)
class MetricsRow:
    AS: float
    RC: float
    TD: float
    CS: float
    CR: float
    ICT: float
    DCF: float
    TCF: float
    SR: float
    AC: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def compute_metrics(logs: Sequence[EpisodeLog]) -> MetricsRow:
    if not logs:
        raise InvalidInputError("metrics need at least one episode log")
    steps = sum(l.steps for l in logs)
    dist = sum(l.distance_m for l in logs)
    n_coll = sum(l.collisions for l in logs)
    impacts = sorted(s for l in logs for s in l.collision_steps)
    ict = float(np.mean(np.diff(impacts))) if len(impacts) >= 2 else float(steps)
    return MetricsRow(
        AS=sum(l.speed_sum_kmh for l in logs) / steps if steps else 0.0,
        RC=sum(l.routes_completed for l in logs) / len(logs),
        TD=dist,
        CS=sum(l.collision_speed_sum_kmh for l in logs) / n_coll if n_coll else 0.0,
        CR=sum(1 for l in logs if l.collisions > 0) / len(logs),
        ICT=ict,
        DCF=1000.0 * n_coll / dist if dist > 0 else 0.0,
        TCF=1000.0 * n_coll / steps if steps else 0.0,
        SR=sum(1 for l in logs if l.success) / len(logs),
        AC=n_coll / len(logs),
    )


@dataclass(frozen=True)
class AggregateRow:
    mean: MetricsRow
    std: MetricsRow
    n_seeds: int


def aggregate(rows: Iterable[MetricsRow]) -> AggregateRow:
    rows = list(rows)
    if not rows:
        raise InvalidInputError("nothing to aggregate")
    arr = np.array([[getattr(r, m) for m in METRIC_NAMES] for r in rows])
    mean = MetricsRow(*arr.mean(axis=0))
    std = MetricsRow(*arr.std(axis=0))
    return AggregateRow(mean, std, len(rows))


def format_value(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6g}"
