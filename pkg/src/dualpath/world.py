"""2D driving micro-simulator.

The road is a single-lane corridor built from straight pieces and 90 degree
arcs, sampled every metre and extended lazily as the ego drives. Traffic
agents live in road (Frenet) coordinates ``(s, d)``; the ego is integrated
in Cartesian coordinates with a kinematic bicycle model and projected back
onto the road every step.

``step`` mutates the state it is given and returns it, which keeps long
training runs cheap. Use ``WorldState.fingerprint`` to compare states.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .embedding import CLEAR_THRESHOLD_M, Hazard, SceneDescriptor, View
from .errors import ConfigurationError, ContractViolation, InvalidInputError

KMH = 1.0 / 3.6

CLASS_NAMES = ("vehicle", "pedestrian", "motorcycle", "bicycle")
VEHICLE, PEDESTRIAN, MOTORCYCLE, BICYCLE = range(4)

N_WAYPOINTS = 15
WAYPOINT_SPACING_M = 2.0
ROAD_DS = 1.0
LEAD_IN_M = 80.0


@dataclass
class WorldConfig:
    n_vehicles: int = 20
    n_pedestrians: int = 20
    n_motorcycles: int = 20
    n_bicycles: int = 20
    v_max_kmh: float = 30.0
    dt: float = 0.1
    wheelbase_m: float = 2.5
    max_steer_rad: float = 0.5
    max_accel: float = 3.0
    max_brake: float = 6.0
    rolling_decel: float = 0.3
    lane_half_width_m: float = 2.0
    ego_radius_m: float = 1.0
    vehicle_radius_m: float = 1.0
    motorcycle_radius_m: float = 0.6
    bicycle_radius_m: float = 0.6
    pedestrian_radius_m: float = 0.35
    episode_distance_m: float = 3000.0
    route_length_m: tuple[float, float] = (150.0, 300.0)
    traffic_behind_m: float = 60.0
    traffic_ahead_m: float = 1000.0
    spawn_clearance_m: float = 20.0
    pedestrian_crossing_rate_hz: float = 1.0 / 30.0
    motorcycle_cutin_rate_hz: float = 1.0 / 10.0
    stuck_speed_kmh: float = 1.0
    stuck_time_s: float = 90.0
    max_lateral_deviation_m: float = 3.0
    bev_half_extent_m: float = 32.0
    front_range_m: float = 40.0
    front_half_angle_rad: float = math.pi / 4
    stop_at_destination: bool = False
    max_spawn_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        self.route_length_m = tuple(self.route_length_m)
        for name in ("n_vehicles", "n_pedestrians", "n_motorcycles", "n_bicycles"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.v_max_kmh <= 0 or self.dt <= 0:
            raise ConfigurationError("v_max_kmh and dt must be positive")
        if self.lane_half_width_m <= 0:
            raise ConfigurationError("lane_half_width_m must be positive")
        lo, hi = self.route_length_m
        if not 0 < lo <= hi:
            raise ConfigurationError("route_length_m must be an increasing positive pair")

    @property
    def v_max(self) -> float:
        return self.v_max_kmh * KMH

    @property
    def stuck_steps(self) -> int:
        return int(round(self.stuck_time_s / self.dt))

    def radius(self, cls: int) -> float:
        return (
            self.vehicle_radius_m,
            self.pedestrian_radius_m,
            self.motorcycle_radius_m,
            self.bicycle_radius_m,
        )[cls]

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "WorldConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown world options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["route_length_m"] = list(self.route_length_m)
        return out


# ---------------------------------------------------------------- road


Segment = tuple[str, float]  # ("straight", length) | ("left"/"right", radius)


def random_segments(rng: np.random.Generator, length_m: float) -> list[Segment]:
    """Straights and 90 degree turns (junction corners) adding up to ``length_m`` or more."""
    segs: list[Segment] = []
    total = 0.0
    last_turn = True
    while total < length_m:
        if last_turn or rng.random() < 0.6:
            seg = ("straight", float(round(rng.uniform(20.0, 80.0), 1)))
            total += seg[1]
            last_turn = False
        else:
            side = "left" if rng.random() < 0.5 else "right"
            r = float(round(rng.uniform(12.0, 25.0), 1))
            seg = (side, r)
            total += 0.5 * math.pi * r
            last_turn = True
        segs.append(seg)
    return segs


def segments_length(segs: Sequence[Segment]) -> float:
    return sum(v if k == "straight" else 0.5 * math.pi * v for k, v in segs)


class Road:
    """Centerline polyline sampled every ``ROAD_DS`` metres of arc length."""

    def __init__(self, x0: float = 0.0, y0: float = 0.0, heading0: float = 0.0, s0: float = -LEAD_IN_M):
        self.s0 = s0
        self.x = [x0 + s0 * math.cos(heading0)]
        self.y = [y0 + s0 * math.sin(heading0)]
        self.h = [heading0]
        # geometric end of the road and arc length past the last sample
        self._end = (self.x[0], self.y[0], heading0)
        self._carry = 0.0
        self._xa = self._ya = self._ha = None
        self.extend([("straight", -s0)])

    @property
    def length(self) -> float:
        return (len(self.x) - 1) * ROAD_DS

    @property
    def s_end(self) -> float:
        return self.s0 + self.length

    @staticmethod
    def _advance(x, y, h, p, curv):
        if curv == 0.0:
            return x + p * math.cos(h), y + p * math.sin(h), h
        dh = p * curv
        return (
            x + (math.sin(h + dh) - math.sin(h)) / curv,
            y + (math.cos(h) - math.cos(h + dh)) / curv,
            h + dh,
        )

    def extend(self, segs: Sequence[Segment]) -> None:
        for kind, val in segs:
            if kind == "straight":
                arc, curv = float(val), 0.0
            elif kind in ("left", "right"):
                arc = 0.5 * math.pi * val
                curv = (1.0 if kind == "left" else -1.0) / val
            else:
                raise InvalidInputError(f"unknown segment kind {kind!r}")
            x, y, h = self._end
            p = ROAD_DS - self._carry
            while p <= arc + 1e-9:
                px, py, ph = self._advance(x, y, h, p, curv)
                self.x.append(px)
                self.y.append(py)
                self.h.append(ph)
                p += ROAD_DS
            self._carry = arc - (p - ROAD_DS)
            self._end = self._advance(x, y, h, arc, curv)
        self._xa = np.asarray(self.x)
        self._ya = np.asarray(self.y)
        self._ha = np.asarray(self.h)

    def pose(self, s, d=0.0):
        """Cartesian position and road heading at arc length ``s``, lateral offset ``d``."""
        s = np.asarray(s, dtype=float)
        u = np.clip((s - self.s0) / ROAD_DS, 0.0, len(self._xa) - 1.000001)
        i = u.astype(int)
        f = u - i
        x = self._xa[i] + f * (self._xa[i + 1] - self._xa[i])
        y = self._ya[i] + f * (self._ya[i + 1] - self._ya[i])
        h = self._ha[i] + f * (self._ha[i + 1] - self._ha[i])
        return x - d * np.sin(h), y + d * np.cos(h), h

    def project(self, x: float, y: float, hint: int) -> tuple[float, float, float, int]:
        """Nearest-centreline projection searched around index ``hint``.

        Returns ``(s, d, road_heading, index)`` with ``d`` positive to the left.
        """
        lo = max(0, hint - 8)
        hi = min(len(self._xa) - 1, hint + 24)
        dx = self._xa[lo : hi + 1] - x
        dy = self._ya[lo : hi + 1] - y
        i = lo + int(np.argmin(dx * dx + dy * dy))
        j = min(i, len(self._xa) - 2)
        ax, ay = self._xa[j], self._ya[j]
        bx, by = self._xa[j + 1], self._ya[j + 1]
        ex, ey = bx - ax, by - ay
        seg2 = ex * ex + ey * ey
        t = ((x - ax) * ex + (y - ay) * ey) / seg2
        if t < 0.0 and j > 0:
            j -= 1
            ax, ay = self._xa[j], self._ya[j]
            ex, ey = self._xa[j + 1] - ax, self._ya[j + 1] - ay
            seg2 = ex * ex + ey * ey
            t = ((x - ax) * ex + (y - ay) * ey) / seg2
        t = min(max(t, 0.0), 1.0)
        px, py = ax + t * ex, ay + t * ey
        norm = math.sqrt(seg2)
        d = (ex * (y - py) - ey * (x - px)) / norm
        s = self.s0 + (j + t) * ROAD_DS
        h = self.h[j] + t * (self.h[j + 1] - self.h[j])
        return s, d, h, i


# ---------------------------------------------------------------- state


class TerminationReason(str, Enum):
    COLLISION = "collision"
    STUCK = "stuck"
    OFF_LANE = "off_lane"
    DISTANCE = "distance"
    DESTINATION = "destination"


@dataclass(frozen=True)
class TerminationStatus:
    terminal: bool
    reason: TerminationReason | None = None

    @property
    def is_failure(self) -> bool:
        return self.reason in (TerminationReason.COLLISION, TerminationReason.STUCK, TerminationReason.OFF_LANE)


RUNNING = TerminationStatus(False)


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    throttle_brake: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", float(min(1.0, max(-1.0, self.steer))))
        object.__setattr__(self, "throttle_brake", float(min(1.0, max(-1.0, self.throttle_brake))))

    @classmethod
    def from_array(cls, a) -> "Action":
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class StepEvents:
    collision: bool = False
    collision_speed_kmh: float = 0.0
    stuck: bool = False
    off_lane: bool = False
    route_completed_increment: int = 0


@dataclass(frozen=True)
class VehicleState:
    speed_kmh: float
    lateral_deviation_m: float
    heading_error_rad: float
    lateral_velocity_mps: float


@dataclass(frozen=True)
class Observation:
    bev: SceneDescriptor
    front: SceneDescriptor
    ego_state: tuple[float, float, float]  # steer, throttle_brake, speed km/h
    waypoints: np.ndarray  # (15, 2) ego frame, x forward, y left
    vehicle: VehicleState
    step: int


@dataclass
class EgoState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0  # m/s
    steer: float = 0.0
    throttle_brake: float = 0.0

    @property
    def speed_kmh(self) -> float:
        return self.speed / KMH


@dataclass
class TrafficAgent:
    cls: str
    x: float
    y: float
    heading: float
    speed: float
    behavior: str


@dataclass
class Traffic:
    """Struct-of-arrays view of every scripted agent."""

    cls: np.ndarray
    s: np.ndarray
    d: np.ndarray
    v: np.ndarray  # longitudinal speed along the road, m/s
    v_lat: np.ndarray
    cruise: np.ndarray
    home_d: np.ndarray
    target_d: np.ndarray
    mode: np.ndarray  # 0 cruising, 1 crossing / cutting in
    hold: np.ndarray  # seconds left in the current manoeuvre
    radius: np.ndarray
    direction: np.ndarray  # pedestrians: +1 / -1 along the sidewalk

    @classmethod
    def empty(cls) -> "Traffic":
        z = np.zeros(0)
        return cls(np.zeros(0, dtype=int), z, z, z, z, z, z, z, np.zeros(0, dtype=int), z, z, z)

    def __len__(self) -> int:
        return len(self.cls)


BEHAVIOR = {VEHICLE: "idm_follow", PEDESTRIAN: "sidewalk_walk", MOTORCYCLE: "edge_filter", BICYCLE: "edge_ride"}


class SpeedHistory:
    """Tracks the current streak of sub-threshold speeds."""

    def __init__(self, threshold_kmh: float = 1.0):
        self.threshold_kmh = threshold_kmh
        self.slow_steps = 0
        self.steps = 0

    def push(self, speed_kmh: float) -> None:
        self.steps += 1
        self.slow_steps = self.slow_steps + 1 if speed_kmh < self.threshold_kmh else 0


@dataclass
class WorldState:
    config: WorldConfig
    ego: EgoState
    traffic: Traffic
    road: Road
    rng: np.random.Generator
    step: int = 0
    cumulative_distance_m: float = 0.0
    ego_s: float = 0.0
    ego_d: float = 0.0
    road_heading: float = 0.0
    road_idx: int = 0
    next_destination_s: float = 0.0
    routes_completed: int = 0
    last_events: StepEvents = field(default_factory=StepEvents)
    status: TerminationStatus = RUNNING
    history: SpeedHistory = field(default_factory=SpeedHistory)
    route_end_fixed: bool = False

    @property
    def agents(self) -> list[TrafficAgent]:
        t = self.traffic
        if len(t) == 0:
            return []
        x, y, h = self.road.pose(t.s, t.d)
        out = []
        for i in range(len(t)):
            c = int(t.cls[i])
            heading = float(h[i]) + math.atan2(t.v_lat[i], max(t.v[i], 1e-9)) if c == PEDESTRIAN else float(h[i])
            out.append(TrafficAgent(CLASS_NAMES[c], float(x[i]), float(y[i]), heading, float(math.hypot(t.v[i], t.v_lat[i])), BEHAVIOR[c]))
        return out

    @property
    def lateral_deviation(self) -> float:
        return self.ego_d

    @property
    def heading_error(self) -> float:
        return _wrap(self.ego.heading - self.road_heading)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        e = self.ego
        h.update(np.array([e.x, e.y, e.heading, e.speed, e.steer, e.throttle_brake]).tobytes())
        t = self.traffic
        for arr in (t.cls, t.s, t.d, t.v, t.v_lat, t.cruise, t.mode, t.hold):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.array([self.step, self.cumulative_distance_m, self.ego_s, self.ego_d, self.next_destination_s]).tobytes())
        h.update(json.dumps(self.rng.bit_generator.state, sort_keys=True).encode())
        h.update(np.asarray(self.road._xa).tobytes())
        return h.hexdigest()

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


# ---------------------------------------------------------------- spawning


def _spawn_one(state: WorldState, cls: int, lo: float, hi: float, occupied: list[tuple[float, float, float]]):
    cfg = state.config
    hw = cfg.lane_half_width_m
    rng = state.rng
    r = cfg.radius(cls)
    for _ in range(cfg.max_spawn_retries):
        s = float(rng.uniform(lo, hi))
        if abs(s - state.ego_s) < cfg.spawn_clearance_m:
            continue
        if cls == VEHICLE:
            d = 0.0
            cruise = cfg.v_max * float(rng.uniform(0.5, 0.9))
        elif cls == MOTORCYCLE:
            d = (hw - 0.3) * (1.0 if rng.random() < 0.5 else -1.0)
            cruise = cfg.v_max * float(rng.uniform(0.7, 1.3))
        elif cls == BICYCLE:
            d = (hw - 0.3) * (1.0 if rng.random() < 0.5 else -1.0)
            cruise = 0.2 * cfg.v_max
        else:
            d = float(rng.uniform(hw + 1.0, hw + 3.0)) * (1.0 if rng.random() < 0.5 else -1.0)
            cruise = float(rng.uniform(0.8, 1.5))
        gap = 2.0 if cls == PEDESTRIAN else 6.0
        if all(abs(s - s2) >= gap + r + r2 or abs(d - d2) >= r + r2 + 0.2 for s2, d2, r2 in occupied):
            return s, d, cruise
    raise ContractViolation(f"could not place a {CLASS_NAMES[cls]} after {cfg.max_spawn_retries} attempts")


def _populate(state: WorldState) -> Traffic:
    cfg = state.config
    counts = (
        (VEHICLE, cfg.n_vehicles),
        (PEDESTRIAN, cfg.n_pedestrians),
        (MOTORCYCLE, cfg.n_motorcycles),
        (BICYCLE, cfg.n_bicycles),
    )
    rows = []
    occupied: list[tuple[float, float, float]] = []
    lo = state.ego_s - cfg.traffic_behind_m
    hi = state.ego_s + cfg.traffic_ahead_m
    for cls, n in counts:
        for _ in range(n):
            s, d, cruise = _spawn_one(state, cls, lo, hi, occupied)
            occupied.append((s, d, cfg.radius(cls)))
            direction = 1.0 if (cls != PEDESTRIAN or state.rng.random() < 0.5) else -1.0
            v0 = cruise if cls != PEDESTRIAN else 0.0
            rows.append((cls, s, d, v0, 0.0, cruise, d, d, 0, 0.0, cfg.radius(cls), direction))
    if not rows:
        return Traffic.empty()
    cols = list(zip(*rows))
    t = Traffic(
        cls=np.array(cols[0], dtype=int),
        s=np.array(cols[1], dtype=float),
        d=np.array(cols[2], dtype=float),
        v=np.array(cols[3], dtype=float),
        v_lat=np.array(cols[4], dtype=float),
        cruise=np.array(cols[5], dtype=float),
        home_d=np.array(cols[6], dtype=float),
        target_d=np.array(cols[7], dtype=float),
        mode=np.array(cols[8], dtype=int),
        hold=np.array(cols[9], dtype=float),
        radius=np.array(cols[10], dtype=float),
        direction=np.array(cols[11], dtype=float),
    )
    return t


def _respawn(state: WorldState, i: int) -> None:
    cfg = state.config
    t = state.traffic
    cls = int(t.cls[i])
    mask = np.arange(len(t)) != i
    occupied = list(zip(t.s[mask], t.d[mask], t.radius[mask]))
    lo = state.ego_s + cfg.traffic_ahead_m / 3.0
    hi = state.ego_s + cfg.traffic_ahead_m
    s, d, cruise = _spawn_one(state, cls, lo, hi, occupied)
    t.s[i], t.d[i], t.cruise[i] = s, d, cruise
    t.home_d[i] = t.target_d[i] = d
    t.v[i] = cruise if cls != PEDESTRIAN else 0.0
    t.v_lat[i] = 0.0
    t.mode[i] = 0
    t.hold[i] = 0.0


def place_agents(state: WorldState, agents: Sequence[tuple[str, float, float, float]]) -> None:
    """Replace the traffic with ``(class, s ahead of ego, lateral offset, speed m/s)`` agents that hold their speed."""
    cfg = state.config
    rows = []
    for name, ds, d, v in agents:
        cls = CLASS_NAMES.index(name)
        rows.append((cls, state.ego_s + ds, d, v))
    n = len(rows)
    if n == 0:
        state.traffic = Traffic.empty()
    else:
        cls = np.array([r[0] for r in rows], dtype=int)
        d = np.array([r[2] for r in rows], dtype=float)
        v = np.array([r[3] for r in rows], dtype=float)
        state.traffic = Traffic(
            cls=cls,
            s=np.array([r[1] for r in rows], dtype=float),
            d=d,
            v=v,
            v_lat=np.zeros(n),
            cruise=v.copy(),
            home_d=d.copy(),
            target_d=d.copy(),
            mode=np.zeros(n, dtype=int),
            hold=np.zeros(n),
            radius=np.array([cfg.radius(c) for c in cls]),
            direction=np.ones(n),
        )


# ---------------------------------------------------------------- reset / step


@dataclass(frozen=True)
class EvalRoute:
    name: str
    segments: tuple[Segment, ...]

    @property
    def length_m(self) -> float:
        return segments_length(self.segments)


def _ensure_road(state: WorldState) -> None:
    cfg = state.config
    need = state.ego_s + cfg.traffic_ahead_m + 200.0
    while state.road.s_end < need:
        if state.route_end_fixed:
            state.road.extend([("straight", need - state.road.s_end + 50.0)])
        else:
            state.road.extend(random_segments(state.rng, 200.0))


def reset(config: WorldConfig | None = None, seed: int | None = None, route: EvalRoute | None = None):
    """Fresh world: ego at the start of a route, traffic spawned around it."""
    config = config or WorldConfig()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    road = Road()
    state = WorldState(config=config, ego=EgoState(), traffic=Traffic.empty(), road=road, rng=rng)
    if route is not None:
        road.extend(list(route.segments))
        state.next_destination_s = route.length_m
        state.route_end_fixed = True
    else:
        lo, hi = config.route_length_m
        state.next_destination_s = float(rng.uniform(lo, hi))
    _ensure_road(state)
    state.history = SpeedHistory(config.stuck_speed_kmh)
    state.traffic = _populate(state)
    return state, observe(state)


def _agent_leaders(state: WorldState):
    """Gap and speed of the closest laterally-overlapping object ahead of each agent (ego included)."""
    t = state.traffic
    cfg = state.config
    s = np.append(t.s, state.ego_s)
    d = np.append(t.d, state.ego_d)
    v = np.append(t.v, state.ego.speed)
    r = np.append(t.radius, cfg.ego_radius_m)
    ds = s[None, :] - t.s[:, None]
    overlap = np.abs(d[None, :] - t.d[:, None]) < (r[None, :] + t.radius[:, None] + 0.3)
    ahead = (ds > 0) & overlap
    gap = np.where(ahead, ds - r[None, :] - t.radius[:, None], np.inf)
    j = np.argmin(gap, axis=1)
    g = gap[np.arange(len(t)), j]
    return g, v[j]


def _step_traffic(state: WorldState) -> None:
    t = state.traffic
    if len(t) == 0:
        return
    cfg = state.config
    dt = cfg.dt
    rng = state.rng

    gap, v_lead = _agent_leaders(state)
    road_users = t.cls != PEDESTRIAN
    # intelligent-driver-model longitudinal control for everything on the road
    s0 = np.where(t.cls == VEHICLE, 4.0, 2.0)
    headway = np.where(t.cls == VEHICLE, 1.2, 0.8)
    a_max, b = 1.5, 2.0
    v = t.v
    s_star = s0 + v * headway + v * (v - v_lead) / (2.0 * math.sqrt(a_max * b))
    s_star = np.maximum(s_star, s0)
    free = 1.0 - (v / np.maximum(t.cruise, 0.1)) ** 4
    inter = np.where(np.isfinite(gap), (s_star / np.maximum(gap, 0.1)) ** 2, 0.0)
    acc = np.clip(a_max * (free - inter), -8.0, a_max)
    v_new = np.where(road_users, np.maximum(0.0, v + acc * dt), v)

    # motorcycles: probabilistic cut-in from the lane edge to the centre ahead of ego
    rel = t.s - state.ego_s
    moto = t.cls == MOTORCYCLE
    u = rng.random(len(t))
    start_cut = moto & (t.mode == 0) & (rel > 3.0) & (rel < 20.0) & (u < cfg.motorcycle_cutin_rate_hz * dt)
    t.mode[start_cut] = 1
    t.target_d[start_cut] = 0.0
    t.hold[start_cut] = rng.uniform(5.0, 10.0, size=int(start_cut.sum()))
    cutting = moto & (t.mode == 1)
    t.hold[cutting] -= dt
    back = cutting & (t.hold <= 0.0)
    t.mode[back] = 0
    t.target_d[back] = t.home_d[back]
    lat = np.clip(t.target_d - t.d, -1.0 * dt, 1.0 * dt)
    t.v_lat = np.where(moto, lat / dt, t.v_lat)
    t.d = np.where(moto, t.d + lat, t.d)

    # pedestrians: sidewalk walking with Poisson-triggered road crossings
    ped = t.cls == PEDESTRIAN
    # pedestrians do not step out right in front of a moving ego
    time_to_ego = np.where(rel > 0.0, (rel - 3.0) / max(state.ego.speed, 0.1), np.inf)
    start_cross = ped & (t.mode == 0) & (u < cfg.pedestrian_crossing_rate_hz * dt) & ((rel < -5.0) | (time_to_ego > 2.0))
    t.mode[start_cross] = 1
    t.target_d[start_cross] = -t.d[start_cross]
    crossing = ped & (t.mode == 1)
    step_lat = np.sign(t.target_d - t.d) * t.cruise * dt
    arrived = crossing & (np.abs(t.target_d - t.d) <= np.abs(step_lat))
    new_d = np.where(crossing, np.where(arrived, t.target_d, t.d + step_lat), t.d)
    t.v_lat = np.where(ped, np.where(crossing & ~arrived, step_lat / dt, 0.0), t.v_lat)
    t.d = new_d
    t.mode[arrived] = 0
    t.home_d[arrived] = t.target_d[arrived]
    v_new = np.where(ped, np.where(t.mode == 1, 0.0, t.cruise * t.direction), v_new)

    t.v = v_new
    t.s = t.s + t.v * dt

    lo = state.ego_s - cfg.traffic_behind_m
    hi = state.ego_s + cfg.traffic_ahead_m
    for i in np.flatnonzero((t.s < lo) | (t.s > hi)):
        _respawn(state, int(i))


def check_termination(state: WorldState, events: StepEvents, history: SpeedHistory) -> TerminationStatus:
    cfg = state.config
    if events.collision:
        return TerminationStatus(True, TerminationReason.COLLISION)
    if history.slow_steps > cfg.stuck_steps:
        return TerminationStatus(True, TerminationReason.STUCK)
    if abs(state.lateral_deviation) > cfg.max_lateral_deviation_m:
        return TerminationStatus(True, TerminationReason.OFF_LANE)
    if cfg.stop_at_destination and state.routes_completed > 0:
        return TerminationStatus(True, TerminationReason.DESTINATION)
    if state.cumulative_distance_m >= cfg.episode_distance_m:
        return TerminationStatus(True, TerminationReason.DISTANCE)
    return RUNNING


def _integrate_ego(state: WorldState, action: Action) -> None:
    cfg = state.config
    e = state.ego
    dt = cfg.dt
    e.steer = action.steer
    e.throttle_brake = action.throttle_brake
    tb = action.throttle_brake
    acc = tb * cfg.max_accel if tb >= 0 else tb * cfg.max_brake
    if e.speed > 0.0:
        acc -= cfg.rolling_decel
    e.speed = min(cfg.v_max, max(0.0, e.speed + acc * dt))
    # steer +1 is a right turn, i.e. negative yaw rate in a y-up frame
    delta = -action.steer * cfg.max_steer_rad
    x0, y0 = e.x, e.y
    e.x += e.speed * math.cos(e.heading) * dt
    e.y += e.speed * math.sin(e.heading) * dt
    e.heading = _wrap(e.heading + e.speed / cfg.wheelbase_m * math.tan(delta) * dt)
    state.cumulative_distance_m += math.hypot(e.x - x0, e.y - y0)


def _collisions(state: WorldState) -> bool:
    t = state.traffic
    if len(t) == 0:
        return False
    x, y, _ = state.road.pose(t.s, t.d)
    dist = np.hypot(x - state.ego.x, y - state.ego.y)
    return bool(np.any(dist < t.radius + state.config.ego_radius_m))


def step(state: WorldState, action: Action):
    """Advance one control period. Returns ``(state, observation, events)``."""
    if state.status.terminal:
        raise ContractViolation(f"stepping a terminated world ({state.status.reason})")
    if not isinstance(action, Action):
        action = Action.from_array(action)
    cfg = state.config
    _integrate_ego(state, action)
    s, d, h, idx = state.road.project(state.ego.x, state.ego.y, state.road_idx)
    state.ego_s, state.ego_d, state.road_heading, state.road_idx = s, d, h, idx
    _step_traffic(state)
    _ensure_road(state)
    state.step += 1

    completed = 0
    if state.ego_s >= state.next_destination_s:
        completed = 1
        state.routes_completed += 1
        lo, hi = cfg.route_length_m
        state.next_destination_s = state.ego_s + float(state.rng.uniform(lo, hi))

    collided = _collisions(state)
    state.history.push(state.ego.speed_kmh)
    events = StepEvents(
        collision=collided,
        collision_speed_kmh=state.ego.speed_kmh if collided else 0.0,
        stuck=state.history.slow_steps > cfg.stuck_steps,
        off_lane=bool(abs(state.ego_d) > cfg.max_lateral_deviation_m),
        route_completed_increment=completed,
    )
    state.last_events = events
    state.status = check_termination(state, events, state.history)
    return state, observe(state), events


# ---------------------------------------------------------------- observation


def render_descriptors(state: WorldState) -> tuple[SceneDescriptor, SceneDescriptor]:
    cfg = state.config
    t = state.traffic
    crash = state.last_events.collision
    if len(t) == 0:
        return (
            SceneDescriptor(View.BEV, road_clear=True, collision_present=crash),
            SceneDescriptor(View.FRONT, road_clear=True, collision_present=crash),
        )
    e = state.ego
    x, y, h = state.road.pose(t.s, t.d)
    rx, ry = x - e.x, y - e.y
    c, sn = math.cos(e.heading), math.sin(e.heading)
    fx = c * rx + sn * ry
    fy = -sn * rx + c * ry
    dist = np.hypot(fx, fy)
    bearing = np.arctan2(fy, fx)
    # agent world-frame velocity from road-frame components
    vx = t.v * np.cos(h) - t.v_lat * np.sin(h)
    vy = t.v * np.sin(h) + t.v_lat * np.cos(h)
    rvx = vx - e.speed * c
    rvy = vy - e.speed * sn
    closing = -(rx * rvx + ry * rvy) / np.maximum(dist, 1e-6)
    in_lane = np.abs(t.d) < cfg.lane_half_width_m
    ahead = fx > 0.0
    slow = np.hypot(t.v, t.v_lat) < 0.5

    in_bev = (np.abs(fx) <= cfg.bev_half_extent_m) & (np.abs(fy) <= cfg.bev_half_extent_m)
    in_front = ahead & (dist <= cfg.front_range_m) & (np.abs(bearing) <= cfg.front_half_angle_rad)

    def build(mask, view):
        idx = np.flatnonzero(mask)
        idx = idx[np.argsort(dist[idx], kind="stable")]
        hazards = tuple(
            Hazard(
                cls=CLASS_NAMES[t.cls[i]],
                distance_m=float(dist[i]),
                closing_speed_mps=float(closing[i]),
                in_ego_lane=bool(in_lane[i]),
                bearing_rad=float(bearing[i]),
            )
            for i in idx
        )
        near = in_lane[idx] & (dist[idx] < CLEAR_THRESHOLD_M)
        blocked = bool(np.any(near & ahead[idx] & slow[idx]))
        return SceneDescriptor(
            view=view,
            road_clear=not bool(np.any(near)),
            collision_present=crash,
            hazards=hazards,
            lane_blocked=blocked,
        )

    return build(in_bev, View.BEV), build(in_front, View.FRONT)


def waypoints(state: WorldState) -> np.ndarray:
    s = state.ego_s + WAYPOINT_SPACING_M * np.arange(1, N_WAYPOINTS + 1)
    x, y, _ = state.road.pose(s, 0.0)
    e = state.ego
    rx, ry = x - e.x, y - e.y
    c, sn = math.cos(e.heading), math.sin(e.heading)
    return np.stack([c * rx + sn * ry, -sn * rx + c * ry], axis=1)


def observe(state: WorldState) -> Observation:
    bev, front = render_descriptors(state)
    e = state.ego
    herr = state.heading_error
    return Observation(
        bev=bev,
        front=front,
        ego_state=(e.steer, e.throttle_brake, e.speed_kmh),
        waypoints=waypoints(state),
        vehicle=VehicleState(
            speed_kmh=e.speed_kmh,
            lateral_deviation_m=state.ego_d,
            heading_error_rad=herr,
            lateral_velocity_mps=e.speed * math.sin(herr),
        ),
        step=state.step,
    )


# ---------------------------------------------------------------- evaluation routes

EVAL_ROUTE_SEED_NAME = "eval-routes-v1"


def generate_eval_routes(seed_name: str = EVAL_ROUTE_SEED_NAME, n: int = 10, length_m=(200.0, 300.0)) -> list[EvalRoute]:
    seed = int.from_bytes(hashlib.sha256(seed_name.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    routes = []
    for k in range(n):
        target = float(rng.uniform(*length_m))
        segs = random_segments(rng, target)
        routes.append(EvalRoute(f"route-{k:02d}", tuple(segs)))
    return routes


def routes_to_json(routes: Sequence[EvalRoute]) -> str:
    payload = {
        "seed_name": EVAL_ROUTE_SEED_NAME,
        "routes": [{"name": r.name, "segments": [[k, v] for k, v in r.segments]} for r in routes],
    }
    return json.dumps(payload, indent=2) + "\n"


def load_eval_routes(path=None) -> list[EvalRoute]:
    if path is None:
        text = resources.files("dualpath.data").joinpath("eval_routes.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    payload = json.loads(text)
    return [EvalRoute(r["name"], tuple((k, float(v)) for k, v in r["segments"])) for r in payload["routes"]]
