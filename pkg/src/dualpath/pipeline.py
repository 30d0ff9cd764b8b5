"""Replay buffer with placeholder rewards and the three-worker training loop."""
from __future__ import annotations

import csv
import io
import threading
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .clock import BusyWaitClock, VirtualClock
from .errors import BackpressureError, ConfigurationError, ContractViolation, InsufficientDataError
from .learner import SAC, Batch, featurize
from .metrics import EpisodeLog
from .reasoner import FrameBuffer, TemporalWindow
from .synthesis import RewardBreakdown, Synthesizer, shaping_inputs
from .world import Action, Observation, StepEvents, TerminationReason, WorldConfig, reset, step

DETERMINISTIC = "deterministic_interleaved"
CONCURRENT = "concurrent"


class _Unset:
    """Placeholder reward. Any arithmetic or truth test on it is a contract violation."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNSET"

    def _trap(self, *_args, **_kw):
        raise ContractViolation("read of an unannotated reward")

    __float__ = __bool__ = __add__ = __radd__ = __mul__ = __rmul__ = __sub__ = __rsub__ = _trap
    __lt__ = __le__ = __gt__ = __ge__ = __neg__ = __truediv__ = _trap


UNSET = _Unset()


@dataclass(eq=False)
class Transition:
    obs: Observation
    action: Action
    next_obs: Observation
    events: StepEvents
    step_index: int
    episode: int = 0
    done: bool = False
    window: TemporalWindow | None = None
    features: np.ndarray | None = field(default=None, repr=False)
    next_features: np.ndarray | None = field(default=None, repr=False)
    _reward: float | _Unset = field(default=UNSET, repr=False)
    annotation_step: int | None = None
    breakdown: RewardBreakdown | None = field(default=None, repr=False)

    @property
    def ready(self) -> int:
        return int(self._reward is not UNSET)

    @property
    def reward(self) -> float:
        if self._reward is UNSET:
            raise ContractViolation(f"reward of transition {self.step_index} read before annotation")
        return self._reward  # type: ignore[return-value]

    def annotate(self, reward: float, annotation_step: int, breakdown: RewardBreakdown | None = None) -> None:
        if self._reward is not UNSET:
            raise ContractViolation(f"transition {self.step_index} annotated twice")
        if annotation_step < self.step_index:
            raise ContractViolation("annotation precedes the transition")
        self._reward = float(reward)
        self.annotation_step = annotation_step
        self.breakdown = breakdown


@dataclass
class PipelineConfig:
    batch_size: int = 32  # transitions annotated per reward-worker firing
    annotation_interval: int = 10
    warmup: int = 1000
    buffer_capacity: int = 100_000
    t_det: float = 0.021
    t_lvlm: float = 1.0
    scheduler: str = DETERMINISTIC
    busy_wait: bool = False
    checkpoint_interval: int = 10_000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.annotation_interval < 1:
            raise ConfigurationError("annotation_interval must be >= 1")
        if self.warmup < self.batch_size:
            raise ConfigurationError("warmup must be at least batch_size")
        if self.buffer_capacity < 1:
            raise ConfigurationError("buffer_capacity must be >= 1")
        if self.scheduler not in (DETERMINISTIC, CONCURRENT):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        if self.t_det < 0 or self.t_lvlm < 0:
            raise ConfigurationError("latencies must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "PipelineConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown pipeline options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """Fixed-capacity store. Numeric fields live in arrays; pending transitions keep their scenes
    until annotated, after which only the features remain."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int = 2, keep_transitions: bool = False):
        self.capacity = capacity
        self.feat = np.zeros((capacity, obs_dim))
        self.next_feat = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.full(capacity, np.nan)
        self.done = np.zeros(capacity)
        self.ready = np.zeros(capacity, dtype=bool)
        self.used = np.zeros(capacity, dtype=bool)
        self.step_index = np.full(capacity, -1, dtype=np.int64)
        self.annotation_step = np.full(capacity, -1, dtype=np.int64)
        self._free = deque(range(capacity))
        self._pending: deque[int] = deque()  # unannotated slots, oldest first
        self._ready_order: deque[int] = deque()  # annotated slots, oldest first
        self.items: dict[int, Transition] = {}
        self.keep_transitions = keep_transitions
        self.lock = threading.RLock()
        self.stored_total = 0
        self.annotated_total = 0
        self.evicted_total = 0
        self.staleness: list[int] = []

    def __len__(self) -> int:
        return int(self.used.sum())

    @property
    def n_ready(self) -> int:
        return len(self._ready_order)

    @property
    def n_pending(self) -> int:
        return len(self._pending)

    def store(self, tr: Transition) -> int:
        with self.lock:
            if not self._free:
                if not self._ready_order:
                    raise BackpressureError("buffer full of unannotated transitions")
                victim = self._ready_order.popleft()
                self._release(victim)
                self.evicted_total += 1
            slot = self._free.popleft()
            self.used[slot] = True
            self.ready[slot] = False
            self.rew[slot] = np.nan
            self.feat[slot] = tr.features
            self.next_feat[slot] = tr.next_features
            self.act[slot] = (tr.action.steer, tr.action.throttle_brake)
            self.done[slot] = float(tr.done)
            self.step_index[slot] = tr.step_index
            self.annotation_step[slot] = -1
            self.items[slot] = tr
            self._pending.append(slot)
            self.stored_total += 1
            return slot

    def _release(self, slot: int) -> None:
        self.used[slot] = False
        self.ready[slot] = False
        self.rew[slot] = np.nan
        self.items.pop(slot, None)
        self._free.append(slot)

    def oldest_pending(self, n: int) -> list[tuple[int, Transition]]:
        with self.lock:
            return [(s, self.items[s]) for s in list(self._pending)[:n]]

    def write_back(self, results: list[tuple[int, Transition, float, RewardBreakdown | None]], annotation_step: int) -> int:
        with self.lock:
            done = 0
            for slot, tr, reward, bd in results:
                if self.items.get(slot) is not tr or self.ready[slot]:
                    continue
                tr.annotate(reward, annotation_step, bd)
                self.rew[slot] = reward
                self.ready[slot] = True
                self.annotation_step[slot] = annotation_step
                self._pending.remove(slot)
                self._ready_order.append(slot)
                self.staleness.append(annotation_step - tr.step_index)
                if not self.keep_transitions:
                    del self.items[slot]
                done += 1
            self.annotated_total += done
            return done

    def transition(self, slot: int) -> Transition:
        return self.items[slot]

    def sample_ready(self, n: int, rng: np.random.Generator) -> Batch:
        with self.lock:
            idx = self.sample_slots(n, rng)
            return Batch(
                obs=self.feat[idx].copy(),
                act=self.act[idx].copy(),
                rew=self.rew[idx].copy(),
                next_obs=self.next_feat[idx].copy(),
                done=self.done[idx].copy(),
                ready=self.ready[idx].copy(),
            )

    def sample_slots(self, n: int, rng: np.random.Generator) -> np.ndarray:
        with self.lock:
            m = len(self._ready_order)
            if m < n:
                raise InsufficientDataError(f"{m} ready transitions, {n} requested")
            ready = np.flatnonzero(self.ready)
            return ready[rng.choice(m, size=n, replace=False)]


def store(buffer: ReplayBuffer, transition: Transition) -> int:
    return buffer.store(transition)


def sample_ready(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[Transition]:
    """Uniform draw without replacement among annotated transitions (needs ``keep_transitions``)."""
    return [buffer.transition(int(s)) for s in buffer.sample_slots(n, rng)]


@dataclass
class CostModel:
    t_det: float = 0.021
    t_lvlm: float = 1.0


def annotate_batch(
    buffer: ReplayBuffer,
    synthesizer: Synthesizer,
    batch_size: int,
    annotation_step: int = 0,
    clock: VirtualClock | None = None,
    cost: CostModel | None = None,
    on_reward: Callable[[Transition, RewardBreakdown], None] | None = None,
) -> int:
    """Synthesize rewards for up to ``batch_size`` of the oldest unannotated transitions."""
    picked = buffer.oldest_pending(batch_size)
    if not picked:
        return 0
    wcfg = synthesizer.world_config
    results = []
    for slot, tr in picked:
        nxt = tr.next_obs
        ego = shaping_inputs(nxt.vehicle, wcfg.v_max_kmh, wcfg.lane_half_width_m)
        bd = synthesizer(nxt.bev, nxt.front, tr.window, ego, tr.events)
        if clock is not None and cost is not None:
            if synthesizer.detector is not None and synthesizer.cfg.dynamic_enabled:
                clock.charge("detector", cost.t_det)
            if bd.g:
                clock.charge("describer", cost.t_lvlm)
        results.append((slot, tr, bd.r_final, bd))
    n = buffer.write_back(results, annotation_step)
    if on_reward is not None:
        for _, tr, _, bd in results:
            on_reward(tr, bd)
    return n


# ---------------------------------------------------------------- run report


@dataclass
class CurvePoint:
    step: int
    episodes: int
    collisions: int
    cumulative_collisions: int
    distance_m: float
    mean_speed_kmh: float
    routes_completed: int
    collision_rate: float
    eval_sr: float = float("nan")


@dataclass
class RunReport:
    total_steps: int = 0
    episodes: list[EpisodeLog] = field(default_factory=list)
    firings: int = 0
    annotated: int = 0
    updates: int = 0
    first_update_step: int | None = None
    ready_at_first_update: int | None = None
    warmup: int = 0
    staleness_mean: float = 0.0
    staleness_max: int = 0
    gate_open: int = 0
    gate_rate: float = 0.0
    describer_calls: int = 0
    virtual_time_s: float = 0.0
    clock_charges: dict[str, float] = field(default_factory=dict)
    backpressure_waits: int = 0
    cumulative_collisions: int = 0
    curve: list[CurvePoint] = field(default_factory=list)
    descriptions: list[tuple[int, str]] = field(default_factory=list)
    final_critic_loss: float = float("nan")
    final_actor_loss: float = float("nan")
    stopped_early: bool = False

    def summary(self) -> str:
        lines = [
            f"total_steps: {self.total_steps}",
            f"episodes: {len(self.episodes)}",
            f"reward_worker_firings: {self.firings}",
            f"annotated: {self.annotated}",
            f"learner_updates: {self.updates}",
            f"warmup: {self.warmup}",
            f"first_update_step: {self.first_update_step}",
            f"ready_at_first_update: {self.ready_at_first_update}",
            f"staleness_mean: {self.staleness_mean:.6f}",
            f"staleness_max: {self.staleness_max}",
            f"gate_rate: {self.gate_rate:.6f}",
            f"describer_calls: {self.describer_calls}",
            f"virtual_time_s: {self.virtual_time_s:.6f}",
            f"cumulative_collisions: {self.cumulative_collisions}",
            f"backpressure_waits: {self.backpressure_waits}",
            f"final_critic_loss: {self.final_critic_loss:.9g}",
            f"final_actor_loss: {self.final_actor_loss:.9g}",
            f"stopped_early: {self.stopped_early}",
        ]
        return "\n".join(lines) + "\n"

    def curve_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(CurvePoint)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for p in self.curve:
            w.writerow([f"{getattr(p, k):.6f}" if isinstance(getattr(p, k), float) else getattr(p, k) for k in names])
        return buf.getvalue()

    def descriptions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "l_dyn"])
        w.writerows(self.descriptions)
        return buf.getvalue()

    def serialize(self) -> str:
        from .metrics import logs_to_csv

        return self.summary() + "\n" + logs_to_csv(self.episodes) + "\n" + self.curve_csv() + "\n" + self.descriptions_csv()


# ---------------------------------------------------------------- training loop


class _Interaction:
    """Owns the world, the frame buffer and the episode bookkeeping."""

    def __init__(self, world_cfg: WorldConfig, seed: int, report: RunReport):
        self.world_cfg = world_cfg
        self.seed = seed
        self.report = report
        self.episode = -1
        self.frames = FrameBuffer()
        self.rng = np.random.default_rng([seed, 7])
        self._new_episode(0)

    def _new_episode(self, global_step: int) -> None:
        self.episode += 1
        self.state, self.obs = reset(self.world_cfg, seed=int(self.seed * 100_003 + self.episode))
        self.frames.clear()
        self.frames.push(self.obs.step, self.obs.front)
        self.feat = featurize(self.obs, self.world_cfg.v_max_kmh, self.world_cfg.lane_half_width_m)
        self.log = EpisodeLog(self.episode, start_step=global_step)

    def step(self, actor, global_step: int) -> Transition:
        from .learner import act

        action = act(self.feat, actor, deterministic=False, rng=self.rng)
        d0 = self.state.cumulative_distance_m
        state, nxt, events = step(self.state, action)
        window = self.frames.push(nxt.step, nxt.front)
        next_feat = featurize(nxt, self.world_cfg.v_max_kmh, self.world_cfg.lane_half_width_m)
        status = state.status
        # time-limit endings bootstrap; failures and arrivals do not
        done = status.terminal and status.reason != TerminationReason.DISTANCE
        tr = Transition(self.obs, action, nxt, events, global_step, self.episode, done, window, self.feat, next_feat)
        self.log.record(nxt.vehicle.speed_kmh, state.cumulative_distance_m - d0)
        if events.collision:
            self.log.collisions += 1
            self.log.collision_speed_sum_kmh += events.collision_speed_kmh
            self.log.collision_steps.append(global_step)
            self.report.cumulative_collisions += 1
        self.log.routes_completed += events.route_completed_increment
        if status.terminal:
            self.log.reason = status.reason.value
            self.log.success = status.reason in (TerminationReason.DESTINATION, TerminationReason.DISTANCE)
            self.report.episodes.append(self.log)
            self._new_episode(global_step + 1)
        else:
            self.obs, self.feat = nxt, next_feat
        return tr


def _curve_point(report: RunReport, step_: int, since: int) -> CurvePoint:
    eps = report.episodes[since:]
    steps = sum(e.steps for e in eps)
    coll = sum(e.collisions for e in eps)
    return CurvePoint(
        step=step_,
        episodes=len(eps),
        collisions=coll,
        cumulative_collisions=report.cumulative_collisions,
        distance_m=sum(e.distance_m for e in eps),
        mean_speed_kmh=sum(e.speed_sum_kmh for e in eps) / steps if steps else 0.0,
        routes_completed=sum(e.routes_completed for e in eps),
        collision_rate=sum(1 for e in eps if e.collisions) / len(eps) if eps else 0.0,
    )


CheckpointHook = Callable[[int, SAC, RunReport], "float | None"]


def run(
    config: PipelineConfig,
    world_cfg: WorldConfig,
    synthesizer: Synthesizer,
    agent: SAC,
    total_steps: int,
    seed: int = 0,
    on_checkpoint: CheckpointHook | None = None,
    stop_when: Callable[[float], bool] | None = None,
    keep_transitions: bool = False,
) -> RunReport:
    """Train ``agent`` for ``total_steps`` control steps with asynchronous reward annotation."""
    synthesizer.world_config = world_cfg
    report = RunReport(warmup=config.warmup)
    buffer = ReplayBuffer(config.buffer_capacity, agent.obs_dim, agent.act_dim, keep_transitions)
    clock = BusyWaitClock() if config.busy_wait else VirtualClock()
    cost = CostModel(config.t_det, config.t_lvlm)
    sample_rng = np.random.default_rng([seed, 11])
    gate_trace: list[int] = []

    def on_reward(tr: Transition, bd: RewardBreakdown) -> None:
        gate_trace.append(bd.g)
        if bd.l_dyn_text is not None:
            report.descriptions.append((tr.step_index, bd.l_dyn_text))

    ctx = _RunContext(config, buffer, synthesizer, agent, clock, cost, report, sample_rng, on_reward)
    interaction = _Interaction(world_cfg, seed, report)
    try:
        if config.scheduler == DETERMINISTIC:
            _run_interleaved(ctx, interaction, total_steps, on_checkpoint, stop_when)
        else:
            _run_concurrent(ctx, interaction, total_steps, on_checkpoint, stop_when)
    finally:
        report.buffer = buffer  # type: ignore[attr-defined]
    report.annotated = buffer.annotated_total
    report.updates = agent.updates - ctx.updates0
    if buffer.staleness:
        report.staleness_mean = float(np.mean(buffer.staleness))
        report.staleness_max = int(np.max(buffer.staleness))
    report.gate_open = int(sum(gate_trace))
    report.gate_rate = report.gate_open / len(gate_trace) if gate_trace else 0.0
    report.describer_calls = synthesizer.describer_calls
    report.virtual_time_s = clock.elapsed
    report.clock_charges = dict(sorted(clock.charges.items()))
    report.descriptions.sort()
    return report


@dataclass
class _RunContext:
    config: PipelineConfig
    buffer: ReplayBuffer
    synthesizer: Synthesizer
    agent: SAC
    clock: VirtualClock
    cost: CostModel
    report: RunReport
    sample_rng: np.random.Generator
    on_reward: Callable
    updates0: int = 0

    def __post_init__(self):
        self.updates0 = self.agent.updates

    def annotate(self, step_: int) -> int:
        n = annotate_batch(self.buffer, self.synthesizer, self.config.batch_size, step_, self.clock, self.cost, self.on_reward)
        self.report.firings += 1
        return n

    def learn(self, step_: int) -> bool:
        if self.buffer.annotated_total < self.config.warmup:
            return False
        try:
            batch = self.buffer.sample_ready(self.agent.cfg.batch_size, self.sample_rng)
        except InsufficientDataError:
            return False
        if self.report.first_update_step is None:
            self.report.first_update_step = step_
            self.report.ready_at_first_update = self.buffer.annotated_total
        lc, la = self.agent.update(batch)
        self.report.final_critic_loss, self.report.final_actor_loss = lc, la
        return True


def _checkpoint(ctx: _RunContext, step_: int, since: int, on_checkpoint, stop_when) -> tuple[int, bool]:
    point = _curve_point(ctx.report, step_, since)
    if on_checkpoint is not None:
        sr = on_checkpoint(step_, ctx.agent, ctx.report)
        if sr is not None:
            point.eval_sr = float(sr)
    ctx.report.curve.append(point)
    stop = stop_when is not None and not np.isnan(point.eval_sr) and stop_when(point.eval_sr)
    return len(ctx.report.episodes), stop


def _run_interleaved(ctx: _RunContext, interaction: _Interaction, total_steps: int, on_checkpoint, stop_when) -> None:
    cfg = ctx.config
    since = 0
    for t in range(1, total_steps + 1):
        try:
            tr = interaction.step(ctx.agent.actor, t)
        except ContractViolation:
            raise
        except Exception as exc:  # surface the failing step
            raise RuntimeError(f"interaction worker failed at step {t}: {exc}") from exc
        try:
            ctx.buffer.store(tr)
        except BackpressureError:
            # single thread of control: drain synchronously, then retry
            ctx.report.backpressure_waits += 1
            ctx.annotate(t)
            ctx.buffer.store(tr)
        if t % cfg.annotation_interval == 0:
            ctx.annotate(t)
        ctx.learn(t)
        ctx.report.total_steps = t
        if t % cfg.checkpoint_interval == 0:
            since, stop = _checkpoint(ctx, t, since, on_checkpoint, stop_when)
            if stop:
                ctx.report.stopped_early = True
                break


def _run_concurrent(ctx: _RunContext, interaction: _Interaction, total_steps: int, on_checkpoint, stop_when) -> None:
    """Three threads over the shared buffer; buffer methods take its lock, ``cond`` guards the counters."""
    cfg = ctx.config
    agent = ctx.agent
    cond = threading.Condition()
    shared = {"steps": 0, "done": False, "error": None, "snapshot": agent.actor.clone()}
    update_lock = threading.Lock()

    def fail(exc: BaseException) -> None:
        with cond:
            if shared["error"] is None:
                shared["error"] = (shared["steps"], exc)
            shared["done"] = True
            cond.notify_all()

    def owed() -> int:
        if ctx.buffer.annotated_total < cfg.warmup:
            return 0
        first = ctx.report.first_update_step
        if first is None:
            return 1
        return shared["steps"] - first + 1 - (agent.updates - ctx.updates0)

    def interaction_worker() -> None:
        try:
            since = 0
            for t in range(1, total_steps + 1):
                with cond:
                    actor = shared["snapshot"]
                tr = interaction.step(actor, t)
                while True:
                    try:
                        ctx.buffer.store(tr)
                        break
                    except BackpressureError:
                        with cond:
                            ctx.report.backpressure_waits += 1
                            cond.notify_all()
                            cond.wait(0.01)
                with cond:
                    shared["steps"] = ctx.report.total_steps = t
                    cond.notify_all()
                if t % cfg.checkpoint_interval == 0:
                    with cond:
                        cond.wait_for(lambda: shared["error"] is not None or owed() <= 0, 60.0)
                    with update_lock:
                        since, stop = _checkpoint(ctx, t, since, on_checkpoint, stop_when)
                    if stop:
                        ctx.report.stopped_early = True
                        break
                if shared["error"] is not None:
                    return
            with cond:
                shared["done"] = True
                cond.notify_all()
        except BaseException as exc:  # noqa: BLE001
            fail(exc)

    def reward_worker() -> None:
        try:
            fired = 0
            while True:
                with cond:
                    cond.wait_for(lambda: shared["done"] or shared["steps"] // cfg.annotation_interval > fired
                                  or ctx.report.backpressure_waits > 0 and ctx.buffer.n_pending > 0, 0.05)
                    steps, finished = shared["steps"], shared["done"]
                if shared["error"] is not None:
                    return
                if steps // cfg.annotation_interval > fired:
                    fired = steps // cfg.annotation_interval
                    ctx.annotate(steps)
                elif not finished and not ctx.buffer._free and ctx.buffer.n_pending:
                    ctx.annotate(steps)
                with cond:
                    cond.notify_all()
                if finished:
                    return
        except BaseException as exc:  # noqa: BLE001
            fail(exc)

    def learner_worker() -> None:
        try:
            while True:
                with cond:
                    cond.wait_for(lambda: shared["done"] or owed() > 0, 0.05)
                    steps, finished, due = shared["steps"], shared["done"], owed()
                if finished:
                    return
                if due > 0:
                    with update_lock:
                        did = ctx.learn(steps)
                    if did and (agent.updates - ctx.updates0) % 10 == 0:
                        snap = agent.actor.clone()
                        with cond:
                            shared["snapshot"] = snap
                    with cond:
                        cond.notify_all()
        except BaseException as exc:  # noqa: BLE001
            fail(exc)

    threads = [threading.Thread(target=f, name=f.__name__) for f in (interaction_worker, reward_worker, learner_worker)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if shared["error"] is not None:
        at, exc = shared["error"]
        raise RuntimeError(f"worker failed near step {at}: {exc}") from exc
