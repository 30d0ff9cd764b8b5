"""Experiment orchestration: training arms, evaluation, gating replays, arm comparison."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .apparatus import COUNTER
from .clock import VirtualClock
from .config import RunConfig
from .embedding import Hazard, SceneDescriptor, View
from .errors import ContractViolation, InvalidComparisonError, InvalidInputError
from .gate import CriticalClassSet, DEFAULT_CRITICAL, Detector, DetectorConfig, gate, savings
from .learner import SAC, act, featurize
from .metrics import EpisodeLog, MetricsRow, aggregate, compute_metrics, logs_to_csv, METRIC_NAMES
from .pipeline import RunReport, run
from .reasoner import DEFAULT_VOCABULARY, FrameBuffer, RiskVocabulary, describe
from .synthesis import NO_PENALTY, Synthesizer
from .world import Action, EvalRoute, TerminationReason, WorldConfig, load_eval_routes, reset, step

ARMS = ("main", "no_penalty", "static_only")


def arm_config(cfg: RunConfig, arm: str) -> RunConfig:
    """Derive an ablation arm. Arms differ from the base only in the flag they name."""
    if arm == "main":
        return replace(cfg, experiment="main")
    if arm == "no_penalty":
        return replace(cfg, experiment="no_penalty", synthesis=replace(cfg.synthesis, mode=NO_PENALTY))
    if arm == "static_only":
        return replace(cfg, experiment="static_only", detector=replace(cfg.detector, recall=0.0))
    raise InvalidInputError(f"unknown arm {arm!r}; expected one of {ARMS}")


def critical_set(cfg: RunConfig) -> CriticalClassSet:
    return CriticalClassSet(frozenset(cfg.critical_classes)) if cfg.critical_classes else DEFAULT_CRITICAL


def build_synthesizer(cfg: RunConfig, seed: int) -> Synthesizer:
    critical = critical_set(cfg)
    det_cfg = cfg.detector
    detector = Detector(det_cfg, critical, np.random.default_rng([det_cfg.seed, seed]))
    vocab = RiskVocabulary.from_file(cfg.vocabulary) if cfg.vocabulary else DEFAULT_VOCABULARY
    return Synthesizer(cfg.synthesis, detector, vocab=vocab, critical=critical, world_config=cfg.world)


def build_agent(cfg: RunConfig, seed: int) -> SAC:
    return SAC(cfg=replace(cfg.learner, seed=int(seed)))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    logs: list[EpisodeLog]
    apparatus_calls: int

    @property
    def sr(self) -> float:
        return sum(l.success for l in self.logs) / len(self.logs)


Policy = Callable[[np.ndarray, np.random.Generator], Action]


def deterministic_policy(agent: SAC) -> Policy:
    return lambda feat, _rng: act(feat, agent.actor, deterministic=True)


def random_policy(feat: np.ndarray, rng: np.random.Generator) -> Action:
    return Action.from_array(rng.uniform(-1.0, 1.0, 2))


def evaluate(
    policy: Policy,
    world_cfg: WorldConfig,
    routes: Sequence[EvalRoute] | None = None,
    seed: int = 0,
    max_steps: int = 3000,
) -> EvalResult:
    """Drive each route once. Success means reaching the route's end; the reward apparatus must stay idle."""
    routes = list(routes) if routes is not None else load_eval_routes()
    cfg = replace(world_cfg, stop_at_destination=True)
    rng = np.random.default_rng([seed, 29])
    before = COUNTER.total()
    logs = []
    for k, route in enumerate(routes):
        state, obs = reset(cfg, seed=int(seed * 1_000 + k), route=route)
        log = EpisodeLog(k, route=route.name)
        while True:
            a = policy(featurize(obs, cfg.v_max_kmh, cfg.lane_half_width_m), rng)
            d0 = state.cumulative_distance_m
            state, obs, events = step(state, a)
            log.record(obs.vehicle.speed_kmh, state.cumulative_distance_m - d0)
            if events.collision:
                log.collisions += 1
                log.collision_speed_sum_kmh += events.collision_speed_kmh
                log.collision_steps.append(log.steps)
            log.routes_completed += events.route_completed_increment
            if state.status.terminal:
                log.reason = state.status.reason.value
                log.success = state.status.reason == TerminationReason.DESTINATION
                break
            if log.steps >= max_steps:
                log.reason = "timeout"
                break
        logs.append(log)
    calls = COUNTER.total() - before
    if calls:
        raise ContractViolation(f"evaluation touched the reward apparatus {calls} times")
    return EvalResult(logs, calls)


# ---------------------------------------------------------------- training


@dataclass
class SeedResult:
    seed: int
    report: RunReport
    agent: SAC
    eval: EvalResult | None = None
    train_metrics: MetricsRow | None = None


def train_seed(cfg: RunConfig, seed: int, routes: Sequence[EvalRoute] | None = None) -> SeedResult:
    agent = build_agent(cfg, seed)
    synth = build_synthesizer(cfg, seed)
    routes = list(routes) if routes is not None else _routes(cfg)
    hook = None
    if cfg.eval.during_training:
        def hook(step_, ag, _report):
            return evaluate(deterministic_policy(ag), cfg.world, routes, seed, cfg.eval.max_steps).sr
    stop = None
    if cfg.eval.stop_at_sr is not None:
        target = cfg.eval.stop_at_sr
        stop = lambda sr: sr >= target  # noqa: E731
    report = run(cfg.pipeline, cfg.world, synth, agent, cfg.total_steps, seed, hook, stop)
    result = SeedResult(seed, report, agent)
    if report.episodes:
        result.train_metrics = compute_metrics(report.episodes)
    result.eval = evaluate(deterministic_policy(agent), cfg.world, routes, seed, cfg.eval.max_steps)
    return result


def _routes(cfg: RunConfig) -> list[EvalRoute]:
    return load_eval_routes(cfg.eval.routes_path)


def metrics_csv(rows: dict[str, MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", *METRIC_NAMES])
    for name, r in rows.items():
        w.writerow([name, *(f"{getattr(r, m):.6f}" for m in METRIC_NAMES)])
    return buf.getvalue()


def run_training(cfg: RunConfig, out: Path) -> list[SeedResult]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(cfg.dump())
    results = []
    routes = _routes(cfg)
    rows: dict[str, MetricsRow] = {}
    eval_rows: dict[str, MetricsRow] = {}
    for seed in cfg.seeds:
        res = train_seed(cfg, seed, routes)
        results.append(res)
        d = out / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        (d / "summary.txt").write_text(res.report.summary())
        (d / "episodes.csv").write_text(logs_to_csv(res.report.episodes))
        (d / "curve.csv").write_text(res.report.curve_csv())
        (d / "descriptions.csv").write_text(res.report.descriptions_csv())
        (d / "eval.csv").write_text(logs_to_csv(res.eval.logs))
        res.agent.save(d / "checkpoint.npz")
        if res.train_metrics is not None:
            rows[f"train_seed_{seed}"] = res.train_metrics
        eval_rows[f"eval_seed_{seed}"] = compute_metrics(res.eval.logs)
    table = dict(rows)
    if rows:
        agg = aggregate(rows.values())
        table["train_mean"], table["train_std"] = agg.mean, agg.std
    table.update(eval_rows)
    agg = aggregate(eval_rows.values())
    table["eval_mean"], table["eval_std"] = agg.mean, agg.std
    (out / "metrics.csv").write_text(metrics_csv(table))
    (out / "summary.txt").write_text(training_summary(cfg, results))
    return results


def training_summary(cfg: RunConfig, results: Sequence[SeedResult]) -> str:
    lines = [f"experiment: {cfg.experiment}", f"mode: {cfg.synthesis.mode}", f"recall: {cfg.detector.recall}",
             f"steps per seed: {cfg.total_steps}", ""]
    for r in results:
        lines.append(
            f"seed {r.seed}: steps={r.report.total_steps} episodes={len(r.report.episodes)} "
            f"cumulative_collisions={r.report.cumulative_collisions} gate_rate={r.report.gate_rate:.4f} "
            f"eval_SR={r.eval.sr:.2f}"
        )
    coll = [r.report.cumulative_collisions for r in results]
    sr = [r.eval.sr for r in results]
    lines += ["", f"median cumulative collisions: {float(np.median(coll)):.1f}", f"mean eval SR: {np.mean(sr):.3f}"]
    return "\n".join(lines) + "\n"


def run_eval(cfg: RunConfig, out: Path) -> EvalResult:
    if not cfg.eval.checkpoint or not Path(cfg.eval.checkpoint).exists():
        raise InvalidInputError(f"eval needs an existing checkpoint, got {cfg.eval.checkpoint!r}")
    agent = SAC.load(cfg.eval.checkpoint)
    res = evaluate(deterministic_policy(agent), cfg.world, _routes(cfg), cfg.seeds[0], cfg.eval.max_steps)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(logs_to_csv(res.logs))
    m = compute_metrics(res.logs)
    (out / "metrics.csv").write_text(metrics_csv({"eval": m}))
    (out / "summary.txt").write_text(f"SR: {res.sr:.2f}\napparatus_calls: {res.apparatus_calls}\n")
    return res


# ---------------------------------------------------------------- gating efficiency


def engineered_trace(n_frames: int, n_critical: int, seed: int = 0) -> list[SceneDescriptor]:
    """Front frames of which exactly ``n_critical`` hold a pedestrian, spread evenly; the rest hold only cars."""
    rng = np.random.default_rng(seed)
    if not 0 <= n_critical <= n_frames:
        raise InvalidInputError("n_critical must lie in [0, n_frames]")
    critical_at = set(np.floor(np.arange(n_critical) * n_frames / max(n_critical, 1)).astype(int).tolist()) if n_critical else set()
    frames = []
    for i in range(n_frames):
        hz = [Hazard("vehicle", float(rng.uniform(26, 40)), 0.0, bool(rng.random() < 0.5), 0.0)]
        if i in critical_at:
            hz.append(Hazard("pedestrian", float(rng.uniform(5, 30)), 1.0, False, 0.3))
        hz.sort(key=lambda h: h.distance_m)
        frames.append(SceneDescriptor(View.FRONT, road_clear=True, collision_present=False, hazards=tuple(hz)))
    return frames


@dataclass
class GatingRow:
    episode: str
    frames: int
    gated: int
    gate_rate: float
    describer_calls: int
    time_gated_s: float
    time_ungated_s: float
    model_time_s: float
    savings: float
    model_savings: float


def replay_gating(
    name: str,
    frames: Sequence[SceneDescriptor],
    detector: Detector,
    t_det: float = 0.021,
    t_lvlm: float = 1.0,
    critical: CriticalClassSet = DEFAULT_CRITICAL,
    vocab: RiskVocabulary = DEFAULT_VOCABULARY,
) -> GatingRow:
    """Run detector, gate and describer over a fixed trajectory, charging simulated latencies."""
    clock = VirtualClock()
    buf = FrameBuffer()
    gated = calls = 0
    for i, f in enumerate(frames):
        window = buf.push(i, f)
        dets = detector(f)
        clock.charge("detector", t_det)
        if gate(dets, critical):
            gated += 1
            describe(window, dets, vocab, critical)
            calls += 1
            clock.charge("describer", t_lvlm)
    n = len(frames)
    if n == 0:
        raise InvalidInputError("empty trajectory")
    p = gated / n
    ungated = n * t_lvlm
    model = n * (t_det + p * t_lvlm)
    return GatingRow(name, n, gated, p, calls, clock.elapsed, ungated, model,
                     1.0 - clock.elapsed / ungated, savings(p, t_det, t_lvlm))


def simulated_trajectory(world_cfg: WorldConfig, seed: int, n_frames: int) -> list[SceneDescriptor]:
    """Front frames of a cautious scripted driver; used when no fixture is supplied."""
    from .world import observe

    state, obs = reset(world_cfg, seed=seed)
    frames = [obs.front]
    while len(frames) < n_frames:
        wp = obs.waypoints
        steer = float(np.clip(-2.0 * math.atan2(wp[2, 1], wp[2, 0]), -1, 1))
        ahead = [h.distance_m for h in obs.front.hazards if h.in_ego_lane]
        target = 20.0 if not ahead or min(ahead) > 20 else 5.0
        tb = float(np.clip(0.3 * (target - obs.vehicle.speed_kmh), -1, 1))
        state, obs, _ = step(state, Action(steer, tb))
        frames.append(obs.front)
        if state.status.terminal:
            state, obs = reset(world_cfg, seed=seed + 7919 * len(frames))
    return frames


def gating_rows_csv(rows: Sequence[GatingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(GatingRow.__dataclass_fields__)
    w.writerow(names)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in (getattr(r, k) for k in names)])
    return buf.getvalue()


def run_gating(cfg: RunConfig, out: Path, n_frames: int = 522) -> list[GatingRow]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(cfg.dump())
    rows = []
    crit = critical_set(cfg)
    for seed in cfg.seeds:
        det = Detector(cfg.detector, crit, np.random.default_rng([cfg.detector.seed, seed]))
        frames = simulated_trajectory(cfg.world, seed, n_frames)
        rows.append(replay_gating(f"seed_{seed}", frames, det, cfg.pipeline.t_det, cfg.pipeline.t_lvlm, crit))
    (out / "gating.csv").write_text(gating_rows_csv(rows))
    lines = [f"{r.episode}: frames={r.frames} gated={r.gated} rate={r.gate_rate:.3f} savings={r.savings:.3f}" for r in rows]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class Comparison:
    metric: str
    statistic: str
    per_seed: dict[int, float]  # relative difference (A - B) / B
    per_seed_log_ratio: dict[int, float]  # log(A / B), exactly antisymmetric
    relative: float
    log_ratio: float

    @property
    def percent(self) -> float:
        return 100.0 * self.relative

    def describe(self) -> str:
        if self.relative == 0:
            return f"{self.metric}: no difference"
        word = "fewer" if self.relative < 0 else "more"
        return f"{self.metric}: A has {abs(self.percent):.1f}% {word} than B ({self.statistic} over seeds)"


def compare_arms(a: dict, b: dict, metric: str = "cumulative_collisions", statistic: str = "median") -> Comparison:
    """``a`` and ``b`` map ``"budget"`` to the step budget and ``"seeds"`` to {seed: {metric: value}}."""
    if a.get("budget") != b.get("budget"):
        raise InvalidComparisonError("step budgets differ")
    if set(a["seeds"]) != set(b["seeds"]):
        raise InvalidComparisonError("seed lists differ")
    agg = {"median": np.median, "mean": np.mean}.get(statistic)
    if agg is None:
        raise InvalidComparisonError(f"unknown statistic {statistic!r}")
    rel, lr = {}, {}
    for s in sorted(a["seeds"]):
        va, vb = float(a["seeds"][s][metric]), float(b["seeds"][s][metric])
        rel[s] = (va - vb) / vb if vb else (0.0 if va == vb else math.copysign(math.inf, va - vb))
        lr[s] = math.log(va / vb) if va > 0 and vb > 0 else (0.0 if va == vb else math.copysign(math.inf, va - vb))
    va = float(agg([a["seeds"][s][metric] for s in a["seeds"]]))
    vb = float(agg([b["seeds"][s][metric] for s in b["seeds"]]))
    relative = (va - vb) / vb if vb else (0.0 if va == vb else math.copysign(math.inf, va - vb))
    log_ratio = math.log(va / vb) if va > 0 and vb > 0 else (0.0 if va == vb else math.copysign(math.inf, va - vb))
    return Comparison(metric, statistic, rel, lr, relative, log_ratio)


def arm_summary(results: Sequence[SeedResult], budget: int) -> dict:
    return {
        "budget": budget,
        "seeds": {r.seed: {"cumulative_collisions": r.report.cumulative_collisions, "SR": r.eval.sr if r.eval else float("nan")}
                  for r in results},
    }


def read_arm_summary(run_dir: Path) -> dict:
    """Rebuild an arm summary from a training output directory."""
    import yaml

    cfg = yaml.safe_load((run_dir / "resolved_config.yaml").read_text())
    seeds = {}
    for s in cfg["seeds"]:
        d = run_dir / f"seed_{s}"
        summary = dict(line.split(": ", 1) for line in (d / "summary.txt").read_text().splitlines() if ": " in line)
        evals = list(csv.DictReader(io.StringIO((d / "eval.csv").read_text())))
        seeds[int(s)] = {
            "cumulative_collisions": int(summary["cumulative_collisions"]),
            "SR": sum(e["success"] == "True" for e in evals) / len(evals) if evals else float("nan"),
        }
    return {"budget": int(cfg["total_steps"]), "seeds": seeds}
