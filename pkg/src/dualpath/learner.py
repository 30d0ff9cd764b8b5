"""Soft actor-critic on small numpy MLPs with hand-written backprop."""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from .embedding import SceneDescriptor
from .errors import ConfigurationError, ContractViolation, InvalidInputError
from .world import N_WAYPOINTS, Action, Observation

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
ACT_DIM = 2
LOG2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# BEV occupancy grid: in-lane / out-of-lane x sectors x distance rings
N_SECTORS = 8
RINGS_M = (8.0, 16.0, 32.0)
FRONT_RANGE_M = 40.0


def _scene_grid(scene: SceneDescriptor) -> np.ndarray:
    grid = np.zeros((2, N_SECTORS, len(RINGS_M)))
    for h in scene.hazards:
        ring = int(np.searchsorted(RINGS_M, h.distance_m, side="right"))
        if ring >= len(RINGS_M):
            continue
        sector = int(((h.bearing_rad + math.pi) / (2 * math.pi)) * N_SECTORS) % N_SECTORS
        grid[0 if h.in_ego_lane else 1, sector, ring] += 1.0
    return np.minimum(grid, 3.0) / 3.0


def featurize(obs: Observation, v_max_kmh: float = 30.0, lane_half_width: float = 2.0) -> np.ndarray:
    """Fixed-length numeric summary of an observation."""
    steer, tb, speed = obs.ego_state
    veh = obs.vehicle
    ahead = [h for h in obs.front.hazards if h.in_ego_lane]
    if ahead:
        near = min(ahead, key=lambda h: h.distance_m)
        front = (1.0, near.distance_m / FRONT_RANGE_M, np.clip(near.closing_speed_mps / 10.0, -2, 2))
    else:
        front = (0.0, 1.0, 0.0)
    head = np.array([
        steer,
        tb,
        speed / v_max_kmh,
        veh.lateral_deviation_m / lane_half_width,
        veh.heading_error_rad,
        veh.lateral_velocity_mps / 2.0,
        *front,
    ])
    wp = np.asarray(obs.waypoints, dtype=float).ravel() / (2.0 * N_WAYPOINTS)
    return np.concatenate([head, wp, _scene_grid(obs.bev).ravel()])


FEATURE_DIM = 9 + 2 * N_WAYPOINTS + 2 * N_SECTORS * len(RINGS_M)


# ---------------------------------------------------------------- networks


class MLP:
    """ReLU multilayer perceptron with a linear head; caches activations for backprop."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float64):
        self.sizes = list(sizes)
        self.params: list[np.ndarray] = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            self.params.append(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype))
            self.params.append(rng.uniform(-bound, bound, n_out).astype(dtype))

    @property
    def dtype(self):
        return self.params[0].dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        n = len(self.params) // 2
        for k in range(n):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < n - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray, need_input: bool = False):
        """Parameter gradients (and optionally the input gradient) for ``grad_out`` = dL/d(output)."""
        n = len(self.params) // 2
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = grad_out
        for k in range(n - 1, -1, -1):
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0 or need_input:
                g = g @ self.params[2 * k].T
                if k > 0:
                    g = g * (acts[k] > 0)
        return grads, (g if need_input else None)

    def copy_from(self, other: "MLP") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def clone(self) -> "MLP":
        m = MLP.__new__(MLP)
        m.sizes = list(self.sizes)
        m.params = [p.copy() for p in self.params]
        return m


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- SAC


@dataclass
class SacConfig:
    gamma: float = 0.99
    entropy_coef: float = 0.2
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    batch_size: int = 128
    hidden: tuple[int, ...] = (64, 64)
    dtype: str = "float32"  # float64 for gradient checks
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if self.entropy_coef < 0.0:
            raise ConfigurationError("entropy coefficient must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        if self.batch_size < 1 or self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigurationError("batch size and learning rates must be positive")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "SacConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown learner options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    ready: np.ndarray | None = None

    def __post_init__(self):
        if self.ready is not None and not np.all(self.ready):
            raise ContractViolation("batch contains unannotated transitions")
        if not np.all(np.isfinite(self.rew)):
            raise ContractViolation("batch contains a placeholder reward")


@dataclass
class PolicySample:
    action: np.ndarray
    logp: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    log_std: np.ndarray
    clipped: np.ndarray
    acts: list = field(repr=False, default_factory=list)


def tanh_log_det(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), evaluated without cancellation."""
    return 2.0 * (LOG2 - u - np.logaddexp(0.0, -2.0 * u))


class SAC:
    def __init__(self, obs_dim: int = FEATURE_DIM, cfg: SacConfig | None = None, act_dim: int = ACT_DIM):
        self.cfg = cfg or SacConfig()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        rng = np.random.default_rng(self.cfg.seed)
        h = list(self.cfg.hidden)
        dt = np.dtype(self.cfg.dtype)
        self.actor = MLP([obs_dim, *h, 2 * act_dim], rng, dt)
        self.q1 = MLP([obs_dim + act_dim, *h, 1], rng, dt)
        self.q2 = MLP([obs_dim + act_dim, *h, 1], rng, dt)
        self.q1_targ = self.q1.clone()
        self.q2_targ = self.q2.clone()
        self.actor_opt = Adam(self.actor.params, self.cfg.actor_lr)
        self.critic_opt = Adam(self.q1.params + self.q2.params, self.cfg.critic_lr)
        self.rng = np.random.default_rng(self.cfg.seed + 1)
        self.updates = 0

    # -- policy

    def policy(self, obs: np.ndarray, eps: np.ndarray | None = None) -> PolicySample:
        out, acts = self.actor.forward(obs)
        mean, raw_log_std = out[:, : self.act_dim], out[:, self.act_dim :]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        clipped = (raw_log_std < LOG_STD_MIN) | (raw_log_std > LOG_STD_MAX)
        if eps is None:
            eps = self.rng.standard_normal(mean.shape).astype(mean.dtype)
        u = mean + np.exp(log_std) * eps
        a = np.tanh(u)
        logp = np.sum(-0.5 * eps**2 - log_std - HALF_LOG_2PI - tanh_log_det(u), axis=1)
        return PolicySample(a, logp, u, eps, log_std, clipped, acts)

    def act(self, features: np.ndarray, deterministic: bool = False, rng: np.random.Generator | None = None) -> Action:
        return act(features, self.actor, deterministic, rng or self.rng)

    # -- critic

    def q_values(self, obs, act):
        x = np.concatenate([obs, act], axis=1)
        q1, a1 = self.q1.forward(x)
        q2, a2 = self.q2.forward(x)
        return q1[:, 0], q2[:, 0], a1, a2

    def targets(self, b: Batch, eps: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        nxt = self.policy(b.next_obs, eps)
        x = np.concatenate([b.next_obs, nxt.action], axis=1)
        q1t = self.q1_targ.forward(x)[0][:, 0]
        q2t = self.q2_targ.forward(x)[0][:, 0]
        soft = np.minimum(q1t, q2t) - cfg.entropy_coef * nxt.logp
        return b.rew + cfg.gamma * (1.0 - b.done) * soft

    def critic_loss_and_grads(self, b: Batch, y: np.ndarray):
        q1, q2, a1, a2 = self.q_values(b.obs, b.act)
        n = len(y)
        r1, r2 = q1 - y, q2 - y
        loss = 0.5 * (0.5 * np.mean(r1**2) + 0.5 * np.mean(r2**2))
        g1, _ = self.q1.backward(a1, (0.5 * r1 / n)[:, None])
        g2, _ = self.q2.backward(a2, (0.5 * r2 / n)[:, None])
        return float(loss), g1 + g2

    def critic_update(self, b: Batch, eps: np.ndarray | None = None) -> float:
        y = self.targets(b, eps)
        loss, grads = self.critic_loss_and_grads(b, y)
        self.critic_opt.step(grads)
        return loss

    # -- actor

    def actor_loss_and_grads(self, b: Batch, eps: np.ndarray | None = None):
        lam = self.cfg.entropy_coef
        s = self.policy(b.obs, eps)
        n = len(b.obs)
        x = np.concatenate([b.obs, s.action], axis=1)
        q1, a1 = self.q1.forward(x)
        q2, a2 = self.q2.forward(x)
        q1, q2 = q1[:, 0], q2[:, 0]
        use1 = (q1 <= q2).astype(float)
        qmin = np.where(use1 > 0, q1, q2)
        loss = float(np.mean(lam * s.logp - qmin))
        # dL/dq through the min, back to the action input of each critic
        _, gx1 = self.q1.backward(a1, (-use1 / n)[:, None], need_input=True)
        _, gx2 = self.q2.backward(a2, (-(1.0 - use1) / n)[:, None], need_input=True)
        d_a = (gx1 + gx2)[:, self.obs_dim :]
        a = s.action
        # logp carries -log(1 - tanh^2 u), whose derivative in u is 2 tanh u
        d_u = d_a * (1.0 - a**2) + (lam / n) * 2.0 * a
        std = np.exp(s.log_std)
        d_mean = d_u
        d_log_std = d_u * s.eps * std - lam / n
        d_log_std = np.where(s.clipped, 0.0, d_log_std)
        grads, _ = self.actor.backward(s.acts, np.concatenate([d_mean, d_log_std], axis=1))
        return loss, grads

    def actor_update(self, b: Batch, eps: np.ndarray | None = None) -> float:
        loss, grads = self.actor_loss_and_grads(b, eps)
        self.actor_opt.step(grads)
        return loss

    def soft_update(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        for online, target in ((self.q1, self.q1_targ), (self.q2, self.q2_targ)):
            soft_update(target.params, online.params, tau)

    def cast(self, b: Batch) -> Batch:
        dt = self.actor.dtype
        if b.obs.dtype == dt:
            return b
        return Batch(b.obs.astype(dt), b.act.astype(dt), b.rew.astype(dt), b.next_obs.astype(dt), b.done.astype(dt))

    def update(self, b: Batch) -> tuple[float, float]:
        b = self.cast(b)
        lc = self.critic_update(b)
        la = self.actor_update(b)
        self.soft_update()
        self.updates += 1
        return lc, la

    # -- persistence

    def networks(self) -> dict[str, MLP]:
        return {"actor": self.actor, "q1": self.q1, "q2": self.q2, "q1_targ": self.q1_targ, "q2_targ": self.q2_targ}

    def save(self, path) -> None:
        """npz archive; arrays named ``<net>/<index>`` in layer order (W0, b0, W1, b1, ...)."""
        arrays = {"format_version": np.array(1), "obs_dim": np.array(self.obs_dim), "updates": np.array(self.updates)}
        for name, net in self.networks().items():
            for i, p in enumerate(net.params):
                arrays[f"{name}/{i}"] = p
        buf = io.BytesIO()
        np.savez(buf, config=np.array(repr(self.cfg.to_dict())), **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "SAC":
        import ast

        with np.load(path) as z:
            if int(z["format_version"]) != 1:
                raise InvalidInputError("unsupported checkpoint version")
            cfg = SacConfig.from_dict(ast.literal_eval(str(z["config"])))
            agent = cls(int(z["obs_dim"]), cfg)
            for name, net in agent.networks().items():
                for i, p in enumerate(net.params):
                    p[...] = z[f"{name}/{i}"]
            agent.updates = int(z["updates"])
        return agent


def act(features: np.ndarray, actor: MLP, deterministic: bool = False, rng: np.random.Generator | None = None) -> Action:
    """Squashed mean (deterministic) or a squashed Gaussian sample from ``actor``."""
    x = np.atleast_2d(features).astype(actor.dtype, copy=False)
    if x.shape[1] != actor.sizes[0]:
        raise InvalidInputError(f"expected {actor.sizes[0]} features, got {x.shape[1]}")
    out, _ = actor.forward(x)
    k = out.shape[1] // 2
    mean = out[0, :k]
    if deterministic:
        return Action.from_array(np.tanh(mean))
    if rng is None:
        raise InvalidInputError("stochastic action needs a generator")
    log_std = np.clip(out[0, k:], LOG_STD_MIN, LOG_STD_MAX)
    return Action.from_array(np.tanh(mean + np.exp(log_std) * rng.standard_normal(k)))


def soft_update(target: list[np.ndarray], online: list[np.ndarray], tau: float) -> None:
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError("tau must lie in [0, 1]")
    for t, o in zip(target, online):
        t *= 1.0 - tau
        t += tau * o
