import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualpath.apparatus import COUNTER
from dualpath.errors import ConfigurationError, ContractViolation, InvalidInputError
from dualpath.learner import (
    FEATURE_DIM,
    LOG_STD_MAX,
    LOG_STD_MIN,
    MLP,
    SAC,
    Batch,
    SacConfig,
    act,
    featurize,
    soft_update,
    tanh_log_det,
)
from dualpath.world import Action, WorldConfig, reset, step

F64 = dict(dtype="float64")


def _const_head(net: MLP, value: float) -> None:
    net.params[-2][...] = 0.0
    net.params[-1][...] = value


def _toy_batch(n=1, obs_dim=1, r=1.0, done=0.0):
    return Batch(np.zeros((n, obs_dim)), np.zeros((n, 2)), np.full(n, r), np.zeros((n, obs_dim)), np.full(n, done))


def test_hand_set_critic_loss():
    ag = SAC(1, SacConfig(gamma=0.9, entropy_coef=0.0, hidden=(4,), **F64))
    for net, v in ((ag.q1, 0.5), (ag.q2, 0.5), (ag.q1_targ, 0.4), (ag.q2_targ, 0.4)):
        _const_head(net, v)
    b = _toy_batch()
    y = ag.targets(b)
    assert y[0] == pytest.approx(1.36)
    loss, _ = ag.critic_loss_and_grads(b, y)
    # oracle: 0.5 * (0.5 - 1.36)^2
    assert loss == pytest.approx(0.3698)
    assert ag.critic_update(b) == pytest.approx(0.3698)


def test_myopic_target_is_reward():
    ag = SAC(3, SacConfig(gamma=0.0, hidden=(8,), **F64))
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=(6, 3)), rng.uniform(-1, 1, (6, 2)), rng.normal(size=6), rng.normal(size=(6, 3)), np.zeros(6))
    assert np.array_equal(ag.targets(b), b.rew)


def test_terminal_transitions_do_not_bootstrap():
    ag = SAC(1, SacConfig(gamma=0.9, hidden=(4,), **F64))
    assert ag.targets(_toy_batch(r=0.25, done=1.0))[0] == 0.25


def test_constant_critic_targets_stay_in_reward_interval():
    ag = SAC(4, SacConfig(gamma=0.99, entropy_coef=0.0, hidden=(8,), **F64))
    _const_head(ag.q1_targ, 3.0)
    _const_head(ag.q2_targ, 2.0)
    rng = np.random.default_rng(1)
    r = rng.uniform(-10, 1, 500)
    b = Batch(rng.normal(size=(500, 4)), rng.uniform(-1, 1, (500, 2)), r, rng.normal(size=(500, 4)), np.zeros(500))
    y = ag.targets(b)
    assert np.all(y >= -10 + 0.99 * 2.0 - 1e-12) and np.all(y <= 1 + 0.99 * 2.0 + 1e-12)


def test_unannotated_batch_is_rejected():
    with pytest.raises(ContractViolation):
        Batch(np.zeros((2, 1)), np.zeros((2, 2)), np.array([1.0, np.nan]), np.zeros((2, 1)), np.zeros(2))


def _fd(net, lossf, h=1e-6):
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            o = p[i]
            p[i] = o + h
            lp = lossf()
            p[i] = o - h
            lm = lossf()
            p[i] = o
            g[i] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def _rel_err(a, b):
    return max(np.max(np.abs(x - y)) / (np.max(np.abs(y)) + 1e-12) for x, y in zip(a, b))


def _grad_setup(seed):
    rng = np.random.default_rng(seed)
    ag = SAC(3, SacConfig(hidden=(4,), entropy_coef=0.3, seed=seed, **F64))
    n = 5
    b = Batch(rng.normal(size=(n, 3)), np.tanh(rng.normal(size=(n, 2))), rng.normal(size=n), rng.normal(size=(n, 3)), np.zeros(n))
    return ag, b, rng.normal(size=(n, 2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_actor_gradient_matches_finite_differences(seed):
    ag, b, eps = _grad_setup(seed)
    assert ag.actor.n_params <= 100
    _, g = ag.actor_loss_and_grads(b, eps)
    assert _rel_err(g, _fd(ag.actor, lambda: ag.actor_loss_and_grads(b, eps)[0])) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_critic_gradient_matches_finite_differences(seed):
    ag, b, eps = _grad_setup(seed)
    y = ag.targets(b, eps)
    _, g = ag.critic_loss_and_grads(b, y)
    fd = _fd(ag.q1, lambda: ag.critic_loss_and_grads(b, y)[0]) + _fd(ag.q2, lambda: ag.critic_loss_and_grads(b, y)[0])
    assert _rel_err(g, fd) < 1e-4


def test_clipped_log_std_has_zero_gradient():
    ag, b, eps = _grad_setup(0)
    ag.actor.params[-1][2:] = 10.0  # raw log-std far above the clip
    _, g = ag.actor_loss_and_grads(b, eps)
    assert np.all(g[-1][2:] == 0.0)
    assert np.all(g[-2][:, 2:] == 0.0)


def test_flat_critic_gives_zero_mean_gradient():
    ag, b, eps = _grad_setup(0)
    ag.cfg.entropy_coef = 0.0
    for net in (ag.q1, ag.q2):
        _const_head(net, 1.0)
    _, g = ag.actor_loss_and_grads(b, eps)
    assert np.allclose(g[-1][:2], 0.0) and np.allclose(g[-2][:, :2], 0.0)


def _squashed_entropy_argmax() -> float:
    # oracle: Monte-Carlo entropy of tanh(N(0, sigma)) over a log-std grid
    eps = np.random.default_rng(0).standard_normal(200_000)
    grid = np.linspace(-2, 1, 61)
    h = [np.mean(ls + 0.5 * eps**2 + np.log(1 - np.tanh(np.exp(ls) * eps) ** 2 + 1e-300)) for ls in grid]
    return float(grid[int(np.argmax(h))])


@pytest.mark.parametrize("start", [-3.0, 1.5])
def test_large_entropy_coefficient_moves_log_std_toward_max_entropy(start):
    ag = SAC(3, SacConfig(hidden=(16,), entropy_coef=50.0, actor_lr=1e-3, **F64))
    ag.actor.params[-2][:, 2:] = 0.0
    ag.actor.params[-1][2:] = start
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=(64, 3)), rng.uniform(-1, 1, (64, 2)), np.zeros(64), rng.normal(size=(64, 3)), np.zeros(64))
    trace = []
    for _ in range(100):
        ag.actor_update(b)
        trace.append(ag.policy(b.obs, np.zeros((64, 2))).log_std.mean())
    target = _squashed_entropy_argmax()
    assert abs(trace[-1] - target) < abs(start - target)
    if start < target:
        # the narrow policy widens: entropy dominates the flat critic
        assert trace[-1] > trace[0] > start


def test_stable_tanh_log_det():
    u = np.array([-30.0, -2.0, 0.0, 0.5, 30.0])
    naive = np.log(1 - np.tanh(u[1:4]) ** 2)
    got = tanh_log_det(u)
    assert np.allclose(got[1:4], naive)
    assert np.all(np.isfinite(got))
    # oracle: log(1 - tanh^2 u) -> log 4 - 2|u| for large |u|
    assert got[0] == pytest.approx(np.log(4) - 60) and got[-1] == pytest.approx(np.log(4) - 60)


@pytest.mark.parametrize("tau,expected", [(1.0, 2.0), (0.0, 0.0), (0.5, 1.0)])
def test_soft_update(tau, expected):
    target, online = [np.zeros(3)], [np.full(3, 2.0)]
    soft_update(target, online, tau)
    assert np.all(target[0] == expected)


def test_targets_start_equal_to_online():
    ag = SAC()
    for a, b in ((ag.q1, ag.q1_targ), (ag.q2, ag.q2_targ)):
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    with pytest.raises(ConfigurationError):
        soft_update([np.zeros(1)], [np.ones(1)], 1.5)


def _features(seed=0):
    _, obs = reset(WorldConfig(), seed=seed)
    return featurize(obs)


def test_featurize_shape_and_range():
    f = _features()
    assert f.shape == (FEATURE_DIM,) and np.all(np.isfinite(f))
    assert np.all(f[-48:] >= 0) and np.all(f[-48:] <= 1)


def test_deterministic_action_is_repeatable():
    ag = SAC()
    f = _features()
    assert ag.act(f, deterministic=True) == ag.act(f, deterministic=True)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_actions_are_bounded(seed, deterministic):
    ag = SAC(5, SacConfig(hidden=(8,), seed=seed % 1000))
    x = np.random.default_rng(seed).normal(0, 50, 5)
    a = act(x, ag.actor, deterministic, np.random.default_rng(seed))
    assert -1 <= a.steer <= 1 and -1 <= a.throttle_brake <= 1


def test_act_validates_input():
    ag = SAC(5, SacConfig(hidden=(8,)))
    with pytest.raises(InvalidInputError):
        act(np.zeros(4), ag.actor, True)
    with pytest.raises(InvalidInputError):
        act(np.zeros(5), ag.actor, False, None)


def test_policy_rollout_makes_no_reward_calls():
    ag = SAC()
    state, obs = reset(WorldConfig(), seed=4)
    before = COUNTER.total()
    for _ in range(500):
        state, obs, _ = step(state, ag.act(featurize(obs), deterministic=True))
        if state.status.terminal:
            state, obs = reset(WorldConfig(), seed=5)
    assert COUNTER.total() == before


def test_checkpoint_round_trip(tmp_path):
    ag = SAC(FEATURE_DIM, SacConfig(hidden=(16, 16), seed=3))
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=(32, FEATURE_DIM)), rng.uniform(-1, 1, (32, 2)), rng.normal(size=32),
              rng.normal(size=(32, FEATURE_DIM)), np.zeros(32))
    for _ in range(3):
        ag.update(b)
    p = tmp_path / "ck.npz"
    ag.save(p)
    back = SAC.load(p)
    assert back.updates == 3 and back.cfg == ag.cfg
    for name, net in ag.networks().items():
        assert all(np.array_equal(x, y) for x, y in zip(net.params, back.networks()[name].params))
    f = _features()
    assert back.act(f, deterministic=True) == ag.act(f, deterministic=True)


def test_config_ranges():
    for bad in ({"gamma": 1.0}, {"tau": 0.0}, {"entropy_coef": -1}, {"dtype": "float16"}):
        with pytest.raises(ConfigurationError):
            SacConfig(**bad)
    assert SacConfig.from_dict(SacConfig().to_dict()) == SacConfig()


def test_log_std_bounds():
    assert (LOG_STD_MIN, LOG_STD_MAX) == (-5.0, 2.0)
    ag = SAC(2, SacConfig(hidden=(4,), **F64))
    ag.actor.params[-1][2:] = -40.0
    s = ag.policy(np.zeros((3, 2)))
    assert np.all(s.log_std == LOG_STD_MIN) and np.all(s.clipped[:, :])


def test_updates_stay_finite_and_move_the_actor():
    ag = SAC(FEATURE_DIM, SacConfig(hidden=(16, 16), batch_size=16))
    before = [p.copy() for p in ag.actor.params]
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=(16, FEATURE_DIM)), rng.uniform(-1, 1, (16, 2)), rng.uniform(0, 1, 16),
              rng.normal(size=(16, FEATURE_DIM)), np.zeros(16))
    for _ in range(20):
        lc, la = ag.update(b)
        assert np.isfinite(lc) and np.isfinite(la)
    assert any(not np.array_equal(x, y) for x, y in zip(before, ag.actor.params))
