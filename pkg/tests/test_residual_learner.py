import numpy as np
import pytest
import torch

from residrl.base_trainer import BaseAgent
from residrl.config import DemoConfig, RlpdConfig
from residrl.domain import real_domain, sim_domain
from residrl.errors import CalibrationError
from residrl.geom import ActionDelta, clamp_action
from residrl.networks import flat_parameters, load_flat_parameters
from residrl.replay import ReplayStore, symmetric_sample
from residrl.residual_learner import (
    PolicyStack,
    ResidualAgent,
    actor_step,
    collect_demos,
    combine,
    critic_target,
    pseudo_label,
    relabel_for_zero_base,
    rlpd_update,
    train_residual,
)
from residrl.seeding import make_rng
from residrl.sim import InsertionEnv

from .conftest import ScriptedBase, make_trajectory, make_transition

STATE_CFG = RlpdConfig(batch_size=8, utd_ratio=2, hidden_size=16, use_images=False)


def _state_store(image_size: int = 4) -> ReplayStore:
    store = ReplayStore(10, 100, (2, image_size, image_size))
    store.add_demo(make_trajectory(6, image_size=image_size))
    for i in range(10):
        store.append_online(make_transition(image_size=image_size, reward=float(i % 2)))
    return store


def test_combine():
    assert combine([0.3, -0.2, 0.1], np.zeros(3)) == ActionDelta(0.3, -0.2, 0.1)
    assert combine([0.8, 0.0, 0.0], [0.5, 0.0, 0.0]) == ActionDelta(1.0, 0.0, 0.0)
    assert combine(ActionDelta(-0.9, 0.0, 0.0), ActionDelta(-0.5, 0.2, 0.0)) == ActionDelta(-1.0, 0.2, 0.0)


def test_pseudo_labels_preserve_the_base_distribution():
    mean = np.array([0.1, -0.2, 0.3])
    std = np.array([0.5, 0.2, 0.1])
    rng = make_rng(0)
    n = 20000
    executed = np.array([np.add(*pseudo_label(mean, std, rng)) for _ in range(n)])
    assert np.all(np.abs(executed.mean(axis=0) - mean) < 5.0 * std / np.sqrt(n))
    np.testing.assert_allclose(executed.std(axis=0), std, rtol=0.03)


def test_degenerate_std_gives_zero_residual():
    a_b, a_r = pseudo_label(np.array([0.2, 0.0, -0.1]), np.zeros(3), make_rng(0))
    assert np.all(a_r == 0.0)
    np.testing.assert_array_equal(a_b, [0.2, 0.0, -0.1])


def test_critic_target():
    assert critic_target(0.0, 0.0, 0.99, 2.0, -0.1) == pytest.approx(2.079)
    assert critic_target(1.0, 1.0, 0.99, 123.0, 5.0) == 1.0


def test_warm_start_is_identity_over_base():
    base = BaseAgent(hidden=16, seed=0).policy
    agent = ResidualAgent(RlpdConfig(hidden_size=16), image_size=32, seed=1)
    stack = PolicyStack(base, agent.actor, name="residual")
    env = InsertionEnv(real_domain())
    for seed in range(100):
        base_obs, res_obs = env.reset(seed)
        a_b, a_r, executed = stack.act(base_obs, res_obs)
        assert np.all(a_r == 0.0)
        assert executed == clamp_action(a_b)


def test_residual_std_starts_at_configured_value():
    agent = ResidualAgent(STATE_CFG, image_size=4, seed=0)
    _, std = agent.actor(None, np.zeros((2, 9)), np.zeros((2, 3)), np.zeros((2, 3)))
    torch.testing.assert_close(std, torch.full((2, 3), 0.1, dtype=torch.float64))


def test_relabel_for_zero_base():
    traj = make_trajectory(4)
    relabelled = relabel_for_zero_base(traj)
    assert np.all(relabelled.base_actions == 0.0)
    np.testing.assert_allclose(relabelled.residual_actions, traj.base_actions[:-1] + traj.residual_actions)
    np.testing.assert_array_equal(relabelled.rewards, traj.rewards)


@pytest.mark.parametrize("flag", [True, False])
def test_base_action_input_flag(flag):
    cfg = RlpdConfig(hidden_size=16, use_images=False, base_action_input=flag)
    agent = ResidualAgent(cfg, image_size=4, seed=0)
    rng = make_rng(1)
    load_flat_parameters(agent, rng.normal(scale=0.3, size=flat_parameters(agent).size))
    proprio, goal = rng.normal(size=(4, 9)), rng.normal(size=(4, 3))
    a_r = rng.normal(size=(4, 3))
    low, high = np.full((4, 3), -0.5), np.full((4, 3), 0.5)
    mean_low, _ = agent.actor(None, proprio, goal, low)
    mean_high, _ = agent.actor(None, proprio, goal, high)
    q_low = agent.critic(None, proprio, goal, low, a_r)
    q_high = agent.critic(None, proprio, goal, high, a_r)
    assert ("base_action" in agent.actor.head.layout.names) is flag
    assert torch.equal(mean_low, mean_high) is not flag
    assert torch.equal(q_low, q_high) is not flag


def test_rlpd_update_moves_critic_and_target():
    agent = ResidualAgent(STATE_CFG, image_size=4, seed=0)
    store = _state_store()
    critic_before = flat_parameters(agent.critic)
    target_before = flat_parameters(agent.target_critic)
    stats = rlpd_update(agent, store, STATE_CFG, make_rng(0))
    assert {"critic_loss", "q_mean", "actor_loss", "alpha", "entropy"} <= set(stats)
    assert all(np.isfinite(v) for v in stats.values())
    critic_after = flat_parameters(agent.critic)
    target_after = flat_parameters(agent.target_critic)
    assert not np.array_equal(critic_before, critic_after)
    assert not np.array_equal(target_before, target_after)
    assert not np.array_equal(target_after, critic_after)
    assert store.warmup_batches == 0


def test_actor_step_ascends_q():
    cfg = RlpdConfig(batch_size=8, hidden_size=16, use_images=False, actor_lr=1e-5, init_temperature=1e-8)
    agent = ResidualAgent(cfg, image_size=4, seed=2)
    batch = symmetric_sample(_state_store(), 8, make_rng(0))
    obs = (batch["images"], batch["proprio"], batch["goal"], batch["base_action"])

    def mean_min_q():
        with torch.no_grad():
            a_r, _ = agent.actor.rsample(*obs, make_rng(9))
            return float(agent.critic(*obs, a_r).min(dim=0).values.mean())

    before = mean_min_q()
    actor_step(agent, batch, make_rng(9))
    assert mean_min_q() >= before


def test_zero_budget_returns_initial_residual():
    cfg = RlpdConfig(max_env_steps=0, hidden_size=16, use_images=False)
    result = train_residual(None, sim_domain(), [make_trajectory(3, image_size=32)], cfg, seed=3,
                            verbose=False, progress=False)
    fresh = ResidualAgent(cfg, image_size=32, seed=3)
    np.testing.assert_array_equal(flat_parameters(result.agent), flat_parameters(fresh))
    assert result.env_steps == 0 and result.metrics.empty


def test_train_residual_needs_demos():
    with pytest.raises(ValueError):
        train_residual(None, sim_domain(), [], STATE_CFG, seed=0, verbose=False, progress=False)


def test_calibration_floor_aborts_collection():
    cfg = DemoConfig(calibration_window=3, calibration_floor=0.5)
    with pytest.raises(CalibrationError) as info:
        collect_demos(None, sim_domain(horizon=5), 2, seed=0, cfg=cfg, verbose=False, progress=False)
    assert info.value.exit_code == 3
    with pytest.raises(CalibrationError):
        collect_demos(None, sim_domain(horizon=5), 2, seed=0, cfg=DemoConfig(calibration_floor=0.0, max_attempts=2),
                      verbose=False, progress=False)


@pytest.mark.slow
def test_collect_demos_with_a_competent_base():
    domain = sim_domain()
    first = collect_demos(ScriptedBase(), domain, 2, seed=5, verbose=False, progress=False)
    second = collect_demos(ScriptedBase(), domain, 2, seed=5, verbose=False, progress=False)
    assert len(first.trajectories) == 2 and first.attempts >= 2
    assert all(t.success for t in first.trajectories)
    for a, b in zip(first.trajectories, second.trajectories):
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.residual_actions, b.residual_actions)


@pytest.mark.slow
def test_recorded_demo_actions_follow_the_base_distribution():
    base = ScriptedBase(std=0.05)
    domain = sim_domain()
    residuals, seed = [], 0
    while sum(len(r) for r in residuals) < 10_000:
        collection = collect_demos(base, domain, 50, seed=seed, verbose=False, progress=False)
        for traj in collection.trajectories:
            # pre-clamp executed action minus the recorded base mean
            executed = traj.base_actions[:-1] + traj.residual_actions
            residuals.append(executed - traj.base_actions[:-1])
            assert np.all(np.abs(traj.base_actions) <= 1.0)
        seed += 1
    z = np.concatenate(residuals) / base.std
    n = len(z)
    assert np.all(np.abs(z.mean(axis=0)) < 3.0 / np.sqrt(n))
    ratio = z.var(axis=0, ddof=1)
    assert np.all((0.9 <= ratio) & (ratio <= 1.1))


@pytest.mark.slow
def test_short_residual_run():
    domain = sim_domain(horizon=40)
    demos = collect_demos(ScriptedBase(), domain, 2, seed=0, verbose=False, progress=False).trajectories
    cfg = RlpdConfig(batch_size=8, hidden_size=16, max_env_steps=30, eval_every=15, use_images=False)
    calls = []

    def evaluator(stack, env_step):
        calls.append(env_step)
        return {"success_rate": 0.5, "mean_cycle_time_s": 1.0}

    result = train_residual(ScriptedBase(), domain, demos, cfg, seed=0, evaluator=evaluator,
                            verbose=False, progress=False)
    assert calls == [15, 30]
    assert list(result.metrics["env_step"]) == [15, 30]
    assert len(result.store.online) == 30
    assert result.metrics["eval_success"].tolist() == [0.5, 0.5]
