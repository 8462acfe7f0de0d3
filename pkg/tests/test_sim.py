from dataclasses import fields, replace

import numpy as np
import pytest
from scipy import stats

from residrl.domain import real_domain, sim_domain
from residrl.geom import ActionDelta, Pose2, Twist2
from residrl.seeding import derive_seed, make_rng
from residrl.sim import (
    InsertionEnv,
    ResidualObs,
    VecInsertionEnv,
    check_success,
    contact_wrench,
    disassembly_path,
    integrate_control_step,
    observe_base,
    observe_residual,
    reset,
    semi_implicit_euler,
    step,
    zero_action,
)


def test_semi_implicit_euler_free_flight():
    x, v = semi_implicit_euler(0.0, 0.0, 1.0, 0.0, mass=1.0, k=100.0, c=20.0, dt=0.01)
    assert v == pytest.approx(1.0)
    assert x == pytest.approx(0.01)


def test_zero_action_holds_pose():
    cfg = sim_domain()
    state = reset(cfg, 3)
    new_state, *_ = step(state, cfg, zero_action(), images=False)
    np.testing.assert_allclose(new_state.ee_pose.as_array(), state.ee_pose.as_array(), atol=1e-12)
    assert new_state.step_count == 1


def test_penalty_force_on_wall_overlap():
    cfg = sim_domain(contact_stiffness=50.0)
    # right wall spans x in [6, 26]; peg half width 5 puts its right edge at 6.1
    wrench = contact_wrench(cfg, [1.1, 25.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])[0]
    assert wrench[0] == pytest.approx(-5.0, rel=1e-9)
    assert wrench[1] == pytest.approx(0.0)
    assert wrench[2] == pytest.approx(0.0)


def test_no_contact_when_just_touching():
    cfg = sim_domain()
    np.testing.assert_array_equal(contact_wrench(cfg, [0.0, 20.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]), 0.0)


def test_reset_starts_above_goal():
    cfg = sim_domain()
    state = reset(cfg, 11)
    expected = state.goal_pose_true.as_array() + [0.0, 20.0, 0.0]
    np.testing.assert_array_equal(state.ee_pose.as_array(), expected)
    assert state.goal_pose_noisy == state.goal_pose_true
    assert state.ee_twist == Twist2()


def test_goal_noise_is_bounded_and_uniform():
    cfg = sim_domain(goal_noise_xy=1.0)
    states = [reset(cfg, seed) for seed in range(1000)]
    noise = np.array([[s.goal_pose_noisy.x - s.goal_pose_true.x, s.goal_pose_noisy.y - s.goal_pose_true.y]
                      for s in states])
    assert np.all(np.abs(noise) <= 1.0)
    for column in noise.T:
        assert stats.kstest((column + 1.0) / 2.0, "uniform").pvalue > 1e-3


def test_reset_is_deterministic():
    cfg = real_domain(goal_noise_yaw=2.0, init_yaw_noise=2.0)
    assert reset(cfg, 42) == reset(cfg, 42)
    assert reset(cfg, 42) != reset(cfg, 43)


def test_rollout_is_bitwise_reproducible():
    cfg = real_domain()
    actions = make_rng(5).uniform(-1.0, 1.0, size=(20, 3))

    def rollout():
        state = reset(cfg, 9)
        frames = []
        for a in actions:
            state, _, res_obs, _, _ = step(state, cfg, ActionDelta(*a))
            frames.append((state, res_obs.images_uint8(), res_obs.contact_wrench))
        return frames

    for (s1, img1, w1), (s2, img2, w2) in zip(rollout(), rollout()):
        assert s1 == s2
        np.testing.assert_array_equal(img1, img2)
        assert w1 == w2


def test_passive_damping_dissipates_kinetic_energy():
    # zero action with the spring removed leaves only damping acting
    cfg = sim_domain(controller_stiffness_k=0.0, rotational_stiffness=0.0)
    rng = make_rng(17)
    for seed in range(1000):
        state = reset(cfg, seed)
        vel = rng.uniform(-30.0, 30.0, size=3)
        trace = []
        _, _, applied = integrate_control_step(cfg, state.ee_pose.as_array(), vel, state.ee_pose.as_array(),
                                               np.array([0.0, 0.0, 0.0]), trace)
        energy = np.array([t["kinetic_energy"][0] for t in trace])
        assert np.all(np.diff(energy) <= 1e-12)
        assert all(np.all(t["wrench"] == 0.0) for t in trace)
        assert np.all(applied == 0.0)


def test_reported_wrench_is_the_applied_wrench():
    # peg pushed straight down onto the wall top of a displaced socket
    cfg = sim_domain(socket_offset=Pose2(5.0, 0.0, 0.0))
    state = reset(cfg, 0)
    press = ActionDelta(0.0, -1.0, 0.0)
    touched = 0
    for _ in range(60):
        trace = []
        state, _, res_obs, _, done = step(state, cfg, press, images=False, trace=trace)
        applied = np.array([t["wrench"][0] for t in trace])
        assert len(trace) == cfg.substeps
        np.testing.assert_allclose(state.contact_wrench, applied.mean(axis=0), rtol=1e-12, atol=1e-12)
        assert res_obs.contact_wrench == state.contact_wrench
        if np.any(applied != 0.0):
            touched += 1
            assert np.any(np.asarray(state.contact_wrench) != 0.0)
        else:
            assert state.contact_wrench == (0.0, 0.0, 0.0)
        if done:
            break
    assert touched > 0


def _proportional(base_obs, gain=0.25):
    diff = np.asarray(base_obs.goal_minus_ee)
    return ActionDelta(*np.clip(gain * diff, -1.0, 1.0))


@pytest.mark.parametrize("controller", ["random", "proportional"])
def test_reward_is_sparse_and_paid_at_most_once(controller):
    cfg = real_domain(horizon=60)
    rng = make_rng(31)
    for seed in range(10):
        state = reset(cfg, seed)
        base_obs = observe_base(state)
        rewards, done = [], False
        while not done:
            if controller == "random":
                action = ActionDelta(*rng.uniform(-1.0, 1.0, size=3))
            else:
                action = _proportional(base_obs)
            state, base_obs, _, reward, done = step(state, cfg, action, images=False)
            rewards.append(reward)
        assert set(rewards) <= {0.0, 1.0}
        assert sum(rewards) <= 1.0
        assert sum(rewards) == float(check_success(state, cfg))


def test_divergence_aborts_episode():
    cfg = sim_domain()
    state = replace(reset(cfg, 1), ee_twist=Twist2(0.0, 1e7, 0.0))
    new_state, _, _, reward, done = step(state, cfg, zero_action(), images=False)
    assert new_state.diverged
    assert done and reward == 0.0
    assert new_state.ee_pose == state.ee_pose
    assert new_state.ee_twist == Twist2()


def test_horizon_ends_episode():
    cfg = sim_domain(horizon=3)
    state = reset(cfg, 0)
    dones = []
    for _ in range(3):
        state, _, _, _, done = step(state, cfg, zero_action(), images=False)
        dones.append(done)
    assert dones == [False, False, True]


def test_success_uses_true_goal():
    cfg = sim_domain(goal_noise_xy=50.0)
    state = reset(cfg, 4)
    assert not check_success(state, cfg)
    assert check_success(replace(state, ee_pose=state.goal_pose_true), cfg)
    noisy, true = state.goal_pose_noisy, state.goal_pose_true
    near = np.hypot(noisy.x - true.x, noisy.y - true.y) <= 3.0
    assert check_success(replace(state, ee_pose=noisy), cfg) == near


def test_sensor_noise_only_touches_observation():
    cfg = sim_domain(sensor_noise_ft=2.0)
    state = reset(cfg, 2)
    first = observe_residual(state, cfg, images=False)
    again = observe_residual(state, cfg, images=False)
    assert first.contact_wrench == again.contact_wrench
    assert first.contact_wrench != state.contact_wrench
    clean = observe_residual(state, sim_domain(), images=False)
    assert clean.contact_wrench == state.contact_wrench


def test_residual_obs_has_no_goal_fields():
    names = {f.name for f in fields(ResidualObs)}
    assert not any("goal" in n or "socket" in n for n in names)
    assert observe_base(reset(sim_domain(), 0)).as_array().shape == (12,)


def test_disassembly_path():
    cfg = sim_domain()
    goal = cfg.nominal_goal()
    two = disassembly_path(cfg, 2)
    assert two == [Pose2(goal.x, goal.y + 20.0, goal.theta), goal]
    five = np.array([p.as_array() for p in disassembly_path(cfg, 5)])
    np.testing.assert_allclose(-np.diff(five[:, 1]), 5.0)
    assert five[0] == pytest.approx(reset(cfg, 0).ee_pose.as_array())
    with pytest.raises(ValueError):
        disassembly_path(cfg, 1)


def test_start_is_lifted_above_displaced_socket():
    cfg = sim_domain(socket_offset=Pose2(0.0, 20.0, 0.0))
    state = reset(cfg, 0)
    clear_y = state.goal_pose_true.y - cfg.goal_offset + cfg.socket_depth + cfg.peg_height + cfg.start_clearance
    assert state.ee_pose.y == pytest.approx(clear_y)


def test_vector_env_matches_single_instance():
    cfg = real_domain()
    vec = VecInsertionEnv(cfg, 2, seed=9)
    obs = vec.reset()
    single = reset(cfg, derive_seed(9, 1, 0))
    np.testing.assert_allclose(obs[1], observe_base(single).as_array())
    actions = make_rng(1).uniform(-1.0, 1.0, size=(5, 3))
    for a in actions:
        obs, _, done, info = vec.step(np.tile(a, (2, 1)))
        single, *_ = step(single, cfg, ActionDelta(*a), images=False)
        assert not done.any()
        np.testing.assert_allclose(info["pose"][1], single.ee_pose.as_array(), atol=1e-9)


def test_vector_env_auto_resets():
    cfg = sim_domain(horizon=2)
    vec = VecInsertionEnv(cfg, 3, seed=0)
    vec.reset()
    zeros = np.zeros((3, 3))
    _, _, done, _ = vec.step(zeros)
    assert not done.any()
    _, _, done, info = vec.step(zeros)
    assert done.all()
    np.testing.assert_array_equal(info["steps"], 2)
    np.testing.assert_array_equal(vec.steps, 0)
    np.testing.assert_array_equal(vec.episode_index, 2)


def test_env_wrapper_reports_contact():
    cfg = sim_domain()
    env = InsertionEnv(cfg, images=False)
    env.reset(0)
    assert not env.in_contact
    assert not env.success
