"""
PPO pretraining of the state-based base policy in the nominal domain.

Reward is dense imitation of the disassembly path (reversed); every episode
draws a new socket placement and reset noise from its own seed.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from tqdm import tqdm

from residrl.config import ImitationRewardConfig, PpoConfig
from residrl.domain import DomainConfig
from residrl.errors import NumericalDivergenceError
from residrl.geom import Pose2, clamp_array
from residrl.networks import (
    GaussianPolicy,
    InputLayout,
    MlpSpec,
    ValueNet,
    as_tensor,
    backward,
    make_optimizer,
    optimizer_step,
)
from residrl.seeding import make_rng
from residrl.sim import BASE_OBS_DIM, BASE_OBS_SCALE, VecInsertionEnv

BASE_LAYOUT = InputLayout(("ee_pose", "ee_twist", "goal_pose_noisy", "goal_minus_ee"), (3, 3, 3, 3))
ACTION_DIM = 3


# ---------------------------------------------------------------- networks

class BasePolicy(GaussianPolicy):
    """Gaussian policy on the privileged state; raw observations are scaled internally."""

    def __init__(self, hidden: int, rng: np.random.Generator, init_log_std: float = -0.5):
        spec = MlpSpec((BASE_OBS_DIM, hidden, hidden, ACTION_DIM), "tanh", "gaussian")
        super().__init__(spec, BASE_LAYOUT, rng, init_log_std=init_log_std)
        self.register_buffer("obs_scale", as_tensor(BASE_OBS_SCALE))

    def forward(self, obs):
        return super().forward(as_tensor(obs) * self.obs_scale)


class BaseValue(ValueNet):
    def __init__(self, hidden: int, rng: np.random.Generator):
        super().__init__(MlpSpec((BASE_OBS_DIM, hidden, hidden, 1), "tanh", "scalar"), BASE_LAYOUT, rng)
        self.register_buffer("obs_scale", as_tensor(BASE_OBS_SCALE))

    def forward(self, obs):
        return super().forward(as_tensor(obs) * self.obs_scale)


class BaseAgent(nn.Module):
    """Policy and value function trained together; the unit stored in a base checkpoint."""

    def __init__(self, hidden: int = 128, init_log_std: float = -0.5, seed: int = 0):
        super().__init__()
        self.hidden = hidden
        self.init_log_std = init_log_std
        rng = make_rng(seed, 1)
        self.policy = BasePolicy(hidden, rng, init_log_std)
        self.value = BaseValue(hidden, rng)

    def describe(self) -> dict:
        return {"hidden": self.hidden, "init_log_std": self.init_log_std}


# ---------------------------------------------------------------- reward

def waypoint_grid(goal_true: np.ndarray, cfg: DomainConfig, n_waypoints: int) -> np.ndarray:
    """(N, n, 2) assembly-order waypoints for each goal in a batch."""
    goal_true = np.atleast_2d(goal_true)
    heights = np.linspace(cfg.approach_height, 0.0, n_waypoints)
    xs = np.repeat(goal_true[:, None, 0], n_waypoints, axis=1)
    ys = goal_true[:, None, 1] + heights[None, :]
    return np.stack([xs, ys], axis=-1)


def imitation_reward_batch(pose: np.ndarray, waypoints: np.ndarray, progress: np.ndarray, success: np.ndarray,
                           cfg: ImitationRewardConfig):
    """Vectorised shaped reward; returns (reward, updated progress).

    progress is the index of the furthest waypoint passed so far (-1 before
    the first). The distance term targets the waypoint after it, or the last
    waypoint once all have been passed.
    """
    pose = np.atleast_2d(pose)
    n = waypoints.shape[1]
    dist = np.linalg.norm(waypoints - pose[:, None, :2], axis=-1)
    idx = np.arange(n)[None, :]
    passed = (dist <= cfg.pass_radius) & (idx > progress[:, None])
    furthest = np.where(passed, idx, -1).max(axis=1)
    progress = np.maximum(progress, furthest)
    target = np.minimum(progress + 1, n - 1)
    d = dist[np.arange(len(pose)), target]
    reward = (
        -cfg.distance_weight * d
        + cfg.progress_weight * np.maximum(progress, 0)
        + cfg.success_weight * np.asarray(success, dtype=np.float64)
    )
    return reward, progress


def imitation_reward(ee_pose: Pose2, path, cfg: ImitationRewardConfig, progress: int = -1, success: bool = False):
    """Single-instance reward for an end-effector pose against a waypoint path; returns (reward, progress)."""
    if not path:
        raise ValueError("path must be nonempty")
    waypoints = np.array([[[p.x, p.y] for p in path]])
    reward, new_progress = imitation_reward_batch(
        ee_pose.as_array()[None], waypoints, np.array([progress]), np.array([success]), cfg
    )
    return float(reward[0]), int(new_progress[0])


# ---------------------------------------------------------------- PPO pieces

def compute_gae(rewards, values, dones, gamma: float, lam: float, last_values=None):
    """Generalized advantage estimates over time-major arrays (T,) or (T, N)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must share a shape")
    if last_values is None:
        last_values = np.zeros(rewards.shape[1:])
    advantages = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1:])
    next_values = np.asarray(last_values, dtype=np.float64)
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values * live - values[t]
        gae = delta + gamma * lam * live * gae
        advantages[t] = gae
        next_values = values[t]
    return advantages, advantages + values


def normalize_advantages(advantages) -> np.ndarray:
    adv = np.asarray(advantages, dtype=np.float64)
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


def clipped_surrogate(ratio, advantages, clip_ratio: float):
    """Mean of min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    ratio = as_tensor(ratio)
    advantages = as_tensor(advantages)
    clipped = torch.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    return torch.minimum(ratio * advantages, clipped * advantages).mean()


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.obs)


def ppo_update(agent: BaseAgent, optimizer: torch.optim.Optimizer, batch: RolloutBatch, cfg: PpoConfig,
               rng: np.random.Generator) -> Dict[str, float]:
    """Clipped-surrogate epochs over shuffled minibatches; returns mean losses."""
    advantages = normalize_advantages(batch.advantages)
    obs = as_tensor(batch.obs)
    actions = as_tensor(batch.actions)
    old_logp = as_tensor(batch.log_probs)
    old_values = as_tensor(batch.values)
    returns = as_tensor(batch.returns)
    adv = as_tensor(advantages)
    params = list(agent.parameters())

    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [], "skipped": 0}
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = torch.as_tensor(order[start:start + mb])
            logp = agent.policy.log_prob(obs[idx], actions[idx])
            ratio = torch.exp(logp - old_logp[idx])
            policy_loss = -clipped_surrogate(ratio, adv[idx], cfg.clip_ratio)

            value = agent.value(obs[idx])
            if cfg.clip_value:
                clipped = old_values[idx] + torch.clamp(value - old_values[idx], -cfg.clip_ratio, cfg.clip_ratio)
                value_loss = 0.5 * torch.maximum((value - returns[idx]) ** 2, (clipped - returns[idx]) ** 2).mean()
            else:
                value_loss = 0.5 * ((value - returns[idx]) ** 2).mean()
            entropy = agent.policy.entropy(obs[idx]).mean()
            loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

            if not torch.isfinite(loss):
                raise NumericalDivergenceError(
                    f"non-finite PPO loss (policy={float(policy_loss)}, value={float(value_loss)}, "
                    f"entropy={float(entropy)}, |adv|max={float(adv.abs().max())})"
                )
            backward(params, loss)
            if not optimizer_step(optimizer, cfg.max_grad_norm):
                stats["skipped"] += 1
            stats["policy_loss"].append(float(policy_loss))
            stats["value_loss"].append(float(value_loss))
            stats["entropy"].append(float(entropy))
            stats["approx_kl"].append(float((old_logp[idx] - logp).mean()))
    out = {k: float(np.mean(v)) for k, v in stats.items() if k != "skipped"}
    out["skipped"] = stats["skipped"]
    return out


# ---------------------------------------------------------------- rollout and evaluation

class RolloutCollector:
    """Steps a VecInsertionEnv with the current policy and shapes rewards along the disassembly path."""

    def __init__(self, domain: DomainConfig, cfg: PpoConfig, reward_cfg: ImitationRewardConfig, seed: int):
        self.domain = domain
        self.cfg = cfg
        self.reward_cfg = reward_cfg
        self.env = VecInsertionEnv(domain, cfg.n_envs, seed)
        self.rng = make_rng(seed, 2)
        self.obs = self.env.reset()
        self.progress = np.full(cfg.n_envs, -1, dtype=np.int64)
        self.episode_return = np.zeros(cfg.n_envs)
        self.finished_returns = []
        self.finished_success = []

    def collect(self, agent: BaseAgent, n_steps: int) -> RolloutBatch:
        n_envs = self.cfg.n_envs
        obs_buf = np.zeros((n_steps, n_envs, BASE_OBS_DIM))
        act_buf = np.zeros((n_steps, n_envs, ACTION_DIM))
        logp_buf = np.zeros((n_steps, n_envs))
        val_buf = np.zeros((n_steps, n_envs))
        rew_buf = np.zeros((n_steps, n_envs))
        done_buf = np.zeros((n_steps, n_envs))
        self.finished_returns, self.finished_success = [], []

        for t in range(n_steps):
            actions, logp = agent.policy.sample(self.obs, self.rng)
            with torch.no_grad():
                values = agent.value(self.obs).numpy()
            obs_buf[t], act_buf[t], logp_buf[t], val_buf[t] = self.obs, actions, logp, values

            next_obs, success, done, info = self.env.step(clamp_array(actions))
            waypoints = waypoint_grid(info["goal_true"], self.domain, self.reward_cfg.n_waypoints)
            reward, self.progress = imitation_reward_batch(info["pose"], waypoints, self.progress, success,
                                                           self.reward_cfg)
            rew_buf[t], done_buf[t] = reward, done
            self.episode_return += reward
            for i in np.flatnonzero(done):
                self.finished_returns.append(float(self.episode_return[i]))
                self.finished_success.append(bool(success[i]))
                self.episode_return[i] = 0.0
                self.progress[i] = -1
            self.obs = next_obs

        with torch.no_grad():
            last_values = agent.value(self.obs).numpy()
        adv, ret = compute_gae(rew_buf, val_buf, done_buf, self.cfg.gamma, self.cfg.gae_lambda, last_values)
        flat = lambda a: a.reshape(n_steps * n_envs, *a.shape[2:])
        return RolloutBatch(flat(obs_buf), flat(act_buf), flat(logp_buf), flat(val_buf), flat(adv), flat(ret))


@torch.no_grad()
def evaluate_base_fast(policy: BasePolicy, domain: DomainConfig, n_episodes: int, seed: int) -> float:
    """Deterministic (mean-action) success rate with all episodes stepped in parallel."""
    env = VecInsertionEnv(domain, n_episodes, seed)
    obs = env.reset()
    finished = np.zeros(n_episodes, dtype=bool)
    succeeded = np.zeros(n_episodes, dtype=bool)
    while not finished.all():
        obs, success, done, _ = env.step(clamp_array(policy.act_mean(obs)))
        newly = done & ~finished
        succeeded |= newly & success
        finished |= done
    return float(succeeded.mean())


# ---------------------------------------------------------------- training loop

@dataclass
class PretrainResult:
    agent: BaseAgent
    optimizer: torch.optim.Optimizer
    curve: pd.DataFrame
    eval_success: float
    reached: bool
    env_steps: int


def pretrain(cfg: PpoConfig, domain: DomainConfig, seed: int,
             reward_cfg: Optional[ImitationRewardConfig] = None,
             verbose: bool = True, progress: bool = True) -> PretrainResult:
    """Train the base policy; stops early once periodic evaluation reaches the threshold."""
    cfg = cfg.validate()
    reward_cfg = (reward_cfg or ImitationRewardConfig()).validate()
    agent = BaseAgent(cfg.hidden_size, cfg.init_log_std, seed)
    optimizer = make_optimizer(agent.parameters(), cfg.learning_rate)
    rows = []
    if cfg.total_env_steps <= 0:
        return PretrainResult(agent, optimizer, pd.DataFrame(rows), 0.0, False, 0)

    collector = RolloutCollector(domain, cfg, reward_cfg, seed)
    update_rng = make_rng(seed, 3)
    n_iters = max(1, cfg.total_env_steps // cfg.batch_size)
    env_steps = 0
    eval_success = float("nan")
    reached = False

    pbar = tqdm(range(1, n_iters + 1), desc="PPO", unit="iter", disable=not progress)
    for it in pbar:
        batch = collector.collect(agent, cfg.rollout_len)
        env_steps += len(batch)
        losses = ppo_update(agent, optimizer, batch, cfg, update_rng)

        evaluated = it % cfg.eval_every == 0 or it == n_iters
        if evaluated:
            eval_success = evaluate_base_fast(agent.policy, domain, cfg.eval_episodes, seed + 10_000)
            reached = eval_success >= cfg.success_threshold
            if verbose:
                tqdm.write(f"📊 iter {it}: eval success {eval_success:.2%} after {env_steps} steps")
        rows.append({
            "iteration": it,
            "env_steps": env_steps,
            "mean_reward": float(batch.returns.mean()) if not collector.finished_returns else float(
                np.mean(collector.finished_returns)),
            "eval_success": eval_success if evaluated else np.nan,
            "train_success": float(np.mean(collector.finished_success)) if collector.finished_success else np.nan,
            **losses,
        })
        pbar.set_postfix(success=f"{eval_success:.2f}", kl=f"{losses['approx_kl']:.4f}")
        if evaluated and reached and cfg.stop_at_threshold:
            if verbose:
                tqdm.write(f"✓ threshold {cfg.success_threshold:.0%} reached at iteration {it}")
            break

    return PretrainResult(agent, optimizer, pd.DataFrame(rows), eval_success, reached, env_steps)
