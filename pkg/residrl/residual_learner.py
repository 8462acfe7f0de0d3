"""
Residual adaptation on the deployment domain.

Demonstrations come from the base policy itself: the base action is the
policy mean and the residual pseudo-label is its Gaussian noise, so the
executed action keeps the base policy's distribution. A residual policy that
sees only deployment-available inputs (images, proprioception, wrench) plus
the base action is then trained off-policy with batches drawn half from demos
and half from online experience.
"""

import copy
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from tqdm import tqdm

from residrl.base_trainer import BasePolicy
from residrl.config import DemoConfig, RlpdConfig
from residrl.domain import DomainConfig
from residrl.errors import CalibrationError, NumericalDivergenceError
from residrl.geom import ActionDelta, clamp_action
from residrl.networks import (
    CriticEnsemble,
    GaussianPolicy,
    ImageEncoder,
    InputLayout,
    MlpSpec,
    as_tensor,
    backward,
    make_optimizer,
    optimizer_step,
    polyak_update,
)
from residrl.replay import ReplayStore, Trajectory, TrajectoryBuilder, Transition, symmetric_sample
from residrl.seeding import derive_seed, make_rng
from residrl.sim import GOAL_SCALE, PROPRIO_DIM, PROPRIO_SCALE, BaseObs, InsertionEnv, ResidualObs

ACTION_DIM = 3
N_VIEWS = 2


# ---------------------------------------------------------------- actions

def combine(a_b, a_r) -> ActionDelta:
    """Executed action: clamp(a_b + a_r) componentwise to [-1, 1]."""
    a_b = a_b.as_array() if isinstance(a_b, ActionDelta) else np.asarray(a_b, dtype=np.float64)
    a_r = a_r.as_array() if isinstance(a_r, ActionDelta) else np.asarray(a_r, dtype=np.float64)
    return clamp_action(a_b + a_r)


def pseudo_label(mean: np.ndarray, std: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Split a base-policy sample into (base action = mean, residual = std * eps)."""
    eps = rng.standard_normal(size=np.shape(mean))
    return np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64) * eps


@torch.no_grad()
def base_mean_std(policy: Optional[BasePolicy], base_obs: BaseObs) -> Tuple[np.ndarray, np.ndarray]:
    if policy is None:
        return np.zeros(ACTION_DIM), np.zeros(ACTION_DIM)
    mean, std = policy(base_obs.as_array()[None])
    return mean.numpy()[0], std.numpy()[0]


# ---------------------------------------------------------------- demonstrations

@dataclass
class DemoCollection:
    trajectories: List[Trajectory]
    attempts: int
    successes: int
    seed: int
    outcomes: List[bool] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


def collect_demos(base_policy: BasePolicy, domain: DomainConfig, n_target: int, seed: int,
                  cfg: Optional[DemoConfig] = None, verbose: bool = True, progress: bool = True) -> DemoCollection:
    """Roll out the stochastic base policy on `domain`, keeping successful episodes only.

    Aborts with CalibrationError when the success rate over the most recent
    `calibration_window` attempts drops below `calibration_floor`.
    """
    cfg = (cfg or DemoConfig()).validate()
    env = InsertionEnv(domain)
    rng = make_rng(seed, 4)
    window = deque(maxlen=cfg.calibration_window)
    kept: List[Trajectory] = []
    outcomes: List[bool] = []
    attempts = 0

    pbar = tqdm(total=n_target, desc="Demos", unit="traj", disable=not progress)
    while len(kept) < n_target:
        if attempts >= cfg.max_attempts:
            raise CalibrationError(
                f"only {len(kept)}/{n_target} successful demos after {attempts} attempts; "
                "recalibrate the deployment domain"
            )
        base_obs, res_obs = env.reset(derive_seed(seed, 4, attempts))
        attempts += 1
        builder = TrajectoryBuilder()
        done = False
        while True:
            mean, std = base_mean_std(base_policy, base_obs)
            builder.observe(res_obs, base_obs.goal_pose_noisy.as_array(), mean)
            if done:
                break
            a_b, a_r = pseudo_label(mean, cfg.std_scale * std, rng)
            base_obs, res_obs, reward, done = env.step(combine(a_b, a_r))
            builder.act(a_r, reward, done)
        success = env.success
        outcomes.append(success)
        window.append(success)
        if success:
            kept.append(builder.build())
            pbar.update(1)
        pbar.set_postfix(attempts=attempts, rate=f"{len(kept) / attempts:.2f}")
        if len(window) == cfg.calibration_window and np.mean(window) < cfg.calibration_floor:
            pbar.close()
            raise CalibrationError(
                f"base policy success {np.mean(window):.1%} over the last {cfg.calibration_window} attempts "
                f"is below the {cfg.calibration_floor:.0%} floor; it cannot seed residual training"
            )
    pbar.close()
    if verbose:
        print(f"✓ collected {len(kept)} demos in {attempts} attempts ({len(kept) / attempts:.1%} success)")
    return DemoCollection(kept, attempts, len(kept), seed, outcomes)


def relabel_for_zero_base(traj: Trajectory) -> Trajectory:
    """Demos for a residual trained without a base policy: base actions become zero and the
    pre-clamp executed action becomes the residual label."""
    executed = traj.base_actions[:-1] + traj.residual_actions
    return replace(traj, base_actions=np.zeros_like(traj.base_actions), residual_actions=executed)


# ---------------------------------------------------------------- residual networks

def _state_features(proprio, goal) -> torch.Tensor:
    proprio = as_tensor(proprio) * as_tensor(PROPRIO_SCALE)
    return torch.cat([proprio, as_tensor(goal) * as_tensor(GOAL_SCALE)], dim=-1)


class ResidualPolicy(nn.Module):
    """Gaussian residual over encoder(images) + proprio (+ base action).

    The state variant replaces images with the noisy goal estimate. The mean
    head starts at zero so the initial combined policy is the base policy.
    """

    def __init__(self, cfg: RlpdConfig, image_size: int, rng: np.random.Generator):
        super().__init__()
        self.use_images = cfg.use_images
        self.base_action_input = cfg.base_action_input
        if cfg.use_images:
            self.encoder = ImageEncoder(image_size, N_VIEWS, PROPRIO_DIM, rng)
            names, sizes = ["image_features", "proprio"], [self.encoder.output_dim - PROPRIO_DIM, PROPRIO_DIM]
        else:
            self.encoder = None
            names, sizes = ["proprio", "goal_pose_noisy"], [PROPRIO_DIM, 3]
        if cfg.base_action_input:
            names.append("base_action")
            sizes.append(ACTION_DIM)
        layout = InputLayout(tuple(names), tuple(sizes))
        spec = MlpSpec((layout.dim, cfg.hidden_size, cfg.hidden_size, ACTION_DIM), "relu", "gaussian")
        self.head = GaussianPolicy(
            spec, layout, rng,
            init_log_std=math.log(cfg.residual_init_std),
            state_dependent_std=True,
            mean_bound=cfg.mean_bound,
            zero_mean_head=True,
        )

    def encode(self, images, proprio, goal, base_action) -> torch.Tensor:
        if self.use_images:
            x = self.encoder(as_tensor(images) / 255.0, as_tensor(proprio) * as_tensor(PROPRIO_SCALE))
        else:
            x = _state_features(proprio, goal)
        if self.base_action_input:
            x = torch.cat([x, as_tensor(base_action)], dim=-1)
        return x

    def forward(self, images, proprio, goal, base_action):
        return self.head(self.encode(images, proprio, goal, base_action))

    def rsample(self, images, proprio, goal, base_action, rng: np.random.Generator):
        return self.head.rsample(self.encode(images, proprio, goal, base_action), rng)


class ResidualCritic(nn.Module):
    """Critic ensemble on Q(s_r, a_b, a_r) with its own encoder."""

    def __init__(self, cfg: RlpdConfig, image_size: int, rng: np.random.Generator):
        super().__init__()
        self.use_images = cfg.use_images
        self.base_action_input = cfg.base_action_input
        if cfg.use_images:
            self.encoder = ImageEncoder(image_size, N_VIEWS, PROPRIO_DIM, rng)
            feat = self.encoder.output_dim
        else:
            self.encoder = None
            feat = PROPRIO_DIM + 3
        n_actions = 2 if cfg.base_action_input else 1
        spec = MlpSpec((feat + n_actions * ACTION_DIM, cfg.hidden_size, cfg.hidden_size, 1), "relu", "scalar",
                       layer_norm=True)
        self.ensemble = CriticEnsemble(spec, cfg.n_critics, rng)

    def forward(self, images, proprio, goal, base_action, residual_action) -> torch.Tensor:
        if self.use_images:
            x = self.encoder(as_tensor(images) / 255.0, as_tensor(proprio) * as_tensor(PROPRIO_SCALE))
        else:
            x = _state_features(proprio, goal)
        parts = [x, as_tensor(base_action)] if self.base_action_input else [x]
        return self.ensemble(torch.cat(parts + [as_tensor(residual_action)], dim=-1))


class ResidualAgent(nn.Module):
    """Actor, critic ensemble, target critic and entropy temperature; the unit stored in a residual checkpoint."""

    def __init__(self, cfg: RlpdConfig, image_size: int = 32, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        rng = make_rng(seed, 6)
        self.actor = ResidualPolicy(cfg, image_size, rng)
        self.critic = ResidualCritic(cfg, image_size, rng)
        self.target_critic = copy.deepcopy(self.critic)
        self.target_critic.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(cfg.init_temperature), dtype=torch.float64))
        self.actor_opt = make_optimizer(self.actor.parameters(), cfg.actor_lr)
        self.critic_opt = make_optimizer(self.critic.parameters(), cfg.critic_lr)
        self.alpha_opt = make_optimizer([self.log_alpha], cfg.temperature_lr)

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def describe(self) -> dict:
        return {"image_size": self.image_size, **asdict(self.cfg)}

    def optimizers(self):
        return {"actor": self.actor_opt, "critic": self.critic_opt, "alpha": self.alpha_opt}


# ---------------------------------------------------------------- acting

@dataclass
class PolicyStack:
    """Base policy (or none, for zero base actions) plus an optional residual."""
    base: Optional[BasePolicy]
    residual: Optional[ResidualPolicy] = None
    name: str = "base-only"

    @property
    def needs_images(self) -> bool:
        return self.residual is not None and self.residual.use_images

    @torch.no_grad()
    def act(self, base_obs: BaseObs, res_obs: ResidualObs, rng: Optional[np.random.Generator] = None):
        """Returns (a_b, a_r, executed); a_r is sampled when `rng` is given, else the residual mean."""
        a_b, _ = base_mean_std(self.base, base_obs)
        a_r = np.zeros(ACTION_DIM)
        if self.residual is not None:
            images = res_obs.images_uint8()[None] if self.residual.use_images else None
            args = (images, res_obs.proprio()[None], base_obs.goal_pose_noisy.as_array()[None], a_b[None])
            if rng is None:
                a_r = self.residual(*args)[0].numpy()[0]
            else:
                a_r = self.residual.rsample(*args, rng)[0].numpy()[0]
        return a_b, a_r, combine(a_b, a_r)


# ---------------------------------------------------------------- RLPD update

def critic_target(reward, done, gamma: float, min_q_next, alpha_logp_next):
    """y = r + gamma * (1 - done) * (min Q'(s', a') - alpha * log pi(a'|s'))."""
    return reward + gamma * (1.0 - done) * (min_q_next - alpha_logp_next)


def _check(loss: torch.Tensor, what: str, store: Optional[ReplayStore]) -> None:
    if not torch.isfinite(loss):
        where = f"; buffers: {store.diagnostics()}" if store is not None else ""
        raise NumericalDivergenceError(f"non-finite {what} loss{where}")


def _obs(b: dict, prefix: str = ""):
    return b[prefix + "images"], b[prefix + "proprio"], b[prefix + "goal"], b[prefix + "base_action"]


def critic_step(agent: ResidualAgent, b: dict, cfg: RlpdConfig, rng: np.random.Generator,
                store: Optional[ReplayStore] = None) -> Tuple[float, float]:
    """One ensemble regression step towards the subset-min soft target, then polyak. Returns (loss, mean Q)."""
    with torch.no_grad():
        next_a, next_logp = agent.actor.rsample(*_obs(b, "next_"), rng)
        subset = agent.critic.ensemble.draw_subset(rng, cfg.critic_subset)
        q_next = agent.target_critic(*_obs(b, "next_"), next_a)[subset].min(dim=0).values
        y = critic_target(as_tensor(b["reward"]), as_tensor(b["done"]), cfg.gamma, q_next,
                          agent.alpha * next_logp)
    q = agent.critic(*_obs(b), b["residual_action"])
    loss = ((q - y.unsqueeze(0)) ** 2).mean(dim=1).sum()
    _check(loss, "critic", store)
    backward(list(agent.critic.parameters()), loss)
    optimizer_step(agent.critic_opt)
    polyak_update(agent.target_critic, agent.critic, cfg.tau)
    return float(loss), float(q.mean())


def actor_step(agent: ResidualAgent, b: dict, rng: np.random.Generator,
               store: Optional[ReplayStore] = None) -> Tuple[float, torch.Tensor]:
    """Maximise min-Q minus alpha * log pi over the batch; returns (loss, detached log-probs)."""
    a_r, logp = agent.actor.rsample(*_obs(b), rng)
    q_pi = agent.critic(*_obs(b), a_r).min(dim=0).values
    loss = (agent.alpha.detach() * logp - q_pi).mean()
    _check(loss, "actor", store)
    backward(list(agent.actor.parameters()), loss)
    optimizer_step(agent.actor_opt)
    return float(loss), logp.detach()


def temperature_step(agent: ResidualAgent, logp: torch.Tensor, cfg: RlpdConfig,
                     store: Optional[ReplayStore] = None) -> float:
    loss = -(agent.log_alpha * (logp + cfg.entropy_target)).mean()
    _check(loss, "temperature", store)
    backward([agent.log_alpha], loss)
    optimizer_step(agent.alpha_opt)
    return float(agent.alpha)


def rlpd_update(agent: ResidualAgent, store: ReplayStore, cfg: RlpdConfig, rng: np.random.Generator) -> dict:
    """utd_ratio critic steps on symmetric batches, then one actor and one temperature step."""
    stats = {"critic_loss": 0.0, "q_mean": 0.0}
    for _ in range(cfg.utd_ratio):
        b = symmetric_sample(store, cfg.batch_size, rng)
        loss, q_mean = critic_step(agent, b, cfg, rng, store)
        stats["critic_loss"] += loss / cfg.utd_ratio
        stats["q_mean"] += q_mean / cfg.utd_ratio

    # actor and temperature use the last critic batch
    stats["actor_loss"], logp = actor_step(agent, b, rng, store)
    stats["alpha"] = temperature_step(agent, logp, cfg, store)
    stats["entropy"] = float(-logp.mean())
    return stats


# ---------------------------------------------------------------- training loop

@dataclass
class ResidualResult:
    agent: ResidualAgent
    metrics: pd.DataFrame
    store: ReplayStore
    env_steps: int


def seed_store(store: ReplayStore, demos: Sequence[Trajectory]) -> ReplayStore:
    for traj in demos:
        store.add_demo(traj)
    return store


def train_residual(base_policy: Optional[BasePolicy], domain: DomainConfig, demos: Sequence[Trajectory],
                   cfg: RlpdConfig, seed: int,
                   evaluator: Optional[Callable[[PolicyStack, int], dict]] = None,
                   verbose: bool = True, progress: bool = True) -> ResidualResult:
    """Interleaved act/update loop on the deployment domain.

    `evaluator(stack, env_step)` is called every `eval_every` steps and at the end;
    its returned dict (success_rate, mean_cycle_time_s) is merged into the metrics.
    """
    cfg = cfg.validate()
    if not demos:
        raise ValueError("train_residual needs at least one demonstration trajectory")
    agent = ResidualAgent(cfg, domain.image_size, seed)
    image_shape = (N_VIEWS, domain.image_size, domain.image_size)
    store = seed_store(ReplayStore(cfg.demo_capacity, cfg.online_capacity, image_shape, verbose), demos)
    stack = PolicyStack(base_policy, agent.actor, name="residual")
    rows = []
    if cfg.max_env_steps <= 0:
        return ResidualResult(agent, pd.DataFrame(rows), store, 0)

    env = InsertionEnv(domain, images=cfg.use_images)
    act_rng = make_rng(seed, 7)
    update_rng = make_rng(seed, 8)
    episode = 0
    base_obs, res_obs = env.reset(derive_seed(seed, 5, episode))
    builder = TrajectoryBuilder()
    a_b, a_r, executed = stack.act(base_obs, res_obs, act_rng)
    builder.observe(res_obs, base_obs.goal_pose_noisy.as_array(), a_b)
    lengths, successes = [], []
    last = {}

    pbar = tqdm(range(1, cfg.max_env_steps + 1), desc="Residual", unit="step", disable=not progress)
    for env_step in pbar:
        next_base, next_res, reward, done = env.step(executed)
        next_a_b, next_a_r, next_executed = stack.act(next_base, next_res, act_rng)
        store.append_online(Transition(
            res_obs.images_uint8(), res_obs.proprio(), base_obs.goal_pose_noisy.as_array(), a_b, a_r,
            reward, done,
            next_res.images_uint8(), next_res.proprio(), next_base.goal_pose_noisy.as_array(), next_a_b,
        ))
        builder.act(a_r, reward, done)
        builder.observe(next_res, next_base.goal_pose_noisy.as_array(), next_a_b)

        last = rlpd_update(agent, store, cfg, update_rng)

        if done:
            success = env.success
            lengths.append(env.state.step_count)
            successes.append(success)
            if success and cfg.demo_update and store.offer_success(builder.build()) and verbose:
                tqdm.write(f"✓ step {env_step}: {env.state.step_count}-step success admitted to demos "
                           f"(median now {store.demos.median_length():.1f})")
            episode += 1
            base_obs, res_obs = env.reset(derive_seed(seed, 5, episode))
            builder = TrajectoryBuilder()
            a_b, a_r, executed = stack.act(base_obs, res_obs, act_rng)
            builder.observe(res_obs, base_obs.goal_pose_noisy.as_array(), a_b)
        else:
            base_obs, res_obs = next_base, next_res
            a_b, a_r, executed = next_a_b, next_a_r, next_executed

        if env_step % cfg.eval_every == 0 or env_step == cfg.max_env_steps:
            row = {
                "env_step": env_step,
                "episodes": episode,
                "train_success": float(np.mean(successes[-20:])) if successes else np.nan,
                "mean_episode_len": float(np.mean(lengths[-20:])) if lengths else np.nan,
                "demo_median_len": store.demos.median_length(),
                "demo_trajectories": store.demos.n_trajectories,
                **last,
            }
            if evaluator is not None:
                report = evaluator(PolicyStack(base_policy, agent.actor, name="residual"), env_step)
                row["eval_success"] = report["success_rate"]
                row["mean_cycle_time_s"] = report["mean_cycle_time_s"]
                if verbose:
                    tqdm.write(f"📊 step {env_step}: eval success {report['success_rate']:.2%}")
            rows.append(row)
        pbar.set_postfix(ep=episode, q=f"{last.get('q_mean', 0.0):.2f}", alpha=f"{last.get('alpha', 0.0):.3f}")

    return ResidualResult(agent, pd.DataFrame(rows), store, cfg.max_env_steps)
