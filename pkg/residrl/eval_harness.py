"""
Evaluation protocol, robustness sweep, ablation table and transfer scenario.

Evaluation is deterministic given a seed: base actions are policy means and
the residual runs at its mean, so a report is reproducible from (checkpoint
hash, domain, seed).
"""

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from residrl.base_trainer import BasePolicy
from residrl.config import DemoConfig, RlpdConfig
from residrl.domain import DomainConfig
from residrl.errors import ConfigError
from residrl.geom import Pose2, wrap_deg
from residrl.replay import Trajectory
from residrl.residual_learner import PolicyStack, collect_demos, relabel_for_zero_base, train_residual
from residrl.seeding import derive_seed
from residrl.sim import InsertionEnv

DEFAULT_OFFSETS = ((0.0, 0.0), (20.0, 0.0), (-20.0, 0.0), (0.0, 20.0), (0.0, -20.0))
ABLATION_ROWS = ("full", "no-demo-update", "no-base-action-input", "base-only", "scratch-RL")
_EVAL_STREAM = 9


@dataclass(frozen=True)
class EpisodeRecord:
    seed: int
    steps: int
    success: bool


@dataclass
class EvalReport:
    n_episodes: int
    success_rate: float
    mean_cycle_time_s: Optional[float]
    episodes: List[EpisodeRecord]
    stack: str = ""
    domain_digest: str = ""
    seed: int = 0
    first_contacts: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("first_contacts")
        return out

    def summary(self) -> dict:
        return {"success_rate": self.success_rate, "mean_cycle_time_s": self.mean_cycle_time_s}


def cycle_time(steps: int, domain: DomainConfig) -> float:
    return steps * domain.control_dt


def evaluate(stack: PolicyStack, domain: DomainConfig, n_episodes: int = 20, seed: int = 0,
             progress: bool = False) -> EvalReport:
    """Roll out `n_episodes` noisy-goal episodes with deterministic actions.

    Also logs, per episode, the yaw error and residual yaw action at the first
    step that starts in contact.
    """
    env = InsertionEnv(domain, images=stack.needs_images)
    records, contacts = [], []
    for i in tqdm(range(n_episodes), desc=f"Eval {stack.name}", unit="ep", disable=not progress):
        ep_seed = derive_seed(seed, _EVAL_STREAM, i)
        base_obs, res_obs = env.reset(ep_seed)
        done = False
        logged = False
        while not done:
            a_b, a_r, executed = stack.act(base_obs, res_obs)
            if not logged and env.in_contact:
                state = env.state
                yaw_err = wrap_deg(state.ee_pose.theta - state.goal_pose_true.theta)
                contacts.append((float(yaw_err), float(a_r[2])))
                logged = True
            base_obs, res_obs, _, done = env.step(executed)
        records.append(EpisodeRecord(ep_seed, env.state.step_count, env.success))

    successes = [r for r in records if r.success]
    mean_ct = float(np.mean([cycle_time(r.steps, domain) for r in successes])) if successes else None
    return EvalReport(
        n_episodes=n_episodes,
        success_rate=len(successes) / n_episodes if n_episodes else 0.0,
        mean_cycle_time_s=mean_ct,
        episodes=records,
        stack=stack.name,
        domain_digest=domain.digest(),
        seed=seed,
        first_contacts=contacts,
    )


def yaw_correction_rate(first_contacts: Sequence[Tuple[float, float]], min_error_deg: float = 0.5) -> Optional[float]:
    """Share of first-contact steps where the residual yaw action opposes the yaw error."""
    relevant = [(e, a) for e, a in first_contacts if abs(e) >= min_error_deg]
    if not relevant:
        return None
    return float(np.mean([np.sign(a) == -np.sign(e) for e, a in relevant]))


# ---------------------------------------------------------------- robustness

@dataclass
class RobustnessGrid:
    offsets: List[Tuple[float, float]]
    reports: List[EvalReport]

    def to_dict(self) -> dict:
        return {
            "offsets": [list(o) for o in self.offsets],
            "reports": [r.to_dict() for r in self.reports],
        }

    def displaced_mean(self) -> float:
        rates = [r.success_rate for o, r in zip(self.offsets, self.reports) if tuple(o) != (0.0, 0.0)]
        return float(np.mean(rates)) if rates else float("nan")

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"dx_mm": o[0], "dy_mm": o[1], **r.summary()} for o, r in zip(self.offsets, self.reports)
        ])


def robustness_sweep(stack: PolicyStack, base_domain: DomainConfig,
                     offsets: Sequence[Tuple[float, float]] = DEFAULT_OFFSETS,
                     n_episodes: int = 20, seed: int = 0, progress: bool = False) -> RobustnessGrid:
    """Displace the socket physically while goal inputs keep the stale nominal estimate."""
    reports = []
    for dx, dy in offsets:
        domain = replace(base_domain, socket_offset=Pose2(dx, dy, 0.0))
        reports.append(evaluate(stack, domain, n_episodes, seed, progress))
    return RobustnessGrid([(float(dx), float(dy)) for dx, dy in offsets], reports)


# ---------------------------------------------------------------- ablations

def ablation_variants(cfg: RlpdConfig) -> Dict[str, Optional[RlpdConfig]]:
    """Training config per ablation row; None means no residual is trained."""
    return {
        "full": cfg,
        "no-demo-update": replace(cfg, demo_update=False),
        "no-base-action-input": replace(cfg, base_action_input=False),
        "base-only": None,
        "scratch-RL": replace(cfg, mean_bound=1.0),
    }


def run_ablations(bases: Mapping[int, BasePolicy], demos: Mapping[int, Sequence[Trajectory]],
                  domain: DomainConfig, cfg: RlpdConfig, n_episodes: int = 20,
                  rows: Sequence[str] = ABLATION_ROWS, verbose: bool = True,
                  progress: bool = True) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Train and evaluate every ablation row on every seed; returns (per-seed table, means)."""
    seeds = sorted(bases)
    if verbose and len(seeds) < 5:
        print(f"⚠️  {len(seeds)} seed(s): orderings are only meaningful with at least 5")
    variants = ablation_variants(cfg)
    records = []
    for seed in seeds:
        for name in rows:
            variant = variants[name]
            if verbose:
                print(f"\n📊 seed {seed}: {name}")
            if variant is None:
                stack = PolicyStack(bases[seed], None, name=name)
            else:
                base = None if name == "scratch-RL" else bases[seed]
                seed_demos = demos[seed]
                if name == "scratch-RL":
                    seed_demos = [relabel_for_zero_base(t) for t in seed_demos]
                result = train_residual(base, domain, seed_demos, variant, seed, verbose=False, progress=progress)
                stack = PolicyStack(base, result.agent.actor, name=name)
            report = evaluate(stack, domain, n_episodes, derive_seed(seed, 10))
            ct = report.mean_cycle_time_s
            records.append({"variant": name, "seed": seed, "success_rate": report.success_rate,
                            "mean_cycle_time_s": np.nan if ct is None else ct})
    per_seed = pd.DataFrame(records)
    summary = (
        per_seed.groupby("variant", sort=False)[["success_rate", "mean_cycle_time_s"]]
        .mean()
        .reindex(list(rows))
        .reset_index()
    )
    return per_seed, summary


# ---------------------------------------------------------------- transfer

@dataclass
class TransferReport:
    before: EvalReport
    after: EvalReport
    yaw_correction_rate: Optional[float]
    demo_attempts: int
    source_peg_shape: str = "round"

    def to_dict(self) -> dict:
        return {
            "source_peg_shape": self.source_peg_shape,
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "yaw_correction_rate": self.yaw_correction_rate,
            "demo_attempts": self.demo_attempts,
        }


def transfer_scenario(base_policy: BasePolicy, source_domain: DomainConfig, new_domain: DomainConfig,
                      cfg: RlpdConfig, seed: int, demo_cfg: Optional[DemoConfig] = None, n_episodes: int = 20,
                      verbose: bool = True, progress: bool = True) -> TransferReport:
    """Zero-shot evaluation of a round-peg base policy on an unseen task, then residual adaptation.

    `source_domain` is the domain the base policy was pretrained in; anything
    but a round peg is rejected before any rollout.
    """
    if source_domain.peg_shape != "round":
        raise ConfigError(
            f"transfer needs a base policy pretrained on the round peg, got {source_domain.peg_shape!r}"
        )
    demo_cfg = demo_cfg or DemoConfig()
    eval_seed = derive_seed(seed, 11)
    before = evaluate(PolicyStack(base_policy, None, name="base-only"), new_domain, n_episodes, eval_seed)
    if verbose:
        print(f"📊 zero-shot success on new task: {before.success_rate:.2%}")
    collection = collect_demos(base_policy, new_domain, demo_cfg.n_demos, seed, demo_cfg,
                               verbose=verbose, progress=progress)
    result = train_residual(base_policy, new_domain, collection.trajectories, cfg, seed,
                            verbose=verbose, progress=progress)
    after = evaluate(PolicyStack(base_policy, result.agent.actor, name="residual"), new_domain, n_episodes,
                     eval_seed)
    rate = yaw_correction_rate(after.first_contacts)
    if verbose:
        print(f"📊 after adaptation: {after.success_rate:.2%}; yaw-correcting first contacts: {rate}")
    return TransferReport(before, after, rate, collection.attempts, source_domain.peg_shape)
