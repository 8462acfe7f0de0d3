# experiment.py
"""
Command-line entry point.

    python experiment.py pretrain configs/experiment.cfg --seed 0
    python experiment.py collect_demos configs/experiment.cfg --n 20
    python experiment.py train_residual configs/experiment.cfg
    python experiment.py eval configs/experiment.cfg --stack residual
    python experiment.py sweep configs/experiment.cfg
    python experiment.py ablate configs/experiment.cfg --seeds 5
    python experiment.py transfer configs/experiment.cfg --task rectangular

Per-seed artifacts live under <out>/<experiment>/seed_<s>/; reports under
<out>/<experiment>/reports/<command>_<timestamp>/.
"""

import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import fire
import torch
from dotenv import load_dotenv

from residrl import artifacts
from residrl.config import load_experiment, num_threads, progress_enabled, results_csv_path
from residrl.domain import save_domain, transfer_domain
from residrl.errors import ConfigError, ResidrlError, ThresholdNotReachedError
from residrl.eval_harness import evaluate, robustness_sweep, run_ablations, transfer_scenario
from residrl.base_trainer import pretrain
from residrl.residual_learner import PolicyStack, collect_demos, train_residual
from residrl.seeding import derive_seed
from results_tracker import ResultsTracker

load_dotenv()

STACKS = ("base-only", "residual", "state-residual")


def _banner(title: str, **fields):
    print(f"\n{'='*60}")
    print(title)
    print(f"{'='*60}")
    for key, value in fields.items():
        print(f"{key}: {value}")
    print(f"{'='*60}\n")


def _residual_ckpt_name(stack: str) -> str:
    return "residual_state.ckpt" if stack == "state-residual" else "residual.ckpt"


class Commands:
    """Residual sim-to-real insertion experiments."""

    def __init__(self, out: str = None, force: bool = False):
        self._out = out
        self._force = force
        self._progress = progress_enabled()

    # ------------------------------------------------------------ helpers

    def _setup(self, config, seed):
        cfg = load_experiment(config)
        seed = cfg.seeds[0] if seed is None else int(seed)
        return cfg, seed, cfg.run_dir(seed, self._out)

    def _reports_dir(self, cfg, command: str) -> Path:
        return artifacts.timestamped_dir(cfg.run_dir(0, self._out).parent / "reports", command)

    def _load_stack(self, run_dir: Path, stack: str) -> PolicyStack:
        if stack not in STACKS:
            raise ConfigError(f"stack must be one of {STACKS}, got {stack!r}")
        base, _, _ = artifacts.load_base_agent(run_dir / "base.ckpt")
        if stack == "base-only":
            return PolicyStack(base.policy, None, name=stack)
        residual, _ = artifacts.load_residual_agent(run_dir / _residual_ckpt_name(stack))
        return PolicyStack(base.policy, residual.actor, name=stack)

    # ------------------------------------------------------------ commands

    def pretrain(self, config, seed=None):
        """PPO pretraining of the base policy in the nominal domain."""
        cfg, seed, run_dir = self._setup(config, seed)
        domain = cfg.load_sim_domain()
        ckpt = artifacts.ensure_writable(run_dir / "base.ckpt", self._force)
        curve_path = artifacts.ensure_writable(run_dir / "pretrain_curve.csv", self._force)
        _banner("Base policy pretraining", Experiment=cfg.name, Seed=seed,
                **{"Env steps": cfg.ppo.total_env_steps, "Parallel envs": cfg.ppo.n_envs})

        start = time.time()
        result = pretrain(cfg.ppo, domain, seed, cfg.reward, progress=self._progress)
        digest = artifacts.save_checkpoint(
            ckpt, result.agent, "base", result.agent.describe(), {"ppo": result.optimizer},
            meta={"seed": seed, "domain_digest": domain.digest(), "env_steps": result.env_steps},
        )
        artifacts.write_csv(result.curve, curve_path)
        save_domain(domain, run_dir / "sim.domain")

        print(f"\n✓ checkpoint {ckpt} ({digest[:16]})")
        print(f"✓ curve {curve_path}")
        print(f"⏱️  {time.time() - start:.1f}s")
        if not result.reached:
            raise ThresholdNotReachedError(
                f"eval success {result.eval_success:.2%} below {cfg.ppo.success_threshold:.0%} "
                f"after {result.env_steps} env steps"
            )

    def collect_demos(self, config, n=None, seed=None):
        """Roll out the base policy on the deployment domain and keep successful trajectories."""
        cfg, seed, run_dir = self._setup(config, seed)
        n = cfg.demo.n_demos if n is None else int(n)
        domain = cfg.load_real_domain()
        base, _, _ = artifacts.load_base_agent(artifacts.require(run_dir / "base.ckpt", "run pretrain first"))
        demo_dir = run_dir / "demos"
        artifacts.ensure_writable(demo_dir, self._force)
        _banner("Demonstration collection", Experiment=cfg.name, Seed=seed, Target=n)

        collection = collect_demos(base.policy, domain, n, derive_seed(seed, 20), cfg.demo,
                                   progress=self._progress)
        artifacts.save_demos(demo_dir, collection, domain.digest(), force=True)
        save_domain(domain, run_dir / "real.domain")
        print(f"📊 zero-shot success estimate: {collection.success_rate:.2%} ({collection.attempts} attempts)")
        print(f"✓ demos written to {demo_dir}")

    def train_residual(self, config, seed=None, stack="residual"):
        """Residual training on the deployment domain from the collected demos."""
        cfg, seed, run_dir = self._setup(config, seed)
        if stack not in ("residual", "state-residual"):
            raise ConfigError(f"stack must be residual or state-residual, got {stack!r}")
        rlpd = cfg.rlpd if stack == "residual" else replace(cfg.rlpd, use_images=False)
        domain = cfg.load_real_domain()
        base, _, _ = artifacts.load_base_agent(artifacts.require(run_dir / "base.ckpt", "run pretrain first"))
        demos, _ = artifacts.load_demos(run_dir / "demos")
        ckpt = artifacts.ensure_writable(run_dir / _residual_ckpt_name(stack), self._force)
        metrics_path = artifacts.ensure_writable(run_dir / ckpt.name.replace(".ckpt", "_metrics.csv"), self._force)
        _banner("Residual training", Experiment=cfg.name, Seed=seed, Stack=stack, Demos=len(demos),
                **{"Env steps": rlpd.max_env_steps, "UTD": rlpd.utd_ratio})

        eval_seed = derive_seed(seed, 21)

        def evaluator(policy_stack, env_step):
            return evaluate(policy_stack, domain, rlpd.eval_episodes, eval_seed).summary()

        start = time.time()
        result = train_residual(base.policy, domain, demos, rlpd, seed, evaluator, progress=self._progress)
        digest = artifacts.save_checkpoint(
            ckpt, result.agent, "residual", result.agent.describe(), result.agent.optimizers(),
            meta={"seed": seed, "domain_digest": domain.digest(), "env_steps": result.env_steps},
        )
        artifacts.write_csv(result.metrics, metrics_path)
        print(f"\n✓ checkpoint {ckpt} ({digest[:16]})")
        print(f"✓ metrics {metrics_path}")
        print(f"⏱️  {time.time() - start:.1f}s")

    def eval(self, config, stack="residual", seed=None, n=None, domain="real"):
        """Evaluate a policy stack; prints a final single-line JSON summary."""
        cfg, seed, run_dir = self._setup(config, seed)
        n = cfg.eval.n_episodes if n is None else int(n)
        env_domain = cfg.load_real_domain() if domain == "real" else cfg.load_sim_domain()
        policy_stack = self._load_stack(run_dir, stack)
        _banner("Evaluation", Experiment=cfg.name, Seed=seed, Stack=stack, Domain=domain, Episodes=n)

        start = time.time()
        report = evaluate(policy_stack, env_domain, n, derive_seed(seed, 22), progress=self._progress)
        out_dir = self._reports_dir(cfg, f"eval_{stack}")
        artifacts.write_json(out_dir / "report.json", report.to_dict())
        ckpt_name = "base.ckpt" if stack == "base-only" else _residual_ckpt_name(stack)
        ckpt_hash = artifacts.read_checkpoint(run_dir / ckpt_name)[0]["parameter_hash"]
        ResultsTracker(results_csv_path(run_dir.parent)).add_result(
            "eval", cfg.name, stack, env_domain.digest(), seed, n, report.success_rate,
            report.mean_cycle_time_s, ckpt_hash, time.time() - start,
        )
        print(json.dumps({"stack": stack, "seed": seed, **report.summary()}))

    def sweep(self, config, stack="residual", seed=None, n=None):
        """Socket-displacement robustness grid with stale goal inputs."""
        cfg, seed, run_dir = self._setup(config, seed)
        n = cfg.eval.n_episodes if n is None else int(n)
        policy_stack = self._load_stack(run_dir, stack)
        _banner("Robustness sweep", Experiment=cfg.name, Seed=seed, Stack=stack, Offsets=cfg.eval.offsets())

        grid = robustness_sweep(policy_stack, cfg.load_real_domain(), cfg.eval.offsets(), n,
                                derive_seed(seed, 23), progress=self._progress)
        out_dir = self._reports_dir(cfg, f"sweep_{stack}")
        artifacts.write_json(out_dir / "grid.json", grid.to_dict())
        artifacts.write_csv(grid.table(), out_dir / "grid.csv")
        print(grid.table().to_string(index=False))
        print(f"\n📊 displaced mean success: {grid.displaced_mean():.2%}")
        print(f"✓ grid written to {out_dir}")

    def ablate(self, config, seeds=None, n=None):
        """Ablation table over seeds; needs base checkpoints and demos for each seed."""
        cfg = load_experiment(config)
        if seeds is None:
            seed_list = list(cfg.seeds)
        elif isinstance(seeds, int):
            seed_list = list(cfg.seeds[:seeds]) if len(cfg.seeds) >= seeds else list(range(seeds))
        else:
            seed_list = [int(s) for s in seeds]
        n = cfg.eval.n_episodes if n is None else int(n)
        domain = cfg.load_real_domain()
        bases, demos = {}, {}
        for s in seed_list:
            run_dir = cfg.run_dir(s, self._out)
            bases[s] = artifacts.load_base_agent(artifacts.require(run_dir / "base.ckpt", "run pretrain first"))[0].policy
            demos[s] = artifacts.load_demos(run_dir / "demos")[0]
        _banner("Ablations", Experiment=cfg.name, Seeds=seed_list, Episodes=n)

        per_seed, summary = run_ablations(bases, demos, domain, cfg.rlpd, n, progress=self._progress)
        out_dir = self._reports_dir(cfg, "ablate")
        artifacts.write_csv(per_seed, out_dir / "ablation.csv")
        artifacts.write_csv(summary, out_dir / "ablation_summary.csv")
        print(summary.to_string(index=False))
        print(f"\n✓ tables written to {out_dir}")

    def transfer(self, config, seed=None, task=None, n=None):
        """Zero-shot and adapted performance of the base policy on an unseen task."""
        cfg, seed, run_dir = self._setup(config, seed)
        task = task or cfg.eval.transfer_task
        n = cfg.eval.n_episodes if n is None else int(n)
        new_domain = transfer_domain(task)
        base, _, _ = artifacts.load_base_agent(artifacts.require(run_dir / "base.ckpt", "run pretrain first"))
        _banner("Cross-task transfer", Experiment=cfg.name, Seed=seed, Task=task)

        report = transfer_scenario(base.policy, cfg.load_sim_domain(), new_domain, cfg.rlpd, derive_seed(seed, 24),
                                   cfg.demo, n, progress=self._progress)
        out_dir = self._reports_dir(cfg, f"transfer_{task}")
        artifacts.write_json(out_dir / "transfer.json", report.to_dict())
        save_domain(new_domain, out_dir / f"{task}.domain")
        print(f"✓ report written to {out_dir}")


def main(argv=None):
    torch.set_num_threads(num_threads())
    try:
        fire.Fire(Commands, command=argv, name="experiment")
    except ResidrlError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
