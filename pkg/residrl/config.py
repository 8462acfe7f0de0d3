"""
Experiment configuration: environment variables plus flat `key = value` files.

Files allow `#` comments, blank lines and a single `include = <path>` line
(resolved relative to the including file, whose own keys win). Sections are
dotted prefixes: ppo.*, reward.*, rlpd.*, demo.*, eval.*.
"""

import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from dotenv import load_dotenv

from residrl.domain import DomainConfig, load_domain, parse_bool, pretrain_domain, real_domain
from residrl.errors import ConfigError

load_dotenv()

_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


# ---------------------------------------------------------------- environment

def output_root(default="runs") -> Path:
    return Path(os.getenv("RESIDRL_OUT") or default)


def num_threads() -> int:
    return int(os.getenv("RESIDRL_NUM_THREADS", "1"))


def progress_enabled() -> bool:
    return os.getenv("RESIDRL_PROGRESS", "true").lower() == "true"


def results_csv_path(root) -> Path:
    explicit = os.getenv("RESIDRL_RESULTS_CSV")
    return Path(explicit) if explicit else Path(root) / "combined_results.csv"


# ---------------------------------------------------------------- file layer

def read_key_values(path, allow_include: bool = True) -> List[Tuple[int, str, str]]:
    """Parse one file into (line_number, key, raw_value) triples.

    Trailing `# comments` are stripped. Duplicate keys are an error.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    entries = []
    seen: Dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        match = _LINE.match(stripped)
        if not match:
            raise ConfigError(f"malformed line {line.strip()!r} (expected 'name = value')", path, line_no)
        key, raw = match.group(1), match.group(2)
        if key == "include" and not allow_include:
            raise ConfigError("include is not allowed here", path, line_no)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", path, line_no)
        seen[key] = line_no
        entries.append((line_no, key, raw))
    return entries


def coerce_like(default, raw: str):
    """Convert raw text to the type of `default`."""
    if isinstance(default, bool):
        return parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [p.strip() for p in re.split(r"[;,]", raw) if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in items)
    return raw.strip()


def apply_pairs(record, pairs, path=None):
    """dataclasses.replace `record` with coerced (line_no, key, raw) values."""
    known = {f.name for f in fields(record)}
    updates = {}
    for line_no, key, raw in pairs:
        if key not in known:
            raise ConfigError(f"unknown parameter {key!r}", path, line_no)
        try:
            updates[key] = coerce_like(getattr(record, key), raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", path, line_no) from None
    return replace(record, **updates)


# ---------------------------------------------------------------- sections

@dataclass(frozen=True)
class PpoConfig:
    n_envs: int = 8
    rollout_len: int = 256
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 512
    learning_rate: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    clip_value: bool = True
    max_grad_norm: float = 0.5
    total_env_steps: int = 1_500_000
    hidden_size: int = 128
    init_log_std: float = -0.5
    eval_every: int = 10
    eval_episodes: int = 100
    success_threshold: float = 0.90
    stop_at_threshold: bool = True

    def validate(self) -> "PpoConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"ppo.gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"ppo.gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_ratio <= 0:
            raise ConfigError(f"ppo.clip_ratio must be > 0, got {self.clip_ratio}")
        if min(self.n_envs, self.rollout_len, self.epochs, self.minibatch_size) < 1:
            raise ConfigError("ppo sizes must be positive")
        if self.total_env_steps < 0:
            raise ConfigError("ppo.total_env_steps must be >= 0")
        return self

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.rollout_len


@dataclass(frozen=True)
class ImitationRewardConfig:
    n_waypoints: int = 5
    distance_weight: float = 0.1
    progress_weight: float = 0.5
    success_weight: float = 10.0
    pass_radius: float = 2.0

    def validate(self) -> "ImitationRewardConfig":
        if self.n_waypoints < 2:
            raise ConfigError("reward.n_waypoints must be >= 2")
        if min(self.distance_weight, self.progress_weight, self.success_weight) < 0:
            raise ConfigError("reward weights must be >= 0")
        if self.pass_radius <= 0:
            raise ConfigError("reward.pass_radius must be > 0")
        return self


@dataclass(frozen=True)
class RlpdConfig:
    batch_size: int = 256
    utd_ratio: int = 4
    gamma: float = 0.99
    tau: float = 0.005
    entropy_target: float = -3.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    temperature_lr: float = 3e-4
    init_temperature: float = 0.1
    n_critics: int = 2
    critic_subset: int = 2
    hidden_size: int = 256
    mean_bound: float = 0.5
    residual_init_std: float = 0.1
    demo_capacity: int = 100
    online_capacity: int = 50_000
    max_env_steps: int = 30_000
    eval_every: int = 5_000
    eval_episodes: int = 20
    demo_update: bool = True
    base_action_input: bool = True
    use_images: bool = True

    def validate(self) -> "RlpdConfig":
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"rlpd.batch_size must be even, got {self.batch_size}")
        if self.utd_ratio < 1:
            raise ConfigError(f"rlpd.utd_ratio must be >= 1, got {self.utd_ratio}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"rlpd.gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("rlpd.tau must be in (0, 1]")
        if not 1 <= self.critic_subset <= self.n_critics:
            raise ConfigError("rlpd.critic_subset must be in [1, n_critics]")
        if self.demo_capacity < 1 or self.online_capacity < 1:
            raise ConfigError("buffer capacities must be positive")
        return self


@dataclass(frozen=True)
class DemoConfig:
    n_demos: int = 20
    std_scale: float = 1.0
    calibration_floor: float = 0.05
    calibration_window: int = 200
    max_attempts: int = 2000

    def validate(self) -> "DemoConfig":
        if self.n_demos < 1:
            raise ConfigError("demo.n_demos must be >= 1")
        if self.std_scale < 0:
            raise ConfigError("demo.std_scale must be >= 0")
        if not 0.0 <= self.calibration_floor <= 1.0 or self.calibration_window < 1:
            raise ConfigError("demo.calibration_floor must be in [0, 1] with a positive window")
        return self


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 20
    sweep_offsets: Tuple[float, ...] = (0.0, 0.0, 20.0, 0.0, -20.0, 0.0, 0.0, 20.0, 0.0, -20.0)
    transfer_task: str = "rectangular"
    success_threshold: float = 0.95

    def validate(self) -> "EvalConfig":
        if self.n_episodes < 1:
            raise ConfigError("eval.n_episodes must be >= 1")
        if len(self.sweep_offsets) % 2:
            raise ConfigError("eval.sweep_offsets must list (dx, dy) pairs")
        return self

    def offsets(self) -> List[Tuple[float, float]]:
        flat = self.sweep_offsets
        return [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]


_SECTIONS = {
    "ppo": PpoConfig,
    "reward": ImitationRewardConfig,
    "rlpd": RlpdConfig,
    "demo": DemoConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    sim_domain: Optional[Path] = None
    real_domain: Optional[Path] = None
    seeds: Tuple[int, ...] = (0,)
    output_dir: Path = Path("runs")
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: ImitationRewardConfig = field(default_factory=ImitationRewardConfig)
    rlpd: RlpdConfig = field(default_factory=RlpdConfig)
    demo: DemoConfig = field(default_factory=DemoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    source: Optional[Path] = None

    def validate(self) -> "ExperimentConfig":
        for section in _SECTIONS:
            getattr(self, section).validate()
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed", self.source)
        return self

    def load_sim_domain(self) -> DomainConfig:
        return load_domain(self.sim_domain) if self.sim_domain else pretrain_domain()

    def load_real_domain(self) -> DomainConfig:
        return load_domain(self.real_domain) if self.real_domain else real_domain()

    def run_dir(self, seed: int, out: Optional[str] = None) -> Path:
        root = Path(os.getenv("RESIDRL_OUT") or out or self.output_dir)
        return root / self.name / f"seed_{seed}"


def _collect(path: Path) -> List[Tuple[Path, int, str, str]]:
    own = read_key_values(path)
    located = []
    for line_no, key, raw in own:
        if key != "include":
            continue
        if located:
            raise ConfigError("only one include directive is allowed", path, line_no)
        target = (path.parent / raw).resolve()
        if not target.exists():
            raise ConfigError(f"included file not found: {raw}", path, line_no)
        located = [(target, ln, k, v) for ln, k, v in read_key_values(target, allow_include=False)]
    overridden = {k for _, k, _ in own}
    merged = [entry for entry in located if entry[2] not in overridden]
    merged += [(path, ln, k, v) for ln, k, v in own if k != "include"]
    return merged


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate an experiment config; every failure is a line-numbered ConfigError."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", path)
    entries = _collect(path)

    top: Dict[str, object] = {"source": path}
    grouped: Dict[str, list] = {name: [] for name in _SECTIONS}
    for src, line_no, key, raw in entries:
        section, dot, leaf = key.partition(".")
        if dot:
            if section not in grouped:
                raise ConfigError(f"unknown section {section!r}", src, line_no)
            grouped[section].append((src, line_no, leaf, raw))
            continue
        try:
            if key == "name":
                top["name"] = raw
            elif key in ("sim_domain", "real_domain"):
                top[key] = (src.parent / raw).resolve()
            elif key == "seeds":
                top["seeds"] = tuple(int(s) for s in re.split(r"[\s,]+", raw) if s)
            elif key == "seed":
                top["seeds"] = (int(raw),)
            elif key == "output_dir":
                top["output_dir"] = Path(raw)
            else:
                raise ConfigError(f"unknown parameter {key!r}", src, line_no)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", src, line_no) from None

    for section, record_type in _SECTIONS.items():
        record = record_type()
        for src, line_no, leaf, raw in grouped[section]:
            record = apply_pairs(record, [(line_no, leaf, raw)], src)
        top[section] = record

    cfg = ExperimentConfig(**top)
    try:
        return cfg.validate()
    except ConfigError as exc:
        if exc.path is None:
            raise ConfigError(str(exc), path) from None
        raise
