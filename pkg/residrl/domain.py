"""
DomainConfig: every parameter of one environment instance.

The sim-to-real gap is the difference between two of these records. Files use
the flat `name = value` syntax shared with experiment configs.
"""

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from residrl.errors import ConfigError
from residrl.geom import Pose2

PEG_SHAPES = ("round", "rectangular")


@dataclass(frozen=True)
class DomainConfig:
    # peg and socket geometry (mm)
    peg_width: float = 10.0
    peg_height: float = 20.0
    peg_thickness: float = 10.0
    peg_shape: str = "round"
    socket_clearance: float = 1.0
    socket_depth: float = 8.0
    socket_wall_width: float = 20.0
    socket_base: float = 6.0
    insertion_offset: Optional[float] = None

    # Cartesian impedance controller
    controller_stiffness_k: float = 100.0
    controller_damping_c: float = 20.0
    rotational_stiffness: float = 500.0
    rotational_damping: float = 100.0
    virtual_mass: float = 1.0
    virtual_inertia: float = 5.0

    # penalty contact
    contact_stiffness: float = 20000.0
    contact_friction: float = 0.3
    friction_damping: float = 50.0

    # sensing and initial-state distribution
    goal_noise_xy: float = 0.0
    goal_noise_yaw: float = 0.0
    init_yaw_noise: float = 0.0
    sensor_noise_ft: float = 0.0
    socket_pose_true: Pose2 = field(default_factory=Pose2)
    socket_jitter_xy: float = 0.0
    socket_jitter_yaw: float = 0.0
    socket_offset: Pose2 = field(default_factory=Pose2)
    approach_height: float = 20.0
    start_clearance: float = 2.0

    # appearance
    render_seed: int = 0
    image_size: int = 32
    front_view_mm: float = 96.0
    wrist_view_mm: float = 24.0
    front_camera: Pose2 = field(default_factory=lambda: Pose2(0.0, 20.0, 0.0))

    # action semantics and timing
    action_scale_trans: float = 2.0
    action_scale_rot: float = 2.0
    plai_mode: bool = False
    action_smoothing: float = 0.0
    target_leash_trans: float = 5.0
    target_leash_rot: float = 10.0
    physics_dt: float = 1.0 / 600.0
    control_dt: float = 1.0 / 15.0
    horizon: int = 150
    workspace_bound: float = 200.0

    @property
    def goal_offset(self) -> float:
        """Insertion-depth offset from socket pose to end-effector goal; defaults to peg_height."""
        return float(self.peg_height if self.insertion_offset is None else self.insertion_offset)

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.physics_dt))

    @property
    def slot_width(self) -> float:
        return self.peg_width + 2.0 * self.socket_clearance

    def validate(self) -> "DomainConfig":
        if self.socket_clearance <= 0:
            raise ConfigError(f"socket_clearance must be > 0, got {self.socket_clearance}")
        if self.peg_shape not in PEG_SHAPES:
            raise ConfigError(f"peg_shape must be one of {PEG_SHAPES}, got {self.peg_shape!r}")
        if self.action_scale_trans <= 0 or self.action_scale_rot <= 0:
            raise ConfigError("action scales must be > 0")
        if self.physics_dt <= 0 or self.control_dt <= 0:
            raise ConfigError("time steps must be > 0")
        ratio = self.control_dt / self.physics_dt
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise ConfigError(
                f"control_dt ({self.control_dt}) must be an integer multiple of physics_dt ({self.physics_dt})"
            )
        if not 0.0 <= self.action_smoothing < 1.0:
            raise ConfigError("action_smoothing must be in [0, 1)")
        if self.horizon < 1 or self.image_size < 2:
            raise ConfigError("horizon and image_size must be positive")
        for name in ("peg_width", "peg_height", "peg_thickness", "socket_depth", "virtual_mass",
                     "virtual_inertia", "contact_stiffness", "workspace_bound"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("goal_noise_xy", "goal_noise_yaw", "init_yaw_noise", "sensor_noise_ft",
                     "socket_jitter_xy", "socket_jitter_yaw", "contact_friction"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    def nominal_goal(self) -> Pose2:
        """End-effector goal for the undisturbed socket (insertion offset applied)."""
        s = self.socket_pose_true
        return Pose2(s.x, s.y + self.goal_offset, s.theta)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def _format_value(value) -> str:
    if isinstance(value, Pose2):
        return f"{value.x!r}, {value.y!r}, {value.theta!r}"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_pose(raw: str) -> Pose2:
    parts = [p for p in raw.replace("(", "").replace(")", "").split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 'x, y, theta', got {raw!r}")
    return Pose2(*(float(p) for p in parts))


def coerce_field(name: str, raw: str):
    """Convert a text value to the type of DomainConfig.<name>."""
    kinds = {f.name: f for f in fields(DomainConfig)}
    if name not in kinds:
        raise KeyError(name)
    default = DomainConfig()
    current = getattr(default, name)
    if isinstance(current, Pose2):
        return parse_pose(raw)
    if isinstance(current, bool):
        return parse_bool(raw)
    if isinstance(current, int):
        return int(raw)
    if name == "peg_shape":
        return raw.strip()
    if raw.strip().lower() in ("none", ""):
        return None
    return float(raw)


def domain_from_pairs(pairs, path=None) -> DomainConfig:
    """Build a DomainConfig from (line_number, key, raw_value) triples."""
    values = {}
    for line_no, key, raw in pairs:
        try:
            values[key] = coerce_field(key, raw)
        except KeyError:
            raise ConfigError(f"unknown domain parameter {key!r}", path, line_no) from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", path, line_no) from None
    cfg = DomainConfig(**values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), path) from None


def load_domain(path) -> DomainConfig:
    from residrl.config import read_key_values

    path = Path(path)
    if not path.exists():
        raise ConfigError("domain file not found", path)
    return domain_from_pairs(read_key_values(path, allow_include=False), path)


def save_domain(cfg: DomainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_text())
    return path


# presets ----------------------------------------------------------------

def sim_domain(**overrides) -> DomainConfig:
    """Nominal simulation domain used for base-policy pretraining."""
    return replace(DomainConfig(), **overrides).validate()


def pretrain_domain(**overrides) -> DomainConfig:
    """Nominal domain with per-episode socket randomization (±5 mm, ±5 deg)."""
    return sim_domain(socket_jitter_xy=5.0, socket_jitter_yaw=5.0, **overrides)


def real_domain(**overrides) -> DomainConfig:
    """Perturbed deployment domain: dynamics, clearance, sensing and appearance all differ."""
    base = replace(
        DomainConfig(),
        contact_friction=0.6,
        controller_stiffness_k=70.0,
        socket_clearance=0.6,
        goal_noise_xy=1.0,
        sensor_noise_ft=2.0,
        render_seed=1,
        plai_mode=True,
    )
    return replace(base, **overrides).validate()


def transfer_domain(task: str = "rectangular", **overrides) -> DomainConfig:
    """Unseen-task domains for the cross-task transfer scenario."""
    if task == "rectangular":
        base = real_domain(peg_shape="rectangular", init_yaw_noise=3.0, socket_clearance=0.2, render_seed=2)
    elif task == "tight":
        base = real_domain(socket_clearance=0.15, render_seed=3)
    else:
        raise ConfigError(f"unknown transfer task {task!r} (expected 'rectangular' or 'tight')")
    return replace(base, **overrides).validate()


def domain_dict(cfg: DomainConfig) -> dict:
    out = asdict(cfg)
    for key, value in out.items():
        if isinstance(getattr(cfg, key), Pose2):
            out[key] = list(getattr(cfg, key).as_array())
    return out

