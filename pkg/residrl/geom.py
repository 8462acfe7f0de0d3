"""
Planar rigid-body math.

Lengths are millimetres and angles are degrees everywhere in the package; all
success thresholds (3 mm, 5 deg) and action scales are expressed in these
units. Angles are wrapped to (-180, 180].
"""

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from residrl.errors import NumericalDivergenceError

SUCCESS_TRANS_MM = 3.0
SUCCESS_ROT_DEG = 5.0


def wrap_deg(angle):
    """Wrap degrees into (-180, 180]; works on scalars and arrays."""
    wrapped = 180.0 - np.mod(180.0 - np.asarray(angle, dtype=np.float64), 360.0)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.theta])):
            raise NumericalDivergenceError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_deg(self.theta))

    @classmethod
    def from_array(cls, values: Iterable[float]) -> "Pose2":
        x, y, theta = (float(v) for v in values)
        return cls(x, y, theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)


@dataclass(frozen=True)
class Twist2:
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.vx, self.vy, self.omega])):
            raise NumericalDivergenceError(f"non-finite twist ({self.vx}, {self.vy}, {self.omega})")
        object.__setattr__(self, "vx", float(self.vx))
        object.__setattr__(self, "vy", float(self.vy))
        object.__setattr__(self, "omega", float(self.omega))

    @classmethod
    def from_array(cls, values: Iterable[float]) -> "Twist2":
        vx, vy, omega = (float(v) for v in values)
        return cls(vx, vy, omega)

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega], dtype=np.float64)


@dataclass(frozen=True)
class ActionDelta:
    """Incremental pose target in normalized units, each component in [-1, 1]."""
    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    def __post_init__(self):
        for name in ("dx", "dy", "dtheta"):
            value = float(getattr(self, name))
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"ActionDelta.{name}={value} outside [-1, 1]; use clamp_action")
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=np.float64)


def compose(p: Pose2, d: Pose2) -> Pose2:
    """Componentwise addition with theta wrap."""
    return Pose2(p.x + d.x, p.y + d.y, p.theta + d.theta)


def pose_error(p: Pose2, goal: Pose2) -> Tuple[float, float]:
    """(Euclidean translation error in mm, absolute wrapped yaw error in deg)."""
    trans_err = float(np.hypot(p.x - goal.x, p.y - goal.y))
    rot_err = abs(wrap_deg(p.theta - goal.theta))
    return trans_err, rot_err


def within_success(trans_err, rot_err):
    return (np.asarray(trans_err) <= SUCCESS_TRANS_MM) & (np.asarray(rot_err) <= SUCCESS_ROT_DEG)


def clamp_array(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericalDivergenceError(f"non-finite action {a.tolist()}: upstream numerical divergence")
    return np.clip(a, -1.0, 1.0)


def clamp_action(a) -> ActionDelta:
    """Componentwise clamp of a raw 3-vector to [-1, 1]."""
    dx, dy, dtheta = clamp_array(np.reshape(a, 3))
    return ActionDelta(dx, dy, dtheta)
