"""
Deterministic planar peg-in-hole simulator.

The plane is (lateral x, insertion y); theta is the yaw about the insertion
axis. The end-effector point is the top centre of the peg; the socket frame
origin is the floor centre of the slot. Incremental pose targets are tracked
by a Cartesian impedance controller integrated with semi-implicit Euler, and
peg/socket interaction uses penalty contact between axis-aligned boxes.

Every kernel works on a leading batch dimension so the same code serves the
single-instance API (`reset`, `step`, `check_success`, `render`) and the
vectorized environment used for PPO rollouts.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from residrl import render as raster
from residrl.domain import DomainConfig
from residrl.geom import ActionDelta, Pose2, Twist2, pose_error, within_success, wrap_deg
from residrl.seeding import derive_seed, make_rng

BASE_OBS_DIM = 12
PROPRIO_DIM = 9
GOAL_DIM = 3

# fixed input normalisation for the networks
BASE_OBS_SCALE = np.array(
    [1 / 20, 1 / 20, 1 / 10, 1 / 50, 1 / 50, 1 / 50, 1 / 20, 1 / 20, 1 / 10, 1 / 10, 1 / 10, 1 / 5],
    dtype=np.float64,
)
PROPRIO_SCALE = np.array(
    [1 / 20, 1 / 20, 1 / 10, 1 / 50, 1 / 50, 1 / 50, 1 / 200, 1 / 200, 1 / 50], dtype=np.float64
)
GOAL_SCALE = np.array([1 / 20, 1 / 20, 1 / 10], dtype=np.float64)

FRONT = "front"
WRIST = "wrist"
VIEWS = (FRONT, WRIST)


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class SimState:
    ee_pose: Pose2
    ee_twist: Twist2
    target_pose: Pose2
    goal_pose_true: Pose2
    goal_pose_noisy: Pose2
    contact_wrench: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    step_count: int = 0
    seed: int = 0
    last_action: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    diverged: bool = False


@dataclass(frozen=True)
class BaseObs:
    """Privileged low-dimensional observation of the base policy (noisy goal, no images)."""
    ee_pose: Pose2
    ee_twist: Twist2
    goal_pose_noisy: Pose2
    goal_minus_ee: Tuple[float, float, float]

    def as_array(self) -> np.ndarray:
        return np.concatenate([
            self.ee_pose.as_array(),
            self.ee_twist.as_array(),
            self.goal_pose_noisy.as_array(),
            np.asarray(self.goal_minus_ee, dtype=np.float64),
        ])


@dataclass(frozen=True)
class ResidualObs:
    """Deployment-available observation: proprioception, force/torque and two cameras.

    Deliberately carries no goal or socket pose.
    """
    ee_pose: Pose2
    ee_twist: Twist2
    contact_wrench: Tuple[float, float, float]
    image_front: np.ndarray = field(repr=False)
    image_wrist: np.ndarray = field(repr=False)

    def proprio(self) -> np.ndarray:
        return np.concatenate([
            self.ee_pose.as_array(),
            self.ee_twist.as_array(),
            np.asarray(self.contact_wrench, dtype=np.float64),
        ])

    def images_uint8(self) -> np.ndarray:
        return raster.to_uint8(np.stack([self.image_front, self.image_wrist]))


# ---------------------------------------------------------------- geometry

def socket_pose_from_goal(goal_true, cfg: DomainConfig) -> np.ndarray:
    goal_true = np.asarray(goal_true, dtype=np.float64)
    socket = goal_true.copy()
    socket[..., 1] -= cfg.goal_offset
    return socket


def peg_half_width(cfg: DomainConfig, yaw_rel) -> Tuple[np.ndarray, np.ndarray]:
    """In-plane half width of the peg and its derivative per degree of relative yaw.

    Round-analog pegs are yaw invariant; rectangular-analog pegs present
    w|cos d| + t|sin d| to the slot.
    """
    yaw_rel = np.asarray(yaw_rel, dtype=np.float64)
    if cfg.peg_shape == "round":
        return np.full_like(yaw_rel, cfg.peg_width / 2.0), np.zeros_like(yaw_rel)
    rad = np.deg2rad(yaw_rel)
    c, s = np.cos(rad), np.sin(rad)
    half = 0.5 * (cfg.peg_width * np.abs(c) + cfg.peg_thickness * np.abs(s))
    dhalf = 0.5 * (-cfg.peg_width * np.sign(c) * s + cfg.peg_thickness * np.sign(s) * c)
    return half, dhalf * (np.pi / 180.0)


def peg_box(cfg: DomainConfig, pose, socket_yaw) -> Tuple[np.ndarray, np.ndarray]:
    """(N,4) peg boxes [xmin, xmax, ymin, ymax] and (N,) d(half width)/d(yaw)."""
    pose = np.atleast_2d(pose)
    half, dhalf = peg_half_width(cfg, wrap_deg(pose[:, 2] - np.asarray(socket_yaw)))
    half = np.atleast_1d(half)
    dhalf = np.atleast_1d(dhalf)
    box = np.stack([pose[:, 0] - half, pose[:, 0] + half, pose[:, 1] - cfg.peg_height, pose[:, 1]], axis=-1)
    return box, dhalf


def socket_boxes(cfg: DomainConfig, socket) -> np.ndarray:
    """(N,3,4) boxes for the left wall, right wall and floor of the slot."""
    socket = np.atleast_2d(socket)
    sx, sy = socket[:, 0], socket[:, 1]
    hw = cfg.slot_width / 2.0
    ww = cfg.socket_wall_width
    left = np.stack([sx - hw - ww, sx - hw, sy, sy + cfg.socket_depth], axis=-1)
    right = np.stack([sx + hw, sx + hw + ww, sy, sy + cfg.socket_depth], axis=-1)
    floor = np.stack([sx - hw - ww, sx + hw + ww, sy - cfg.socket_base, sy], axis=-1)
    return np.stack([left, right, floor], axis=1)


def box_overlap(peg: np.ndarray, boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ox = np.minimum(peg[:, None, 1], boxes[..., 1]) - np.maximum(peg[:, None, 0], boxes[..., 0])
    oy = np.minimum(peg[:, None, 3], boxes[..., 3]) - np.maximum(peg[:, None, 2], boxes[..., 2])
    return ox, oy


def contact_pairs(cfg: DomainConfig, pose, vel, socket) -> np.ndarray:
    """Per-pair contact wrench on the peg, shape (N, 3 socket boxes, [fx, fy, tau]).

    Normal force is contact_stiffness times the overlap along the minimum
    overlap axis; friction is viscous along the tangent, capped by mu * normal.
    """
    pose = np.atleast_2d(pose)
    vel = np.atleast_2d(vel)
    socket = np.atleast_2d(socket)
    peg, dhalf = peg_box(cfg, pose, socket[:, 2])
    boxes = socket_boxes(cfg, socket)
    ox, oy = box_overlap(peg, boxes)

    touching = (ox > 0.0) & (oy > 0.0)
    along_x = ox <= oy
    depth = np.where(touching, np.where(along_x, ox, oy), 0.0)
    fn = cfg.contact_stiffness * depth

    peg_cx = 0.5 * (peg[:, 0] + peg[:, 1])
    peg_cy = 0.5 * (peg[:, 2] + peg[:, 3])
    box_cx = 0.5 * (boxes[..., 0] + boxes[..., 1])
    box_cy = 0.5 * (boxes[..., 2] + boxes[..., 3])
    sign_x = np.where(peg_cx[:, None] >= box_cx, 1.0, -1.0)
    sign_y = np.where(peg_cy[:, None] >= box_cy, 1.0, -1.0)

    v_t = np.where(along_x, vel[:, None, 1], vel[:, None, 0])
    cap = cfg.contact_friction * fn
    ft = -np.clip(cfg.friction_damping * v_t, -cap, cap)

    fx = np.where(along_x, fn * sign_x, ft)
    fy = np.where(along_x, ft, fn * sign_y)
    tau = np.where(touching & along_x, -fn * dhalf[:, None], 0.0)
    return np.stack([fx, fy, tau], axis=-1)


def contact_wrench(cfg: DomainConfig, pose, vel, socket) -> np.ndarray:
    return contact_pairs(cfg, pose, vel, socket).sum(axis=1)


def geometry_overlaps(cfg: DomainConfig, pose, socket) -> np.ndarray:
    pose = np.atleast_2d(pose)
    socket = np.atleast_2d(socket)
    peg, _ = peg_box(cfg, pose, socket[:, 2])
    ox, oy = box_overlap(peg, socket_boxes(cfg, socket))
    return np.any((ox > 0.0) & (oy > 0.0), axis=1)


# ---------------------------------------------------------------- dynamics

def semi_implicit_euler(x, v, target, f_ext, mass, k, c, dt):
    """One substep of m*a = k*(target - x) - c*v + f_ext; velocity first, then position."""
    a = (k * (target - x) - c * v + f_ext) / mass
    v_next = v + dt * a
    x_next = x + dt * v_next
    return x_next, v_next


def kinetic_energy(cfg: DomainConfig, vel) -> np.ndarray:
    vel = np.atleast_2d(vel)
    return 0.5 * cfg.virtual_mass * np.sum(vel[:, :2] ** 2, axis=1) + 0.5 * cfg.virtual_inertia * vel[:, 2] ** 2


def integrate_control_step(cfg: DomainConfig, pose, vel, target, socket, trace: Optional[list] = None):
    """Run control_dt / physics_dt substeps.

    Returns (pose, vel, applied); `applied` is the mean over substeps of the
    contact wrench actually applied, what a force/torque sensor averaging over
    the control period reads.
    """
    pose = np.array(pose, dtype=np.float64, ndmin=2)
    vel = np.array(vel, dtype=np.float64, ndmin=2)
    target = np.atleast_2d(target)
    dt = cfg.physics_dt
    applied = np.zeros_like(pose)
    for _ in range(cfg.substeps):
        wrench = contact_wrench(cfg, pose, vel, socket)
        applied += wrench
        xy, vxy = semi_implicit_euler(
            pose[:, :2], vel[:, :2], target[:, :2], wrench[:, :2],
            cfg.virtual_mass, cfg.controller_stiffness_k, cfg.controller_damping_c, dt,
        )
        # yaw error measured on the circle so the spring never takes the long way round
        yaw_target = pose[:, 2] + wrap_deg(target[:, 2] - pose[:, 2])
        theta, omega = semi_implicit_euler(
            pose[:, 2], vel[:, 2], yaw_target, wrench[:, 2],
            cfg.virtual_inertia, cfg.rotational_stiffness, cfg.rotational_damping, dt,
        )
        pose = np.column_stack([xy, np.atleast_1d(wrap_deg(theta))])
        vel = np.column_stack([vxy, omega])
        if trace is not None:
            trace.append({"wrench": wrench.copy(), "kinetic_energy": kinetic_energy(cfg, vel)})
    return pose, vel, applied / cfg.substeps


def next_target(cfg: DomainConfig, pose, target, last_action, action) -> Tuple[np.ndarray, np.ndarray]:
    """Controller setpoint after an incremental action; returns (target, smoothed action)."""
    pose = np.atleast_2d(pose)
    action = np.atleast_2d(action)
    smoothed = cfg.action_smoothing * np.atleast_2d(last_action) + (1.0 - cfg.action_smoothing) * action
    base = np.atleast_2d(target) if cfg.plai_mode else pose
    scale = np.array([cfg.action_scale_trans, cfg.action_scale_trans, cfg.action_scale_rot])
    raw = base + smoothed * scale
    lead = np.clip(raw[:, :2] - pose[:, :2], -cfg.target_leash_trans, cfg.target_leash_trans)
    yaw_lead = np.clip(wrap_deg(raw[:, 2] - pose[:, 2]), -cfg.target_leash_rot, cfg.target_leash_rot)
    new_target = np.column_stack([pose[:, :2] + lead, np.atleast_1d(wrap_deg(pose[:, 2] + yaw_lead))])
    return new_target, smoothed


def success_mask(pose, goal_true) -> np.ndarray:
    pose = np.atleast_2d(pose)
    goal_true = np.atleast_2d(goal_true)
    trans = np.hypot(pose[:, 0] - goal_true[:, 0], pose[:, 1] - goal_true[:, 1])
    rot = np.abs(wrap_deg(pose[:, 2] - goal_true[:, 2]))
    return within_success(trans, rot)


def _divergence_mask(cfg: DomainConfig, pose, vel) -> np.ndarray:
    finite = np.all(np.isfinite(pose), axis=1) & np.all(np.isfinite(vel), axis=1)
    inside = np.all(np.abs(np.nan_to_num(pose[:, :2], nan=np.inf)) <= cfg.workspace_bound, axis=1)
    return ~(finite & inside)


def _step_arrays(cfg: DomainConfig, pose, vel, target, last_action, goal_true, action, trace=None):
    """Shared batched transition. Returns dict of post-step arrays plus success/diverged masks."""
    new_target, smoothed = next_target(cfg, pose, target, last_action, action)
    socket = socket_pose_from_goal(goal_true, cfg)
    with np.errstate(over="ignore", invalid="ignore"):
        new_pose, new_vel, wrench = integrate_control_step(cfg, pose, vel, new_target, socket, trace)
    diverged = _divergence_mask(cfg, new_pose, new_vel)
    if np.any(diverged):
        new_pose = np.where(diverged[:, None], np.atleast_2d(pose), new_pose)
        new_vel = np.where(diverged[:, None], 0.0, new_vel)
        new_target = np.where(diverged[:, None], np.atleast_2d(pose), new_target)
        # reverted rows report the static contact at the restored pose
        wrench = np.where(diverged[:, None], contact_wrench(cfg, new_pose, new_vel, socket), wrench)
    success = success_mask(new_pose, goal_true) & ~diverged
    return {
        "pose": new_pose,
        "vel": new_vel,
        "target": new_target,
        "last_action": smoothed,
        "wrench": wrench,
        "success": success,
        "diverged": diverged,
    }


def _initial_arrays(cfg: DomainConfig, seed: int) -> dict:
    """Initial-state sample for one episode seed."""
    rng = make_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=7)
    jitter = np.array([cfg.socket_jitter_xy, cfg.socket_jitter_xy, cfg.socket_jitter_yaw]) * u[0:3]
    noise = np.array([cfg.goal_noise_xy, cfg.goal_noise_xy, cfg.goal_noise_yaw]) * u[3:6]
    init_yaw = cfg.init_yaw_noise * u[6]

    offset = np.array([0.0, cfg.goal_offset, 0.0])
    estimated_socket = cfg.socket_pose_true.as_array() + jitter
    socket = estimated_socket + cfg.socket_offset.as_array()
    goal_true = socket + offset
    goal_noisy = estimated_socket + offset + noise
    goal_true[2] = wrap_deg(goal_true[2])
    goal_noisy[2] = wrap_deg(goal_noisy[2])

    ee = goal_noisy + np.array([0.0, cfg.approach_height, init_yaw])
    ee[2] = wrap_deg(ee[2])
    clear_y = socket[1] + cfg.socket_depth + cfg.peg_height + cfg.start_clearance
    ee[1] = max(ee[1], clear_y)
    return {"pose": ee, "goal_true": goal_true, "goal_noisy": goal_noisy}


# ---------------------------------------------------------------- single-instance API

def reset(cfg: DomainConfig, rng_seed: int) -> SimState:
    """Start an episode: noisy goal estimate, end-effector above it, zero twist."""
    init = _initial_arrays(cfg, rng_seed)
    ee = Pose2.from_array(init["pose"])
    return SimState(
        ee_pose=ee,
        ee_twist=Twist2(),
        target_pose=ee,
        goal_pose_true=Pose2.from_array(init["goal_true"]),
        goal_pose_noisy=Pose2.from_array(init["goal_noisy"]),
        contact_wrench=(0.0, 0.0, 0.0),
        step_count=0,
        seed=int(rng_seed),
    )


def check_success(state: SimState, cfg: DomainConfig) -> bool:
    """Success against the TRUE goal: within 3 mm and 5 deg."""
    trans_err, rot_err = pose_error(state.ee_pose, state.goal_pose_true)
    return bool(within_success(trans_err, rot_err))


def observe_base(state: SimState) -> BaseObs:
    diff = state.goal_pose_noisy.as_array() - state.ee_pose.as_array()
    diff[2] = wrap_deg(diff[2])
    return BaseObs(state.ee_pose, state.ee_twist, state.goal_pose_noisy, tuple(float(v) for v in diff))


def sensed_wrench(state: SimState, cfg: DomainConfig) -> Tuple[float, float, float]:
    wrench = np.asarray(state.contact_wrench, dtype=np.float64)
    if cfg.sensor_noise_ft > 0.0:
        wrench = wrench + make_rng(state.seed, 1, state.step_count).normal(0.0, cfg.sensor_noise_ft, size=3)
    return tuple(float(v) for v in wrench)


def render(state: SimState, cfg: DomainConfig, view: str, *, draw_peg: bool = True,
           draw_socket: bool = True) -> np.ndarray:
    """32x32 grayscale view in [0, 1]; front is fixed in the world, wrist follows the peg."""
    labels, world = render_labels(state, cfg, view, draw_peg=draw_peg, draw_socket=draw_socket)
    return raster.shade(labels, world, raster.palette(cfg.render_seed))


def render_labels(state: SimState, cfg: DomainConfig, view: str, *, draw_peg: bool = True,
                  draw_socket: bool = True):
    if view == FRONT:
        center = cfg.front_camera.as_array()
        center[2] = 0.0
        fov = cfg.front_view_mm
    elif view == WRIST:
        ee = state.ee_pose
        rad = np.deg2rad(ee.theta)
        # camera looks at the peg tip, rotating with the end-effector
        drop = cfg.peg_height
        center = np.array([ee.x + drop * np.sin(rad), ee.y - drop * np.cos(rad), ee.theta])
        fov = cfg.wrist_view_mm
    else:
        raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}")
    world = raster.pixel_centers(center, fov, cfg.image_size)
    socket = socket_pose_from_goal(state.goal_pose_true.as_array(), cfg)
    peg = peg_box(cfg, state.ee_pose.as_array(), socket[2])[0][0] if draw_peg else None
    walls = socket_boxes(cfg, socket)[0] if draw_socket else None
    return raster.rasterize(world, peg, walls), world


def observe_residual(state: SimState, cfg: DomainConfig, images: bool = True) -> ResidualObs:
    if images:
        front = render(state, cfg, FRONT)
        wrist = render(state, cfg, WRIST)
    else:
        blank = np.zeros((cfg.image_size, cfg.image_size))
        front, wrist = blank, blank
    return ResidualObs(state.ee_pose, state.ee_twist, sensed_wrench(state, cfg), front, wrist)


def step(state: SimState, cfg: DomainConfig, action: ActionDelta, *, images: bool = True,
         trace: Optional[list] = None):
    """Advance one control period. Returns (SimState, BaseObs, ResidualObs, reward, done)."""
    out = _step_arrays(
        cfg,
        state.ee_pose.as_array(),
        state.ee_twist.as_array(),
        state.target_pose.as_array(),
        np.asarray(state.last_action, dtype=np.float64),
        state.goal_pose_true.as_array(),
        action.as_array(),
        trace,
    )
    diverged = bool(out["diverged"][0])
    success = bool(out["success"][0])
    new_state = SimState(
        ee_pose=Pose2.from_array(out["pose"][0]),
        ee_twist=Twist2.from_array(out["vel"][0]),
        target_pose=Pose2.from_array(out["target"][0]),
        goal_pose_true=state.goal_pose_true,
        goal_pose_noisy=state.goal_pose_noisy,
        contact_wrench=tuple(float(v) for v in out["wrench"][0]),
        step_count=state.step_count + 1,
        seed=state.seed,
        last_action=tuple(float(v) for v in out["last_action"][0]),
        diverged=diverged,
    )
    reward = 1.0 if success else 0.0
    done = success or diverged or new_state.step_count >= cfg.horizon
    return new_state, observe_base(new_state), observe_residual(new_state, cfg, images), reward, done


def disassembly_path(cfg: DomainConfig, n_waypoints: int, goal: Optional[Pose2] = None) -> List[Pose2]:
    """Straight extraction path from the inserted goal to approach_height above it, in assembly order."""
    if n_waypoints < 2:
        raise ValueError("n_waypoints must be >= 2")
    goal = cfg.nominal_goal() if goal is None else goal
    heights = np.linspace(cfg.approach_height, 0.0, n_waypoints)
    return [Pose2(goal.x, goal.y + h, goal.theta) for h in heights]


class InsertionEnv:
    """Stateful single-instance wrapper; owned by one worker at a time."""

    def __init__(self, cfg: DomainConfig, images: bool = True):
        self.cfg = cfg.validate()
        self.images = images
        self.state: Optional[SimState] = None

    def reset(self, seed: int) -> Tuple[BaseObs, ResidualObs]:
        self.state = reset(self.cfg, seed)
        return observe_base(self.state), observe_residual(self.state, self.cfg, self.images)

    def step(self, action: ActionDelta):
        self.state, base_obs, res_obs, reward, done = step(self.state, self.cfg, action, images=self.images)
        return base_obs, res_obs, reward, done

    @property
    def success(self) -> bool:
        return self.state is not None and check_success(self.state, self.cfg)

    @property
    def in_contact(self) -> bool:
        return self.state is not None and bool(np.any(np.asarray(self.state.contact_wrench) != 0.0))


# ---------------------------------------------------------------- vectorized environment

def base_obs_arrays(pose, vel, goal_noisy) -> np.ndarray:
    diff = goal_noisy - pose
    diff[:, 2] = wrap_deg(diff[:, 2])
    return np.concatenate([pose, vel, goal_noisy, diff], axis=1)


class VecInsertionEnv:
    """N independent simulator instances stepped in lockstep, with automatic reset.

    Episode k of instance i is seeded with derive_seed(seed, i, k).
    """

    def __init__(self, cfg: DomainConfig, n_envs: int, seed: int):
        self.cfg = cfg.validate()
        self.n_envs = int(n_envs)
        self.seed = seed
        self.episode_index = np.zeros(self.n_envs, dtype=np.int64)
        n = self.n_envs
        self.pose = np.zeros((n, 3))
        self.vel = np.zeros((n, 3))
        self.target = np.zeros((n, 3))
        self.last_action = np.zeros((n, 3))
        self.goal_true = np.zeros((n, 3))
        self.goal_noisy = np.zeros((n, 3))
        self.steps = np.zeros(n, dtype=np.int64)

    def _reset_index(self, i: int) -> None:
        init = _initial_arrays(self.cfg, derive_seed(self.seed, i, int(self.episode_index[i])))
        self.episode_index[i] += 1
        self.pose[i] = init["pose"]
        self.vel[i] = 0.0
        self.target[i] = init["pose"]
        self.last_action[i] = 0.0
        self.goal_true[i] = init["goal_true"]
        self.goal_noisy[i] = init["goal_noisy"]
        self.steps[i] = 0

    def reset(self) -> np.ndarray:
        for i in range(self.n_envs):
            self._reset_index(i)
        return self.observe()

    def observe(self) -> np.ndarray:
        return base_obs_arrays(self.pose, self.vel, self.goal_noisy)

    def step(self, actions: np.ndarray):
        """Step all instances with pre-clamped actions (N,3).

        Returns (next_obs, success, done, info). Finished instances are reset
        before next_obs is built; info holds their pre-reset pose and goal.
        """
        out = _step_arrays(self.cfg, self.pose, self.vel, self.target, self.last_action, self.goal_true, actions)
        self.pose, self.vel, self.target = out["pose"], out["vel"], out["target"]
        self.last_action = out["last_action"]
        self.steps += 1
        success = out["success"]
        truncated = self.steps >= self.cfg.horizon
        done = success | out["diverged"] | truncated
        info = {
            "pose": self.pose.copy(),
            "goal_true": self.goal_true.copy(),
            "diverged": out["diverged"],
            "steps": self.steps.copy(),
        }
        for i in np.flatnonzero(done):
            self._reset_index(int(i))
        return self.observe(), success, done, info


def zero_action() -> ActionDelta:
    return ActionDelta(0.0, 0.0, 0.0)


def poses_of(states: Sequence[SimState]) -> np.ndarray:
    return np.stack([s.ee_pose.as_array() for s in states])
