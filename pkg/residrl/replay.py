"""
Demonstration and online replay for residual training.

Demonstrations are kept as whole trajectories so the median episode length
can gate new entries; online experience is a ring buffer of preallocated
arrays. Both sides are guarded by a lock so an acting thread can append while
an updating thread samples.
"""

import threading
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from residrl.sim import PROPRIO_DIM, ResidualObs

FIELDS = (
    "images", "proprio", "goal", "base_action", "residual_action", "reward", "done",
    "next_images", "next_proprio", "next_goal", "next_base_action",
)


@dataclass(frozen=True)
class Transition:
    """One step (s_r, a_b, a_r, r, done, s_r', a_b'); actions are the pre-clamp values.

    `goal` holds the noisy goal estimate and is read only by the state-residual variant.
    """
    images: np.ndarray
    proprio: np.ndarray
    goal: np.ndarray
    base_action: np.ndarray
    residual_action: np.ndarray
    reward: float
    done: bool
    next_images: np.ndarray
    next_proprio: np.ndarray
    next_goal: np.ndarray
    next_base_action: np.ndarray


@dataclass
class Trajectory:
    """A complete episode; observation-aligned arrays carry T+1 rows, action-aligned ones T."""
    images: np.ndarray            # (T+1, 2, H, W) uint8
    proprio: np.ndarray           # (T+1, 9)
    goal: np.ndarray              # (T+1, 3)
    base_actions: np.ndarray      # (T+1, 3)
    residual_actions: np.ndarray  # (T, 3)
    rewards: np.ndarray           # (T,)
    dones: np.ndarray             # (T,)

    def __post_init__(self):
        t = len(self.residual_actions)
        obs_rows = {len(self.images), len(self.proprio), len(self.goal), len(self.base_actions)}
        if obs_rows != {t + 1} or len(self.rewards) != t or len(self.dones) != t:
            raise ValueError(f"inconsistent trajectory arrays for {t} transitions")

    def __len__(self) -> int:
        return len(self.residual_actions)

    @property
    def success(self) -> bool:
        return bool(len(self) and self.rewards[-1] == 1.0)

    def transition(self, t: int) -> Transition:
        return Transition(
            self.images[t], self.proprio[t], self.goal[t], self.base_actions[t], self.residual_actions[t],
            float(self.rewards[t]), bool(self.dones[t]),
            self.images[t + 1], self.proprio[t + 1], self.goal[t + 1], self.base_actions[t + 1],
        )

    def columns(self) -> Dict[str, np.ndarray]:
        """Column arrays for all T transitions."""
        return {
            "images": self.images[:-1],
            "proprio": self.proprio[:-1],
            "goal": self.goal[:-1],
            "base_action": self.base_actions[:-1],
            "residual_action": self.residual_actions,
            "reward": self.rewards.astype(np.float64),
            "done": self.dones.astype(np.float64),
            "next_images": self.images[1:],
            "next_proprio": self.proprio[1:],
            "next_goal": self.goal[1:],
            "next_base_action": self.base_actions[1:],
        }


class TrajectoryBuilder:
    """Accumulates one episode step by step while acting."""

    def __init__(self):
        self.images, self.proprio, self.goal, self.base_actions = [], [], [], []
        self.residual_actions, self.rewards, self.dones = [], [], []

    def observe(self, obs: ResidualObs, goal, base_action) -> None:
        self.images.append(obs.images_uint8())
        self.proprio.append(obs.proprio())
        self.goal.append(np.asarray(goal, dtype=np.float64))
        self.base_actions.append(np.asarray(base_action, dtype=np.float64))

    def act(self, residual_action, reward: float, done: bool) -> None:
        self.residual_actions.append(np.asarray(residual_action, dtype=np.float64))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    def build(self) -> Trajectory:
        return Trajectory(
            images=np.stack(self.images).astype(np.uint8),
            proprio=np.stack(self.proprio),
            goal=np.stack(self.goal),
            base_actions=np.stack(self.base_actions),
            residual_actions=np.stack(self.residual_actions).reshape(-1, 3),
            rewards=np.asarray(self.rewards, dtype=np.float64),
            dones=np.asarray(self.dones, dtype=bool),
        )


def demo_gate(traj_length: int, demo_episode_lengths: Sequence[int]) -> bool:
    """Admit iff strictly shorter than the median demo length; an empty multiset rejects."""
    if len(demo_episode_lengths) == 0:
        return False
    return traj_length < float(np.median(demo_episode_lengths))


class DemoBuffer:
    """Whole successful trajectories, bounded by trajectory count.

    On overflow the longest trajectory goes first (oldest among equals).
    """

    def __init__(self, capacity: int = 100):
        self.capacity = capacity
        self.trajectories: List[Trajectory] = []
        self.lengths: List[int] = []
        self._columns: Optional[Dict[str, np.ndarray]] = None

    def __len__(self) -> int:
        return sum(self.lengths)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    def add(self, traj: Trajectory) -> Optional[Trajectory]:
        """Append; returns the evicted trajectory if capacity was exceeded."""
        self.trajectories.append(traj)
        self.lengths.append(len(traj))
        self._columns = None
        if len(self.trajectories) <= self.capacity:
            return None
        longest = max(self.lengths)
        victim = self.lengths.index(longest)
        self.lengths.pop(victim)
        return self.trajectories.pop(victim)

    def median_length(self) -> float:
        return float(np.median(self.lengths)) if self.lengths else float("nan")

    def columns(self) -> Dict[str, np.ndarray]:
        if self._columns is None:
            parts = [t.columns() for t in self.trajectories]
            self._columns = {k: np.concatenate([p[k] for p in parts]) for k in FIELDS}
        return self._columns

    def gather(self, idx: np.ndarray) -> Dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.columns().items()}


class OnlineBuffer:
    """FIFO ring buffer of transitions over preallocated arrays (images stored as uint8)."""

    def __init__(self, capacity: int, image_shape, goal_dim: int = 3):
        self.capacity = int(capacity)
        self.size = 0
        self.cursor = 0
        n = self.capacity
        self.arrays = {
            "images": np.zeros((n, *image_shape), dtype=np.uint8),
            "proprio": np.zeros((n, PROPRIO_DIM)),
            "goal": np.zeros((n, goal_dim)),
            "base_action": np.zeros((n, 3)),
            "residual_action": np.zeros((n, 3)),
            "reward": np.zeros(n),
            "done": np.zeros(n),
            "next_images": np.zeros((n, *image_shape), dtype=np.uint8),
            "next_proprio": np.zeros((n, PROPRIO_DIM)),
            "next_goal": np.zeros((n, goal_dim)),
            "next_base_action": np.zeros((n, 3)),
        }

    def __len__(self) -> int:
        return self.size

    def append(self, tr: Transition) -> None:
        i = self.cursor
        for f in fields(tr):
            self.arrays[f.name][i] = getattr(tr, f.name)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def gather(self, idx: np.ndarray) -> Dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.arrays.items()}


class ReplayStore:
    """Demo and online buffers plus the demo-length multiset used by the gate."""

    def __init__(self, demo_capacity: int, online_capacity: int, image_shape, verbose: bool = False):
        self.demos = DemoBuffer(demo_capacity)
        self.online = OnlineBuffer(online_capacity, image_shape)
        self.lock = threading.Lock()
        self.verbose = verbose
        self.warmup_batches = 0
        self.admitted = 0

    @property
    def demo_episode_lengths(self) -> List[int]:
        return list(self.demos.lengths)

    def add_demo(self, traj: Trajectory) -> None:
        with self.lock:
            self.demos.add(traj)

    def append_online(self, tr: Transition) -> None:
        with self.lock:
            self.online.append(tr)

    def offer_success(self, traj: Trajectory) -> bool:
        """Gate a successful online episode into the demo buffer."""
        with self.lock:
            if not demo_gate(len(traj), self.demos.lengths):
                return False
            self.demos.add(traj)
            self.admitted += 1
            return True

    def diagnostics(self) -> dict:
        return {
            "demo_transitions": len(self.demos),
            "demo_trajectories": self.demos.n_trajectories,
            "demo_median_len": self.demos.median_length(),
            "online_transitions": len(self.online),
            "admitted": self.admitted,
        }


def symmetric_sample(store: ReplayStore, batch_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """batch_size/2 uniform draws (with replacement) from each buffer, demo rows first.

    With an empty online buffer the whole batch comes from the demos.
    """
    if batch_size % 2:
        raise ValueError(f"batch_size must be even, got {batch_size}")
    with store.lock:
        n_demo = len(store.demos)
        n_online = len(store.online)
        if n_demo == 0:
            raise ValueError("demo buffer is empty")
        if n_online == 0:
            store.warmup_batches += 1
            if store.verbose and store.warmup_batches == 1:
                print("⚠️  online buffer empty: sampling the whole batch from demonstrations")
            batch = store.demos.gather(rng.integers(0, n_demo, size=batch_size))
            batch["from_demo"] = np.ones(batch_size, dtype=bool)
            return batch
        half = batch_size // 2
        demo = store.demos.gather(rng.integers(0, n_demo, size=half))
        online = store.online.gather(rng.integers(0, n_online, size=half))
    batch = {k: np.concatenate([demo[k], online[k]]) for k in FIELDS}
    batch["from_demo"] = np.concatenate([np.ones(half, dtype=bool), np.zeros(half, dtype=bool)])
    return batch
