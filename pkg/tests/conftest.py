from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from residrl.networks import as_tensor
from residrl.replay import Trajectory, Transition

REPO_ROOT = Path(__file__).resolve().parents[1]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    for name in ("RESIDRL_OUT", "RESIDRL_RESULTS_CSV"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("RESIDRL_PROGRESS", "false")


def make_trajectory(length: int, tag: float = 0.0, image_size: int = 4, success: bool = True) -> Trajectory:
    """Synthetic trajectory; every observation row carries `tag` in proprio[:, 0]."""
    proprio = np.zeros((length + 1, 9))
    proprio[:, 0] = tag
    proprio[:, 1] = np.arange(length + 1)
    rewards = np.zeros(length)
    dones = np.zeros(length, dtype=bool)
    if length:
        rewards[-1] = 1.0 if success else 0.0
        dones[-1] = True
    return Trajectory(
        images=np.full((length + 1, 2, image_size, image_size), 7, dtype=np.uint8),
        proprio=proprio,
        goal=np.tile([0.0, 20.0, 0.0], (length + 1, 1)),
        base_actions=np.linspace(-0.5, 0.5, 3 * (length + 1)).reshape(length + 1, 3),
        residual_actions=np.full((length, 3), 0.1),
        rewards=rewards,
        dones=dones,
    )


def make_transition(tag: float = 0.0, image_size: int = 4, reward: float = 0.0) -> Transition:
    proprio = np.zeros(9)
    proprio[0] = tag
    images = np.zeros((2, image_size, image_size), dtype=np.uint8)
    return Transition(
        images, proprio, np.zeros(3), np.zeros(3), np.zeros(3), reward, False,
        images, proprio, np.zeros(3), np.zeros(3),
    )


class ScriptedBase(nn.Module):
    """Proportional controller on the goal offset with a fixed small std; stands in for a trained base policy."""

    def __init__(self, gain: float = 0.25, std: float = 0.01):
        super().__init__()
        self.gain = gain
        self.std = std

    def forward(self, obs):
        diff = as_tensor(obs)[..., 9:12]
        mean = torch.clamp(self.gain * diff, -1.0, 1.0)
        return mean, torch.full_like(mean, self.std)
