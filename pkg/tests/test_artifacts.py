import numpy as np
import pytest
import torch

from residrl import artifacts
from residrl.base_trainer import BaseAgent
from residrl.config import RlpdConfig
from residrl.errors import MissingArtifactError, OutputExistsError, ResidrlError
from residrl.networks import backward, flat_parameters, make_optimizer, optimizer_step
from residrl.residual_learner import DemoCollection, ResidualAgent

from .conftest import make_trajectory


def _one_step(agent, optimizer):
    loss = sum((p ** 2).sum() for p in agent.parameters())
    backward(list(agent.parameters()), loss)
    optimizer_step(optimizer)


def test_base_checkpoint_round_trip(tmp_path):
    agent = BaseAgent(hidden=16, init_log_std=-0.3, seed=2)
    optimizer = make_optimizer(agent.parameters(), 1e-3)
    _one_step(agent, optimizer)
    path = tmp_path / "base.ckpt"
    digest = artifacts.save_checkpoint(path, agent, "base", agent.describe(), {"ppo": optimizer}, meta={"seed": 2})

    loaded, loaded_opt, header = artifacts.load_base_agent(path)
    assert header["parameter_hash"] == digest == artifacts.parameter_hash(loaded)
    assert header["meta"] == {"seed": 2}
    np.testing.assert_array_equal(flat_parameters(loaded), flat_parameters(agent))
    assert loaded_opt.param_groups[0]["lr"] == 1e-3
    for p, q in zip(agent.parameters(), loaded.parameters()):
        original, restored = optimizer.state[p], loaded_opt.state[q]
        assert torch.equal(original["exp_avg"], restored["exp_avg"])
        assert torch.equal(original["exp_avg_sq"], restored["exp_avg_sq"])
        assert float(original["step"]) == float(restored["step"])

    # training continues identically after a reload
    _one_step(agent, optimizer)
    _one_step(loaded, loaded_opt)
    np.testing.assert_array_equal(flat_parameters(loaded), flat_parameters(agent))


def test_residual_checkpoint_round_trip(tmp_path):
    cfg = RlpdConfig(hidden_size=16, use_images=False, base_action_input=False)
    agent = ResidualAgent(cfg, image_size=8, seed=5)
    path = tmp_path / "residual.ckpt"
    digest = artifacts.save_checkpoint(path, agent, "residual", agent.describe(), agent.optimizers())
    loaded, header = artifacts.load_residual_agent(path)
    assert loaded.cfg == cfg
    assert loaded.image_size == 8
    assert artifacts.parameter_hash(loaded) == digest
    np.testing.assert_array_equal(flat_parameters(loaded.target_critic), flat_parameters(agent.target_critic))


def test_wrong_checkpoint_kind(tmp_path):
    agent = BaseAgent(hidden=8)
    path = tmp_path / "base.ckpt"
    artifacts.save_checkpoint(path, agent, "base", agent.describe())
    with pytest.raises(ResidrlError, match="expected a residual checkpoint"):
        artifacts.load_residual_agent(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"nothing to see here")
    with pytest.raises(ResidrlError, match="bad magic"):
        artifacts.read_checkpoint(path)


def test_trajectory_record_is_stable(tmp_path):
    traj = make_trajectory(5, tag=3.0, image_size=6)
    first = artifacts.write_trajectory(tmp_path / "a.bin", traj)
    loaded = artifacts.read_trajectory(first)
    second = artifacts.write_trajectory(tmp_path / "b.bin", loaded)
    assert first.read_bytes() == second.read_bytes()
    assert len(loaded) == 5
    np.testing.assert_array_equal(loaded.images, traj.images)
    np.testing.assert_array_equal(loaded.dones, traj.dones)


def test_demo_directory(tmp_path):
    collection = DemoCollection([make_trajectory(3), make_trajectory(7)], attempts=4, successes=2, seed=9)
    directory = artifacts.save_demos(tmp_path / "demos", collection, "abc123")
    demos, manifest = artifacts.load_demos(directory)
    assert [len(t) for t in demos] == [3, 7]
    assert manifest["lengths"] == [3, 7]
    assert manifest["zero_shot_success"] == 0.5
    assert manifest["domain_digest"] == "abc123"

    with pytest.raises(OutputExistsError) as info:
        artifacts.save_demos(directory, collection, "abc123")
    assert info.value.exit_code == 5
    artifacts.save_demos(directory, DemoCollection([make_trajectory(2)], 1, 1, 0), "def", force=True)
    assert len(artifacts.load_demos(directory)[0]) == 1


def test_existing_output_needs_force(tmp_path):
    path = tmp_path / "out.csv"
    path.write_text("x\n")
    with pytest.raises(OutputExistsError):
        artifacts.ensure_writable(path)
    assert artifacts.ensure_writable(path, force=True) == path
    assert not path.exists()


def test_missing_artifact(tmp_path):
    with pytest.raises(MissingArtifactError) as info:
        artifacts.require(tmp_path / "base.ckpt", "run pretrain first")
    assert info.value.exit_code == 4
    assert "run pretrain first" in str(info.value)
    with pytest.raises(MissingArtifactError):
        artifacts.load_demos(tmp_path / "demos")
