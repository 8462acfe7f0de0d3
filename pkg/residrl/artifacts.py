"""
On-disk artifacts: checkpoints, demonstration records, manifests, tables.

Checkpoint layout: b"RESIDRL\\0", u32 version, u32 header length, JSON
header, little-endian float64 parameters, then per optimizer the Adam first
and second moments of every parameter. Demo records: b"RDEMO\\0", u16
version, u32 transition count, u16 image size, then packed arrays.
"""

import hashlib
import json
import shutil
import struct
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from residrl.errors import MissingArtifactError, OutputExistsError, ResidrlError
from residrl.networks import flat_parameters, load_flat_parameters, make_optimizer
from residrl.replay import Trajectory

CHECKPOINT_MAGIC = b"RESIDRL\0"
CHECKPOINT_VERSION = 1
DEMO_MAGIC = b"RDEMO\0"
DEMO_VERSION = 1


# ---------------------------------------------------------------- paths

def ensure_writable(path, force: bool = False) -> Path:
    """Refuse to replace an existing output unless forced; forced replacement removes it first."""
    path = Path(path)
    if path.exists():
        if not force:
            raise OutputExistsError(path)
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def require(path, hint: str = "") -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, hint)
    return path


def timestamped_dir(root, name: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    path = Path(root) / f"{name}_{stamp}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(require(path).read_text())


def write_csv(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


# ---------------------------------------------------------------- checkpoints

def parameter_hash(module: nn.Module) -> str:
    return hashlib.sha256(flat_parameters(module).astype("<f8").tobytes()).hexdigest()


def _optimizer_blob(name: str, optimizer: torch.optim.Optimizer) -> Tuple[dict, List[np.ndarray]]:
    steps, chunks = [], []
    numel = 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            steps.append(float(state["step"]) if "step" in state else 0.0)
            for key in ("exp_avg", "exp_avg_sq"):
                moment = state.get(key)
                values = moment.detach().numpy().reshape(-1) if moment is not None else np.zeros(p.numel())
                chunks.append(values.astype("<f8"))
            numel += p.numel()
    lr = optimizer.param_groups[0]["lr"]
    return {"name": name, "numel": numel, "steps": steps, "lr": lr}, chunks


def save_checkpoint(path, module: nn.Module, kind: str, spec: dict,
                    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
                    meta: Optional[dict] = None, force: bool = False) -> str:
    """Write a checkpoint; returns the parameter hash."""
    path = ensure_writable(path, force)
    params = flat_parameters(module).astype("<f8")
    layouts, blobs = [], []
    for name, opt in (optimizers or {}).items():
        layout, chunks = _optimizer_blob(name, opt)
        layouts.append(layout)
        blobs.extend(chunks)
    header = {
        "kind": kind,
        "spec": spec,
        "n_params": int(params.size),
        "parameter_hash": hashlib.sha256(params.tobytes()).hexdigest(),
        "optimizers": layouts,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(params.tobytes())
        for chunk in blobs:
            fh.write(chunk.tobytes())
    return header["parameter_hash"]


def read_checkpoint(path) -> Tuple[dict, np.ndarray, bytes]:
    """Returns (header, parameter vector, raw optimizer bytes)."""
    data = require(path, "run the producing command first").read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ResidrlError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ResidrlError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + header_len].decode("utf-8"))
    start = 16 + header_len
    end = start + 8 * header["n_params"]
    params = np.frombuffer(data[start:end], dtype="<f8").astype(np.float64)
    return header, params, data[end:]


def restore_optimizers(module_opts: Dict[str, torch.optim.Optimizer], header: dict, blob: bytes) -> None:
    """Load saved Adam moments and step counts into freshly built optimizers."""
    moments = np.frombuffer(blob, dtype="<f8")
    offset = 0
    for layout in header["optimizers"]:
        opt = module_opts.get(layout["name"])
        params = [p for g in opt.param_groups for p in g["params"]] if opt is not None else []
        if opt is None or len(params) != len(layout["steps"]):
            raise ResidrlError(f"checkpoint optimizer {layout['name']!r} does not match the model")
        for p, step in zip(params, layout["steps"]):
            n = p.numel()
            exp_avg = moments[offset:offset + n]
            exp_avg_sq = moments[offset + n:offset + 2 * n]
            offset += 2 * n
            if step > 0:
                opt.state[p] = {
                    "step": torch.tensor(step, dtype=torch.float32),
                    "exp_avg": torch.tensor(exp_avg.reshape(p.shape), dtype=p.dtype),
                    "exp_avg_sq": torch.tensor(exp_avg_sq.reshape(p.shape), dtype=p.dtype),
                }


def load_base_agent(path):
    """Rebuild a BaseAgent (and its optimizer) from a base checkpoint."""
    from residrl.base_trainer import BaseAgent

    header, params, blob = read_checkpoint(path)
    if header["kind"] != "base":
        raise ResidrlError(f"{path}: expected a base checkpoint, found {header['kind']!r}")
    spec = header["spec"]
    agent = BaseAgent(spec["hidden"], spec["init_log_std"])
    load_flat_parameters(agent, params)
    lr = header["optimizers"][0]["lr"] if header["optimizers"] else 3e-4
    optimizer = make_optimizer(agent.parameters(), lr)
    if header["optimizers"]:
        restore_optimizers({"ppo": optimizer}, header, blob)
    return agent, optimizer, header


def load_residual_agent(path):
    from residrl.config import RlpdConfig
    from residrl.residual_learner import ResidualAgent

    header, params, blob = read_checkpoint(path)
    if header["kind"] != "residual":
        raise ResidrlError(f"{path}: expected a residual checkpoint, found {header['kind']!r}")
    spec = dict(header["spec"])
    image_size = spec.pop("image_size")
    cfg = RlpdConfig(**spec)
    agent = ResidualAgent(cfg, image_size)
    load_flat_parameters(agent, params)
    if header["optimizers"]:
        restore_optimizers(agent.optimizers(), header, blob)
    return agent, header


# ---------------------------------------------------------------- demonstrations

_DEMO_HEADER = struct.Struct("<6sHIH")


def write_trajectory(path, traj: Trajectory) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    size = traj.images.shape[-1]
    with open(path, "wb") as fh:
        fh.write(_DEMO_HEADER.pack(DEMO_MAGIC, DEMO_VERSION, len(traj), size))
        fh.write(np.ascontiguousarray(traj.images, dtype=np.uint8).tobytes())
        for arr in (traj.proprio, traj.goal, traj.base_actions, traj.residual_actions, traj.rewards):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.asarray(traj.dones, dtype=np.uint8).tobytes())
    return path


def read_trajectory(path) -> Trajectory:
    data = require(path).read_bytes()
    magic, version, t, size = _DEMO_HEADER.unpack_from(data)
    if magic != DEMO_MAGIC or version != DEMO_VERSION:
        raise ResidrlError(f"{path}: not a version {DEMO_VERSION} demo record")
    offset = _DEMO_HEADER.size

    def take(count, dtype, shape):
        nonlocal offset
        nbytes = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(data[offset:offset + nbytes], dtype=dtype).reshape(shape)
        offset += nbytes
        return arr.copy()

    images = take((t + 1) * 2 * size * size, np.uint8, (t + 1, 2, size, size))
    proprio = take((t + 1) * 9, "<f8", (t + 1, 9)).astype(np.float64)
    goal = take((t + 1) * 3, "<f8", (t + 1, 3)).astype(np.float64)
    base = take((t + 1) * 3, "<f8", (t + 1, 3)).astype(np.float64)
    residual = take(t * 3, "<f8", (t, 3)).astype(np.float64)
    rewards = take(t, "<f8", (t,)).astype(np.float64)
    dones = take(t, np.uint8, (t,)).astype(bool)
    return Trajectory(images, proprio, goal, base, residual, rewards, dones)


def save_demos(directory, collection, domain_digest: str, force: bool = False) -> Path:
    directory = ensure_writable(directory, force)
    directory.mkdir(parents=True)
    files = []
    for i, traj in enumerate(collection.trajectories):
        name = f"traj_{i:04d}.bin"
        write_trajectory(directory / name, traj)
        files.append(name)
    write_json(directory / "manifest.json", {
        "attempts": collection.attempts,
        "successes": collection.successes,
        "zero_shot_success": collection.success_rate,
        "seed": collection.seed,
        "domain_digest": domain_digest,
        "lengths": [len(t) for t in collection.trajectories],
        "files": files,
    })
    return directory


def load_demos(directory) -> Tuple[List[Trajectory], dict]:
    directory = require(directory, "run collect_demos first")
    manifest = read_json(directory / "manifest.json")
    return [read_trajectory(directory / name) for name in manifest["files"]], manifest
