"""
Function-approximator core built on torch (float64, CPU).

Parameters are initialised from numpy Philox generators and policy noise is
drawn from numpy as well, so a seed fully determines every run without
touching torch's global RNG.
"""

import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from residrl.errors import ObservationLayoutError, StaleGraphError

DTYPE = torch.float64
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ACTIVATIONS = ("tanh", "relu")
HEADS = ("linear", "gaussian", "scalar")


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: Tuple[int, ...]
    activation: str = "tanh"
    output_head: str = "linear"
    layer_norm: bool = False

    def __post_init__(self):
        if len(self.layer_sizes) < 3:
            raise ValueError("MlpSpec needs input, at least one hidden layer and output sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_head not in HEADS:
            raise ValueError(f"output_head must be one of {HEADS}")
        if self.output_head == "scalar" and self.layer_sizes[-1] != 1:
            raise ValueError("scalar head must have output size 1")

    def describe(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_head": self.output_head,
            "layer_norm": self.layer_norm,
        }


@dataclass(frozen=True)
class InputLayout:
    """Named slices of a flat observation vector; used to reject mismatched inputs."""
    names: Tuple[str, ...]
    sizes: Tuple[int, ...]

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def check(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            layout = ", ".join(f"{n}:{s}" for n, s in zip(self.names, self.sizes))
            raise ObservationLayoutError(f"observation has {x.shape[-1]} features, layout [{layout}] needs {self.dim}")
        return x

    def describe(self) -> dict:
        return {"names": list(self.names), "sizes": list(self.sizes)}


# ---------------------------------------------------------------- initialisation

def init_linear(layer: nn.Linear, rng: np.random.Generator, gain: float = 1.0, zero: bool = False) -> nn.Linear:
    """Fan-in uniform weights drawn from `rng`; zero bias."""
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
        else:
            bound = gain / math.sqrt(layer.in_features)
            layer.weight.copy_(as_tensor(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
        layer.bias.zero_()
    return layer


def _activation(name: str) -> nn.Module:
    return nn.Tanh() if name == "tanh" else nn.ReLU()


def build_trunk(sizes: Sequence[int], activation: str, rng: np.random.Generator,
                layer_norm: bool = False) -> nn.Sequential:
    layers: List[nn.Module] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        layers.append(init_linear(nn.Linear(fan_in, fan_out, dtype=DTYPE), rng))
        if layer_norm:
            layers.append(nn.LayerNorm(fan_out, dtype=DTYPE))
        layers.append(_activation(activation))
    return nn.Sequential(*layers)


class Mlp(nn.Module):
    """Hidden trunk plus a linear output layer."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, zero_output: bool = False):
        super().__init__()
        self.spec = spec
        self.trunk = build_trunk(spec.layer_sizes[:-1], spec.activation, rng, spec.layer_norm)
        self.out = init_linear(nn.Linear(spec.layer_sizes[-2], spec.layer_sizes[-1], dtype=DTYPE), rng,
                               zero=zero_output)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.out(self.trunk(x))
        return y.squeeze(-1) if self.spec.output_head == "scalar" else y


# ---------------------------------------------------------------- Gaussian policy

def gaussian_log_prob(mean: torch.Tensor, std: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log density summed over the action dimension."""
    z = (action - mean) / std
    return (-0.5 * z.pow(2) - torch.log(std) - 0.5 * math.log(2.0 * math.pi)).sum(-1)


class GaussianPolicy(nn.Module):
    """Diagonal Gaussian over actions.

    With `state_dependent_std` the log-std comes from a second linear head on
    the trunk, otherwise it is a free parameter vector. A `mean_bound` squashes
    the mean through bound * tanh.
    """

    def __init__(self, spec: MlpSpec, layout: InputLayout, rng: np.random.Generator, *,
                 init_log_std: float = 0.0, state_dependent_std: bool = False,
                 mean_bound: Optional[float] = None, zero_mean_head: bool = False):
        super().__init__()
        if spec.layer_sizes[0] != layout.dim:
            raise ObservationLayoutError(f"spec input {spec.layer_sizes[0]} != layout dim {layout.dim}")
        self.spec = spec
        self.layout = layout
        self.mean_bound = mean_bound
        self.state_dependent_std = state_dependent_std
        action_dim = spec.layer_sizes[-1]
        hidden = spec.layer_sizes[-2]
        self.trunk = build_trunk(spec.layer_sizes[:-1], spec.activation, rng, spec.layer_norm)
        self.mean_head = init_linear(nn.Linear(hidden, action_dim, dtype=DTYPE), rng, gain=0.01,
                                     zero=zero_mean_head)
        if state_dependent_std:
            self.log_std_head = init_linear(nn.Linear(hidden, action_dim, dtype=DTYPE), rng, zero=True)
            with torch.no_grad():
                self.log_std_head.bias.fill_(init_log_std)
        else:
            self.log_std = nn.Parameter(torch.full((action_dim,), float(init_log_std), dtype=DTYPE))

    @property
    def action_dim(self) -> int:
        return self.spec.layer_sizes[-1]

    def forward(self, obs) -> Tuple[torch.Tensor, torch.Tensor]:
        obs = self.layout.check(as_tensor(obs))
        h = self.trunk(obs)
        mean = self.mean_head(h)
        if self.mean_bound is not None:
            mean = self.mean_bound * torch.tanh(mean)
        if self.state_dependent_std:
            log_std = self.log_std_head(h)
        else:
            log_std = self.log_std.expand_as(mean)
        std = torch.exp(torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX))
        return mean, std

    def log_prob(self, obs, action) -> torch.Tensor:
        mean, std = self(obs)
        return gaussian_log_prob(mean, std, as_tensor(action))

    def entropy(self, obs) -> torch.Tensor:
        _, std = self(obs)
        return (torch.log(std) + 0.5 * math.log(2.0 * math.pi * math.e)).sum(-1)

    def rsample(self, obs, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        """Reparameterised sample and its log-prob; noise comes from `rng`."""
        mean, std = self(obs)
        eps = as_tensor(rng.standard_normal(size=tuple(mean.shape)))
        action = mean + std * eps
        return action, gaussian_log_prob(mean, std, action)

    @torch.no_grad()
    def sample(self, obs, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        action, logp = self.rsample(obs, rng)
        return action.numpy(), logp.numpy()

    @torch.no_grad()
    def act_mean(self, obs) -> np.ndarray:
        mean, _ = self(obs)
        return mean.numpy()


class ValueNet(nn.Module):
    def __init__(self, spec: MlpSpec, layout: InputLayout, rng: np.random.Generator):
        super().__init__()
        self.layout = layout
        self.body = Mlp(spec, rng)

    def forward(self, obs) -> torch.Tensor:
        return self.body(self.layout.check(as_tensor(obs)))


# ---------------------------------------------------------------- critics

class CriticEnsemble(nn.Module):
    """E independent Q networks evaluated together; output shape (E, batch)."""

    def __init__(self, spec: MlpSpec, n_members: int, rng: np.random.Generator):
        super().__init__()
        if n_members < 2:
            raise ValueError("CriticEnsemble needs at least two members")
        self.spec = spec
        self.members = nn.ModuleList(Mlp(spec, rng) for _ in range(n_members))

    def __len__(self):
        return len(self.members)

    def forward(self, x) -> torch.Tensor:
        x = as_tensor(x)
        return torch.stack([m(x) for m in self.members])

    def min_q(self, x, subset: Optional[Sequence[int]] = None) -> torch.Tensor:
        q = self(x)
        if subset is not None:
            q = q[list(subset)]
        return q.min(dim=0).values

    def draw_subset(self, rng: np.random.Generator, size: int) -> List[int]:
        return sorted(int(i) for i in rng.choice(len(self.members), size=size, replace=False))


# ---------------------------------------------------------------- image encoder

class ImageEncoder(nn.Module):
    """Per-view flatten + two-layer perceptron to 64 features, concatenated with proprioception."""

    FEATURES_PER_VIEW = 64

    def __init__(self, image_size: int, n_views: int, proprio_dim: int, rng: np.random.Generator,
                 hidden: int = 128):
        super().__init__()
        self.image_size = image_size
        self.n_views = n_views
        self.proprio_dim = proprio_dim
        pixels = image_size * image_size
        self.views = nn.ModuleList(
            build_trunk((pixels, hidden, self.FEATURES_PER_VIEW), "relu", rng) for _ in range(n_views)
        )

    @property
    def output_dim(self) -> int:
        return self.n_views * self.FEATURES_PER_VIEW + self.proprio_dim

    def forward(self, images, proprio) -> torch.Tensor:
        images = as_tensor(images)
        proprio = as_tensor(proprio)
        expected = (self.n_views, self.image_size, self.image_size)
        if tuple(images.shape[-3:]) != expected:
            raise ObservationLayoutError(f"images have shape {tuple(images.shape[-3:])}, expected {expected}")
        if proprio.shape[-1] != self.proprio_dim:
            raise ObservationLayoutError(f"proprio has {proprio.shape[-1]} features, expected {self.proprio_dim}")
        flat = images.flatten(start_dim=-2)
        feats = [view(flat[..., i, :]) for i, view in enumerate(self.views)]
        return torch.cat(feats + [proprio], dim=-1)


# ---------------------------------------------------------------- gradients and updates

def backward(params: Iterable[torch.nn.Parameter], loss: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar loss w.r.t. every parameter; stored on .grad and returned flat."""
    params = list(params)
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None or not loss.requires_grad:
        raise StaleGraphError("loss carries no autograd graph (detached or never recorded)")
    try:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    except RuntimeError as exc:
        raise StaleGraphError(f"autograd graph unusable: {exc}") from None
    filled = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, filled):
        p.grad = g.detach().clone()
    return torch.cat([g.reshape(-1) for g in filled]).detach()


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr)


def optimizer_step(optimizer: torch.optim.Optimizer, max_grad_norm: Optional[float] = None,
                   verbose: bool = False) -> bool:
    """Apply one Adam step; a non-finite gradient skips the update and returns False."""
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    finite = all(bool(torch.isfinite(p.grad).all()) for p in params)
    if not finite:
        if verbose:
            print("⚠️  non-finite gradient: update skipped")
        optimizer.zero_grad(set_to_none=True)
        return False
    if max_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, max_grad_norm)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return True


@torch.no_grad()
def polyak_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    for t, s in zip(target.parameters(), source.parameters()):
        t.mul_(1.0 - tau).add_(s, alpha=tau)


def flat_parameters(module: nn.Module) -> np.ndarray:
    return parameters_to_vector(module.parameters()).detach().numpy().copy()


def load_flat_parameters(module: nn.Module, values: np.ndarray) -> None:
    with torch.no_grad():
        vector_to_parameters(as_tensor(values), module.parameters())


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def gradient_check(module: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor],
                   eps: float = 1e-6, atol: float = 1e-4) -> float:
    """Max error |analytic - central difference| / max(|analytic| + |numeric|, atol) over all parameters.

    The symmetric denominator keeps entries whose true gradient is near zero
    from reporting finite-difference round-off as a large relative error.
    """
    params = list(module.parameters())
    analytic = backward(params, loss_fn(module)).numpy()
    base = flat_parameters(module)
    numeric = np.empty_like(base)
    for i in range(base.size):
        shifted = base.copy()
        shifted[i] = base[i] + eps
        load_flat_parameters(module, shifted)
        with torch.no_grad():
            plus = float(loss_fn(module))
        shifted[i] = base[i] - eps
        load_flat_parameters(module, shifted)
        with torch.no_grad():
            minus = float(loss_fn(module))
        numeric[i] = (plus - minus) / (2.0 * eps)
    load_flat_parameters(module, base)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), atol)
    return float(np.max(np.abs(analytic - numeric) / scale))


def torch_gradcheck(module: nn.Module, inputs: torch.Tensor, rtol: float = 1e-4) -> bool:
    """torch.autograd.gradcheck with the parameters as the checked inputs."""
    names = [n for n, _ in module.named_parameters()]
    leaves = tuple(p.detach().clone().requires_grad_(True) for p in module.parameters())

    def fn(*flat):
        out = torch.func.functional_call(module, dict(zip(names, flat)), (inputs,))
        return out if isinstance(out, torch.Tensor) else torch.cat([o.reshape(-1) for o in out])

    return torch.autograd.gradcheck(fn, leaves, eps=1e-6, atol=1e-8, rtol=rtol, raise_exception=False)
