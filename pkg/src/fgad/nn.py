"""Differentiable substrate shared by all learned modules.

Everything runs in float64 on CPU through torch; randomness is drawn only from
explicit, seed-derived ``torch.Generator`` objects so trained artifacts are
deterministic functions of (data, config, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import DataError, NumericError

DTYPE = torch.float64

CHECKPOINT_FORMAT = "fgad-checkpoint-v1"

_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "identity": lambda x: x,
    "relu": torch.relu,
    "leaky_relu": lambda x: torch.nn.functional.leaky_relu(x, 0.2),
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
}


def as_tensor(values) -> torch.Tensor:
    arr = np.asarray(values)
    if isinstance(arr, np.ndarray) and not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=DTYPE)


def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit sub-seed for a named random stream."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def make_generator(seed: int, tag: str = "") -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, tag) if tag else seed)
    return gen


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected stack: ``layer_widths`` includes the input and output widths."""

    layer_widths: tuple[int, ...]
    hidden_activation: str = "leaky_relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise DataError("MlpSpec needs at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise DataError(f"layer widths must be positive, got {self.layer_widths}")
        for name in (self.hidden_activation, self.output_activation):
            if name not in _ACTIVATIONS:
                raise DataError(f"unknown activation '{name}'")

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d["hidden_activation"], d["output_activation"])


def init_linear_(layer: torch.nn.Linear, gen: torch.Generator) -> None:
    """Scaled-uniform fan-in init: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / (layer.in_features ** 0.5)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


class Mlp(torch.nn.Module):
    """Plain MLP without normalization layers (critic-compatible)."""

    def __init__(self, spec: MlpSpec, seed: int):
        super().__init__()
        self.spec = spec
        gen = make_generator(seed, "mlp-init")
        layers = []
        widths = spec.layer_widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layer = torch.nn.Linear(fan_in, fan_out, dtype=DTYPE)
            init_linear_(layer, gen)
            layers.append(layer)
        self.layers = torch.nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hidden = _ACTIVATIONS[self.spec.hidden_activation]
        for layer in self.layers[:-1]:
            x = hidden(layer(x))
        return _ACTIVATIONS[self.spec.output_activation](self.layers[-1](x))


def build_mlp(spec: MlpSpec, seed: int) -> Mlp:
    """Deterministically initialized MLP for the given spec and seed."""
    return Mlp(spec, seed)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.algorithm != "adam":
            raise DataError(f"unsupported optimizer '{self.algorithm}'")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be > 0")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    batch_size: int
    critic_steps_per_gen: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.critic_steps_per_gen < 1:
            raise DataError(f"invalid schedule {self}")


def adam_init(params: dict[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: torch.zeros_like(v) for k, v in params.items()},
        "v": {k: torch.zeros_like(v) for k, v in params.items()},
    }


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: dict,
    cfg: OptimizerConfig,
) -> tuple[dict[str, torch.Tensor], dict]:
    """One Adam update as a pure function of (params, grads, state, cfg)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DataError(f"gradient shape mismatch for '{name}'")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block '{name}'")
    t = state["step"] + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state["m"][name] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state["v"][name] + (1 - cfg.beta2) * g * g
        update = cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon)
        new_params[name] = p - update
        new_m[name], new_v[name] = m, v
    return new_params, {"step": t, "m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper applying :func:`adam_step` to a module's parameters in place."""

    def __init__(self, named_params: dict[str, torch.Tensor], cfg: OptimizerConfig):
        self.cfg = cfg
        self._params = dict(named_params)
        self.state = adam_init(self._params)

    @classmethod
    def for_module(cls, module: torch.nn.Module, cfg: OptimizerConfig) -> "Adam":
        return cls(dict(module.named_parameters()), cfg)

    def step(self) -> None:
        grads = {
            k: (p.grad if p.grad is not None else torch.zeros_like(p))
            for k, p in self._params.items()
        }
        with torch.no_grad():
            new_params, self.state = adam_step(
                {k: p.detach() for k, p in self._params.items()}, grads, self.state, self.cfg
            )
            for k, p in self._params.items():
                p.copy_(new_params[k])

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Losses shared across GAN modules
# ---------------------------------------------------------------------------


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    seed: int | torch.Generator,
) -> torch.Tensor:
    """Two-sided gradient penalty on per-instance uniform interpolates.

    Draws eps ~ U(0,1) per instance, forms  x~ = eps*fake + (1-eps)*real  and
    returns E[(||grad_x~ critic(x~)||_2 - 1)^2]. Differentiable w.r.t. the
    critic's parameters (create_graph=True).
    """
    if real_batch.shape != fake_batch.shape:
        raise DataError(
            f"gradient_penalty batch shapes differ: {tuple(real_batch.shape)} "
            f"vs {tuple(fake_batch.shape)}"
        )
    gen = seed if isinstance(seed, torch.Generator) else make_generator(seed, "gp")
    eps = torch.rand((real_batch.shape[0], 1), generator=gen, dtype=DTYPE)
    mixed = (eps * fake_batch + (1.0 - eps) * real_batch).detach().requires_grad_(True)
    scores = critic(mixed)
    if scores.requires_grad:
        (grads,) = torch.autograd.grad(
            scores.sum(), mixed, create_graph=True, allow_unused=True
        )
    else:  # critic constant in its input
        grads = None
    if grads is None:
        grads = torch.zeros_like(mixed)
    norms = grads.norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


# ---------------------------------------------------------------------------
# Finite-difference oracles
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[torch.Tensor], float], x: torch.Tensor, eps: float = 1e-6
) -> torch.Tensor:
    """Central-difference gradient of a scalar function; independent of autograd."""
    flat = x.detach().clone().reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f(flat.reshape(x.shape)))
        flat[i] = orig - eps
        lo = float(f(flat.reshape(x.shape)))
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def gradient_check(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6
) -> float:
    """Relative error between the autograd gradient of ``f`` and central differences."""
    x = x.detach().clone().requires_grad_(True)
    value = f(x)
    (analytic,) = torch.autograd.grad(value, x)
    numeric = finite_difference_gradient(lambda t: f(t).item(), x, eps)
    denom = max(numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


# ---------------------------------------------------------------------------
# Checkpoint I/O (JSON-of-arrays)
# ---------------------------------------------------------------------------


def state_to_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().numpy().tolist() for k, v in module.state_dict().items()}


def arrays_to_state(module: torch.nn.Module, arrays: dict) -> None:
    state = {k: as_tensor(v).reshape(module.state_dict()[k].shape) for k, v in arrays.items()}
    module.load_state_dict(state)


def save_checkpoint(path: str | Path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format": CHECKPOINT_FORMAT, "kind": kind, **payload}
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    if expect_kind is not None and doc.get("kind") != expect_kind:
        raise DataError(f"{path}: expected '{expect_kind}' checkpoint, found {doc.get('kind')!r}")
    return doc
