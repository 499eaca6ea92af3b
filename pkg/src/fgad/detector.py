"""Detection GAN: memory-augmented autoencoder generator plus WGAN-GP critic.

Trained on the reference dataset only. The generator reconstructs instances
through a latent attention read over a FIFO memory bank of recent latents;
anomalies (unseen in the reference) reconstruct poorly, and the resulting
per-instance deviations feed the MMD scorer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import ExpressionMatrix
from .errors import DataError, NumericError
from .nn import (
    DTYPE,
    Adam,
    Mlp,
    MlpSpec,
    OptimizerConfig,
    TrainSchedule,
    as_tensor,
    build_mlp,
    gradient_penalty,
    make_generator,
)
from .scorer import DeviationSet


@dataclass(frozen=True)
class LossWeights:
    """Weights for reconstruction, adversarial, and gradient-penalty terms."""

    alpha: float = 50.0
    beta: float = 1.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lambda_gp) < 0:
            raise DataError("loss weights must be nonnegative")


class MemoryBank:
    """Fixed-size FIFO queue of latent vectors with softmax attention reads."""

    def __init__(self, size: int, dim: int, temperature: float = 1.0):
        if size < 1 or dim < 1:
            raise DataError("memory bank needs positive size and dimension")
        if temperature <= 0:
            raise DataError("memory temperature must be > 0")
        self.size = size
        self.dim = dim
        self.temperature = temperature
        self.entries = torch.zeros((size, dim), dtype=DTYPE)
        self.cursor = 0
        self.filled = 0

    @property
    def is_filled(self) -> bool:
        return self.filled >= self.size

    def read(self, z: torch.Tensor, return_attention: bool = False, strict: bool = True):
        """Attention reconstruction of latents: rows of softmax(bank @ z / tau) mix bank rows."""
        if self.filled == 0:
            if strict:
                raise DataError("memory bank is empty")
            return (z, None) if return_attention else z
        bank = self.entries[: self.filled]
        logits = z @ bank.T / self.temperature
        attention = torch.softmax(logits, dim=-1)
        z_tilde = attention @ bank
        return (z_tilde, attention) if return_attention else z_tilde

    def update(self, batch: torch.Tensor) -> None:
        """FIFO replacement of the oldest rows by the (detached) batch rows."""
        batch = batch.detach()
        if batch.shape[0] > self.size:
            raise DataError(f"batch of {batch.shape[0]} exceeds bank size {self.size}")
        if batch.shape[1] != self.dim:
            raise DataError("latent width does not match bank dimension")
        for row in batch:
            self.entries[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.size
            self.filled = min(self.filled + 1, self.size)

    def state(self) -> dict:
        return {
            "entries": self.entries.numpy().tolist(),
            "cursor": self.cursor,
            "filled": self.filled,
            "size": self.size,
            "dim": self.dim,
            "temperature": self.temperature,
        }

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        bank = cls(state["size"], state["dim"], state["temperature"])
        bank.entries = as_tensor(state["entries"]).reshape(state["size"], state["dim"])
        bank.cursor = state["cursor"]
        bank.filled = state["filled"]
        return bank


def memory_read(bank: MemoryBank, z, strict: bool = True):
    """Functional alias for :meth:`MemoryBank.read` on arrays or tensors."""
    z_t = z if torch.is_tensor(z) else as_tensor(z)
    single = z_t.ndim == 1
    out = bank.read(z_t.reshape(1, -1) if single else z_t, strict=strict)
    return out[0] if single else out


def memory_update(bank: MemoryBank, batch) -> MemoryBank:
    bank.update(batch if torch.is_tensor(batch) else as_tensor(batch))
    return bank


class MemoryAutoencoder(torch.nn.Module):
    """Encoder/decoder pair with an attention memory between them."""

    def __init__(
        self,
        encoder_spec: MlpSpec,
        decoder_spec: MlpSpec,
        memory_size: int,
        temperature: float,
        seed: int,
        use_memory: bool = True,
    ):
        super().__init__()
        if encoder_spec.layer_widths[-1] != decoder_spec.layer_widths[0]:
            raise DataError("encoder output width must match decoder input width")
        self.encoder = build_mlp(encoder_spec, seed)
        self.decoder = build_mlp(decoder_spec, seed + 1)
        self.memory = MemoryBank(memory_size, encoder_spec.layer_widths[-1], temperature)
        self.use_memory = use_memory

    @property
    def n_features(self) -> int:
        return self.encoder.spec.layer_widths[0]

    def latent(self, x: torch.Tensor) -> torch.Tensor:
        """Latent after the memory path (bypassed until the bank first fills)."""
        z = self.encoder(x)
        if self.use_memory and self.memory.is_filled:
            return self.memory.read(z)
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.latent(x))


@dataclass
class DetectorModel:
    """Trained phase-1 artifact: generator, critic, and their configuration."""

    generator: MemoryAutoencoder
    critic: Mlp
    weights: LossWeights
    seed: int

    def reconstruct(self, values) -> np.ndarray:
        x = as_tensor(values)
        with torch.no_grad():
            return self.generator(x).numpy()


def _tensor(v) -> torch.Tensor:
    return v if torch.is_tensor(v) else as_tensor(v)


def generator_loss(x, x_hat, critic_scores, weights: LossWeights) -> torch.Tensor:
    """alpha * mean absolute reconstruction error minus beta * mean critic score."""
    x_t, xh_t, s_t = _tensor(x), _tensor(x_hat), _tensor(critic_scores)
    if x_t.shape != xh_t.shape:
        raise DataError("reconstruction shape mismatch")
    return weights.alpha * (x_t - xh_t).abs().mean() - weights.beta * s_t.mean()


def critic_loss(real_scores, fake_scores, penalty, lambda_gp: float) -> torch.Tensor:
    """Wasserstein critic loss: mean(fake) - mean(real) + lambda * penalty."""
    real_t, fake_t = _tensor(real_scores), _tensor(fake_scores)
    if real_t.shape != fake_t.shape:
        raise DataError("critic score shape mismatch")
    pen_t = penalty if torch.is_tensor(penalty) else torch.as_tensor(penalty, dtype=DTYPE)
    return fake_t.mean() - real_t.mean() + lambda_gp * pen_t


def _check_finite(tag: str, epoch: int, **terms) -> None:
    values = {
        k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()
    }
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite {tag} loss", {"epoch": epoch, **values})


def train_phase1(
    reference: ExpressionMatrix,
    encoder_spec: MlpSpec,
    decoder_spec: MlpSpec,
    critic_spec: MlpSpec,
    schedule: TrainSchedule,
    weights: LossWeights,
    seed: int,
    memory_size: int = 512,
    temperature: float = 1.0,
    optimizer: OptimizerConfig | None = None,
    use_memory: bool = True,
) -> DetectorModel:
    """Alternating critic/generator training on the reference dataset.

    The memory path stays bypassed until the bank has been filled once with
    detached latents, after which attention reads take over. Deterministic for
    fixed (data, config, seed).
    """
    opt_cfg = optimizer or OptimizerConfig(seed=seed)
    x_all = as_tensor(reference.values)
    n = x_all.shape[0]
    batch_size = min(schedule.batch_size, n)

    generator = MemoryAutoencoder(
        encoder_spec, decoder_spec, memory_size, temperature, seed, use_memory
    )
    critic = build_mlp(critic_spec, seed + 2)
    opt_g = Adam.for_module(generator, opt_cfg)
    opt_d = Adam.for_module(critic, opt_cfg)
    shuffle_gen = make_generator(seed, "phase1-shuffle")
    gp_gen = make_generator(seed, "phase1-gp")

    for epoch in range(schedule.epochs):
        perm = torch.randperm(n, generator=shuffle_gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            if len(idx) < 2:
                continue
            x = x_all[idx]
            for _ in range(schedule.critic_steps_per_gen):
                with torch.no_grad():
                    x_hat = generator(x)
                real_s = critic(x).squeeze(-1)
                fake_s = critic(x_hat).squeeze(-1)
                penalty = gradient_penalty(critic, x, x_hat, gp_gen)
                d_loss = critic_loss(real_s, fake_s, penalty, weights.lambda_gp)
                _check_finite("critic", epoch, loss=d_loss, penalty=penalty,
                              real=real_s.mean(), fake=fake_s.mean())
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            x_hat = generator(x)
            g_loss = generator_loss(x, x_hat, critic(x_hat).squeeze(-1), weights)
            _check_finite("generator", epoch, loss=g_loss,
                          recon=(x - x_hat).abs().mean())
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            if use_memory:
                with torch.no_grad():
                    generator.memory.update(generator.latent(x))

    return DetectorModel(generator, critic, weights, seed)


def reconstruction_deviation(model: DetectorModel, matrix: ExpressionMatrix) -> DeviationSet:
    """Per-instance deviation (input minus generator reconstruction), memory path active."""
    if matrix.n_features != model.generator.n_features:
        raise DataError(
            f"matrix has {matrix.n_features} features, model expects "
            f"{model.generator.n_features}"
        )
    deviations = matrix.values - model.reconstruct(matrix.values)
    return DeviationSet(deviations, matrix.instance_ids)


def detector_to_payload(model: DetectorModel) -> dict:
    from .nn import state_to_arrays

    return {
        "encoder_spec": model.generator.encoder.spec.to_dict(),
        "decoder_spec": model.generator.decoder.spec.to_dict(),
        "critic_spec": model.critic.spec.to_dict(),
        "generator_state": state_to_arrays(model.generator),
        "critic_state": state_to_arrays(model.critic),
        "memory": model.generator.memory.state(),
        "use_memory": model.generator.use_memory,
        "weights": {"alpha": model.weights.alpha, "beta": model.weights.beta,
                    "lambda_gp": model.weights.lambda_gp},
        "seed": model.seed,
    }


def detector_from_payload(payload: dict) -> DetectorModel:
    from .nn import arrays_to_state

    mem = payload["memory"]
    generator = MemoryAutoencoder(
        MlpSpec.from_dict(payload["encoder_spec"]),
        MlpSpec.from_dict(payload["decoder_spec"]),
        mem["size"],
        mem["temperature"],
        payload["seed"],
        payload["use_memory"],
    )
    arrays_to_state(generator, payload["generator_state"])
    generator.memory = MemoryBank.from_state(mem)
    critic = build_mlp(MlpSpec.from_dict(payload["critic_spec"]), payload["seed"] + 2)
    arrays_to_state(critic, payload["critic_state"])
    w = payload["weights"]
    return DetectorModel(generator, critic, LossWeights(**w), payload["seed"])


def default_phase1_specs(n_features: int, latent_dim: int = 256,
                         encoder_hidden: tuple[int, ...] = (512, 256, 256, 256, 256),
                         critic_hidden: tuple[int, ...] = (512, 64, 64, 64)) -> dict:
    """Encoder / symmetric decoder / critic specs with the stock widths."""
    return {
        "encoder": MlpSpec((n_features, *encoder_hidden, latent_dim)),
        "decoder": MlpSpec((latent_dim, *reversed(encoder_hidden), n_features)),
        "critic": MlpSpec((n_features, *critic_hidden, 1)),
    }
