"""Domain adaptation GAN: per-target latent style rows learned via kin matching.

Each target dataset gets one learned row of a style matrix; subtracting that
row from an instance's latent moves it into the reference domain before
decoding. Supervision comes from "kin" reference instances, the closest
reference embedding to each target instance under a Gaussian kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import DatasetBundle, ExpressionMatrix, domain_onehot
from .detector import LossWeights, _check_finite, _tensor, critic_loss, generator_loss
from .errors import DataError
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


class StyleAdapter(torch.nn.Module):
    """Autoencoder with a learned (n_targets x latent) style shift matrix."""

    def __init__(self, encoder_spec: MlpSpec, decoder_spec: MlpSpec, n_targets: int, seed: int):
        super().__init__()
        if encoder_spec.layer_widths[-1] != decoder_spec.layer_widths[0]:
            raise DataError("encoder output width must match decoder input width")
        self.encoder = build_mlp(encoder_spec, seed)
        self.decoder = build_mlp(decoder_spec, seed + 1)
        latent = encoder_spec.layer_widths[-1]
        self.style = torch.nn.Parameter(torch.zeros((n_targets, latent), dtype=DTYPE))
        self.n_targets = n_targets

    @property
    def n_features(self) -> int:
        return self.encoder.spec.layer_widths[0]

    def shifted_latent(self, x: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
        return self.encoder(x) - onehot @ self.style

    def forward(self, x: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.shifted_latent(x, onehot))


@dataclass
class AdapterModel:
    """Trained phase-2 artifact: style autoencoder plus its critic."""

    generator: StyleAdapter
    critic: Mlp
    weights: LossWeights
    seed: int

    @property
    def style_matrix(self) -> np.ndarray:
        return self.generator.style.detach().numpy().copy()


def adapt(model: AdapterModel, values, domain_ids) -> np.ndarray:
    """Map instances into the reference domain: decode(encode(x) - style[domain]).

    ``domain_ids`` uses -1 for reference-domain instances, whose style shift is
    exactly zero (plain autoencoder path).
    """
    x = as_tensor(values)
    ids = np.full(x.shape[0], -1) if np.isscalar(domain_ids) and domain_ids == -1 else np.asarray(domain_ids)
    if ids.ndim == 0:
        ids = np.full(x.shape[0], int(ids))
    onehot = as_tensor(domain_onehot(ids, model.generator.n_targets))
    with torch.no_grad():
        return model.generator(x, onehot).numpy()


def kin_match(
    model: AdapterModel, target_batch, reference_pool
) -> tuple[np.ndarray, np.ndarray]:
    """Closest reference instance per target instance under a Gaussian kernel.

    The bandwidth comes from the median of the batch-to-pool embedding
    distances; ties resolve to the smallest pool index. Returns (pool indices,
    kin rows).
    """
    pool = np.atleast_2d(np.asarray(reference_pool, dtype=np.float64))
    if pool.shape[0] == 0:
        raise DataError("reference pool is empty")
    batch = np.atleast_2d(np.asarray(target_batch, dtype=np.float64))
    with torch.no_grad():
        z_batch = model.generator.encoder(as_tensor(batch)).numpy()
        z_pool = model.generator.encoder(as_tensor(pool)).numpy()
    sq = ((z_batch[:, None, :] - z_pool[None, :, :]) ** 2).sum(-1)
    median = np.median(sq)
    bandwidth = np.sqrt(median / 2.0) if median > 0 else 1.0
    kernel = np.exp(-sq / (2.0 * bandwidth**2))
    idx = kernel.argmax(axis=1)
    return idx, pool[idx]


def train_phase2(
    bundle: DatasetBundle,
    encoder_spec: MlpSpec,
    decoder_spec: MlpSpec,
    critic_spec: MlpSpec,
    schedule: TrainSchedule,
    weights: LossWeights,
    seed: int,
    pool_size: int = 2048,
    optimizer: OptimizerConfig | None = None,
) -> AdapterModel:
    """Train the style adapter on an anomaly-free bundle.

    Reference instances train with a zero shift and themselves as kin
    (anchoring the decoder to the reference domain); target instances train
    against kin pairs recomputed each batch from a seeded sample of the
    reference. The critic's real samples are the kin pairs.
    """
    for name, mat in [("reference", bundle.reference)] + [
        (f"target {d}", t) for d, t in zip(bundle.domain_ids, bundle.targets)
    ]:
        if mat.n_instances < 2:
            raise DataError(f"{name} retains fewer than 2 instances")

    opt_cfg = optimizer or OptimizerConfig(seed=seed)
    n_targets = bundle.n_targets
    model = StyleAdapter(encoder_spec, decoder_spec, n_targets, seed + 10)
    critic = build_mlp(critic_spec, seed + 12)
    opt_g = Adam.for_module(model, opt_cfg)
    opt_d = Adam.for_module(critic, opt_cfg)

    ref_values = bundle.reference.values
    x_parts = [ref_values] + [t.values for t in bundle.targets]
    d_parts = [np.full(len(ref_values), -1)] + [
        np.full(t.n_instances, d) for d, t in zip(bundle.domain_ids, bundle.targets)
    ]
    x_all = as_tensor(np.concatenate(x_parts))
    dom_all = np.concatenate(d_parts)
    onehot_all = as_tensor(domain_onehot(dom_all, n_targets))
    n = x_all.shape[0]
    batch_size = min(schedule.batch_size, n)

    shuffle_gen = make_generator(seed, "phase2-shuffle")
    pool_gen = make_generator(seed, "phase2-pool")
    gp_gen = make_generator(seed, "phase2-gp")

    adapter_model = AdapterModel(model, critic, weights, seed)
    for epoch in range(schedule.epochs):
        perm = torch.randperm(n, generator=shuffle_gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            if len(idx) < 2:
                continue
            x = x_all[idx]
            onehot = onehot_all[idx]
            is_target = onehot.sum(dim=1) > 0

            kin = x.clone()
            if bool(is_target.any()):
                pool_n = min(pool_size, len(ref_values))
                pool_idx = torch.randperm(len(ref_values), generator=pool_gen)[:pool_n]
                pool = ref_values[pool_idx.numpy()]
                _, kin_rows = kin_match(adapter_model, x[is_target].numpy(), pool)
                kin[is_target] = as_tensor(kin_rows)

            for _ in range(schedule.critic_steps_per_gen):
                with torch.no_grad():
                    x_hat = model(x, onehot)
                real_s = critic(kin).squeeze(-1)
                fake_s = critic(x_hat).squeeze(-1)
                penalty = gradient_penalty(critic, kin, x_hat, gp_gen)
                d_loss = critic_loss(real_s, fake_s, penalty, weights.lambda_gp)
                _check_finite("adapter-critic", epoch, loss=d_loss, penalty=penalty)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            x_hat = model(x, onehot)
            g_loss = generator_loss(kin, x_hat, critic(x_hat).squeeze(-1), weights)
            _check_finite("adapter-generator", epoch, loss=g_loss)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

    return adapter_model


def adapter_to_payload(model: AdapterModel) -> dict:
    from .nn import state_to_arrays

    return {
        "encoder_spec": model.generator.encoder.spec.to_dict(),
        "decoder_spec": model.generator.decoder.spec.to_dict(),
        "critic_spec": model.critic.spec.to_dict(),
        "generator_state": state_to_arrays(model.generator),
        "critic_state": state_to_arrays(model.critic),
        "n_targets": model.generator.n_targets,
        "weights": {"alpha": model.weights.alpha, "beta": model.weights.beta,
                    "lambda_gp": model.weights.lambda_gp},
        "seed": model.seed,
    }


def adapter_from_payload(payload: dict) -> AdapterModel:
    from .nn import arrays_to_state

    generator = StyleAdapter(
        MlpSpec.from_dict(payload["encoder_spec"]),
        MlpSpec.from_dict(payload["decoder_spec"]),
        payload["n_targets"],
        payload["seed"] + 10,
    )
    arrays_to_state(generator, payload["generator_state"])
    critic = build_mlp(MlpSpec.from_dict(payload["critic_spec"]), payload["seed"] + 12)
    arrays_to_state(critic, payload["critic_state"])
    w = payload["weights"]
    return AdapterModel(generator, critic, LossWeights(**w), payload["seed"])


def adapt_anomalies(model: AdapterModel, anomalies: ExpressionMatrix,
                    domain_ids) -> np.ndarray:
    """Apply the learned style shift to detected anomalies; rows follow input order."""
    if anomalies.n_features != model.generator.n_features:
        raise DataError(
            f"anomalies have {anomalies.n_features} features, model expects "
            f"{model.generator.n_features}"
        )
    return adapt(model, anomalies.values, domain_ids)
