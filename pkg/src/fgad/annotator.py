"""Anomaly subtype annotation: cross-attention fusion plus self-paced clustering.

Adapted anomalies and their reconstruction deviations are fused by a
cross-attention block (queries from the instances, keys/values from the
deviations). Soft cluster assignments over the fused embeddings follow a
Cauchy kernel around learnable centroids; a sharpened target distribution
drives a KL loss that jointly refines the fusion block and centroids until
hard assignments stabilize. The cluster count may be inferred from the
eigengap of a normalized similarity operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .detector import DetectorModel
from .errors import DataError, NumericError
from .nn import DTYPE, Adam, MlpSpec, OptimizerConfig, as_tensor, make_generator

KL_FLOOR = 1e-12


def post_adaptation_deviations(detector: DetectorModel, adapted: np.ndarray) -> np.ndarray:
    """Module-I reconstruction deviations of adapted anomalies (memory path active)."""
    adapted = np.atleast_2d(np.asarray(adapted, dtype=np.float64))
    if adapted.shape[1] != detector.generator.n_features:
        raise DataError(
            f"adapted matrix has {adapted.shape[1]} features, detector expects "
            f"{detector.generator.n_features}"
        )
    return adapted - detector.reconstruct(adapted)


class FusionBlock(torch.nn.Module):
    """Cross-attention fusion of instances (queries) with deviations (keys/values)."""

    def __init__(self, n_features: int, embed_dim: int, n_heads: int, seed: int,
                 ffn_multiplier: int = 4):
        super().__init__()
        if embed_dim % n_heads != 0:
            raise DataError(f"head count {n_heads} must divide embed dim {embed_dim}")
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        gen = make_generator(seed, "fusion-init")

        def mat(rows, cols):
            bound = 1.0 / rows**0.5
            w = torch.empty((rows, cols), dtype=DTYPE)
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=gen)
            return torch.nn.Parameter(w)

        self.w_query = mat(n_features, embed_dim)
        self.w_key = mat(n_features, embed_dim)
        self.w_value = mat(n_features, embed_dim)
        self.w_psi = mat(embed_dim, embed_dim)
        self.norm1 = torch.nn.LayerNorm(embed_dim, eps=1e-12, dtype=DTYPE)
        self.norm2 = torch.nn.LayerNorm(embed_dim, eps=1e-12, dtype=DTYPE)
        hidden = ffn_multiplier * embed_dim
        self.ffn_in = torch.nn.Linear(embed_dim, hidden, dtype=DTYPE)
        self.ffn_out = torch.nn.Linear(hidden, embed_dim, dtype=DTYPE)
        for layer in (self.ffn_in, self.ffn_out):
            bound = 1.0 / layer.in_features**0.5
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)

    def attention(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """Per-head softmax attention weights, shape (heads, N, N)."""
        n = queries.shape[0]
        head_dim = self.embed_dim // self.n_heads
        q = queries.reshape(n, self.n_heads, head_dim).transpose(0, 1)
        k = keys.reshape(n, self.n_heads, head_dim).transpose(0, 1)
        logits = q @ k.transpose(1, 2) / head_dim**0.5
        return torch.softmax(logits, dim=-1)

    def forward(self, xi, delta, return_attention: bool = False):
        xi_t, delta_t = _tensor2(xi), _tensor2(delta)
        if xi_t.shape != delta_t.shape:
            raise DataError("instance and deviation matrices must share a shape")
        if xi_t.shape[1] != self.w_query.shape[0]:
            raise DataError(
                f"fusion block expects {self.w_query.shape[0]} features, got {xi_t.shape[1]}"
            )
        queries = xi_t @ self.w_query
        keys = delta_t @ self.w_key
        values = delta_t @ self.w_value
        attn = self.attention(queries, keys)
        n = xi_t.shape[0]
        head_dim = self.embed_dim // self.n_heads
        v = values.reshape(n, self.n_heads, head_dim).transpose(0, 1)
        psi = (attn @ v).transpose(0, 1).reshape(n, self.embed_dim)
        z = self.norm1(queries + psi @ self.w_psi)
        z_star = self.norm2(z + self.ffn_out(torch.relu(self.ffn_in(z))))
        return (z_star, attn) if return_attention else z_star


def _tensor2(v) -> torch.Tensor:
    t = v if torch.is_tensor(v) else as_tensor(v)
    return t.reshape(1, -1) if t.ndim == 1 else t


def fuse(block: FusionBlock, xi, delta, return_attention: bool = False):
    """Functional wrapper over :class:`FusionBlock`."""
    return block(xi, delta, return_attention=return_attention)


# ---------------------------------------------------------------------------
# Soft clustering
# ---------------------------------------------------------------------------


def soft_assign(z_star, centroids, nu: float = 1.0) -> torch.Tensor:
    """Cauchy-kernel soft assignments; rows sum to one."""
    z = _tensor2(z_star)
    mu = _tensor2(centroids)
    if nu <= 0:
        raise DataError("degrees of freedom must be > 0")
    sq = ((z[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
    inv = 1.0 / (1.0 + sq / nu)
    return inv / inv.sum(dim=1, keepdim=True)


def target_distribution(q) -> torch.Tensor:
    """Sharpened auxiliary distribution: squares assignments, normalizes by cluster mass."""
    q_t = _tensor2(q)
    mass = q_t.sum(dim=0)
    empty = (mass == 0).nonzero().flatten()
    if len(empty):
        raise DataError(f"cluster {int(empty[0])} has zero total assignment")
    weighted = q_t**2 / mass
    return weighted / weighted.sum(dim=1, keepdim=True)


def clustering_loss(p, q, floor: float = KL_FLOOR) -> torch.Tensor:
    """KL(p || q) with q floored and 0*log(0/.) treated as zero."""
    p_t, q_t = _tensor2(p), _tensor2(q)
    if p_t.shape != q_t.shape:
        raise DataError("distribution shape mismatch")
    q_safe = q_t.clamp_min(floor)
    terms = torch.where(
        p_t > 0, p_t * (torch.log(p_t.clamp_min(floor)) - torch.log(q_safe)),
        torch.zeros_like(p_t),
    )
    return terms.sum()


@dataclass(frozen=True)
class ClusterState:
    """Snapshot of the clustering variables; all rows are probability vectors."""

    z_star: np.ndarray
    centroids: np.ndarray
    q: np.ndarray
    p: np.ndarray
    nu: float

    def __post_init__(self):
        for name in ("q", "p"):
            rows = getattr(self, name)
            if rows.min() < 0 or rows.max() > 1 + 1e-9:
                raise DataError(f"{name} entries must lie in [0, 1]")
            if np.abs(rows.sum(axis=1) - 1.0).max() > 1e-9:
                raise DataError(f"{name} rows must sum to 1")
        if self.centroids.shape[0] < 1:
            raise DataError("at least one centroid required")


# ---------------------------------------------------------------------------
# Cluster-count inference
# ---------------------------------------------------------------------------


def infer_cluster_count(
    z_star, cap: int = 50, mode: str = "count_above"
) -> tuple[int, dict]:
    """Eigengap estimate of the cluster count from fused embeddings.

    Row-normalized embeddings give a similarity matrix S (scaled by its max),
    structure-enhanced to S + S^2 and symmetrically normalized by S's degrees.
    With eigenvalues sorted ascending, ``count_above`` (default) returns the
    number of eigenvalues above the largest gap, capped at ``cap``; ``index``
    returns the gap's ascending position itself. Returns (k, report) where the
    report carries the spectrum and the chosen gap.
    """
    if mode not in ("count_above", "index"):
        raise DataError(f"unknown eigengap mode '{mode}'")
    z = np.atleast_2d(np.asarray(z_star, dtype=np.float64))
    n = z.shape[0]
    if n < 3:
        raise DataError("cluster-count inference needs at least 3 instances")
    norms = np.linalg.norm(z, axis=1)
    if (norms == 0).any():
        raise DataError(f"instance {int(np.nonzero(norms == 0)[0][0])} has a zero embedding")
    z = z / norms[:, None]
    gram = z @ z.T
    peak = gram.max()
    if peak <= 0:
        raise NumericError("similarity matrix has no positive entries")
    sim = gram / peak
    enhanced = sim + sim @ sim
    degrees = sim.sum(axis=1)
    if (degrees <= 0).any():
        raise DataError(
            f"instance {int(np.nonzero(degrees <= 0)[0][0])} is isolated (nonpositive degree)"
        )
    scale = 1.0 / np.sqrt(degrees)
    laplacian = enhanced * scale[:, None] * scale[None, :]
    eigenvalues = np.linalg.eigvalsh(laplacian)
    gaps = np.diff(eigenvalues)  # gaps[i-1] = lambda_(i+1) - lambda_(i), ascending

    if mode == "index":
        hi = min(n, cap)
        window = gaps[: hi - 1]
        pos = int(np.argmax(window))  # gap between ascending positions pos+1 and pos+2
        k = pos + 2
    else:
        lo = max(2, n - cap + 1)  # ascending gap index i, so that k = n - i + 1 <= cap
        window = gaps[lo - 2 :]
        pos = int(np.argmax(window)) + lo - 2
        k = n - (pos + 2) + 1
    report = {
        "mode": mode,
        "eigenvalues": eigenvalues.tolist(),
        "gap_index": int(pos + 2),
        "gap": float(gaps[pos]),
        "k": int(k),
    }
    return int(k), report


# ---------------------------------------------------------------------------
# K-means initialization
# ---------------------------------------------------------------------------


def _kmeans_once(points: np.ndarray, k: int, rng: np.random.Generator,
                 max_iters: int = 100) -> tuple[np.ndarray, np.ndarray, float]:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total == 0:
            centers[j:] = points[rng.integers(n, size=k - j)]
            break
        centers[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((points - centers[j]) ** 2).sum(1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        sq = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_labels = sq.argmin(axis=1)
        for j in range(k):
            members = points[new_labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = points[sq.min(axis=1).argmax()]
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(((points - centers[labels]) ** 2).sum())
    return centers, labels, inertia


def kmeans(points: np.ndarray, k: int, seed: int, restarts: int = 20) -> np.ndarray:
    """Seeded k-means++ with restarts; returns the lowest-inertia centroids."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k > len(points):
        raise DataError(f"cannot place {k} centroids over {len(points)} points")
    rng = np.random.default_rng(seed)
    best_centers, best_inertia = None, np.inf
    for _ in range(restarts):
        centers, _, inertia = _kmeans_once(points, k, rng)
        if inertia < best_inertia:
            best_centers, best_inertia = centers, inertia
    return best_centers


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class AnnotatorResult:
    labels: np.ndarray
    state: ClusterState
    fusion: FusionBlock
    k: int
    iterations: int
    change_history: list[float] = field(default_factory=list)
    eigengap_report: dict | None = None


def train_annotator(
    xi: np.ndarray,
    delta: np.ndarray,
    k: int | str,
    seed: int,
    embed_dim: int = 256,
    n_heads: int = 2,
    nu: float = 1.0,
    max_iters: int = 200,
    learning_rate: float = 3e-4,
    change_threshold: float = 0.001,
    eigengap_mode: str = "count_above",
    min_iterations: int = 30,
) -> AnnotatorResult:
    """Self-paced clustering of fused anomaly embeddings into subtypes.

    Fused embeddings are clustered from a k-means++ initialization; each
    iteration sharpens the current soft assignments into a target distribution
    and takes one optimizer step on the KL loss through both the fusion block
    and the centroids. Stops when under ``change_threshold`` of hard
    assignments move (checked only after ``min_iterations``, since labels
    barely move in the first few small steps), or at ``max_iters``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    n = xi.shape[0]
    fusion = FusionBlock(xi.shape[1], embed_dim, n_heads, seed)
    xi_t, delta_t = as_tensor(xi), as_tensor(delta)

    eigengap_report = None
    if k == "infer":
        with torch.no_grad():
            z0 = fusion(xi_t, delta_t).numpy()
        k, eigengap_report = infer_cluster_count(z0, mode=eigengap_mode)
    k = int(k)
    if not 1 <= k <= n:
        raise DataError(f"cluster count {k} outside [1, {n}]")

    with torch.no_grad():
        z0 = fusion(xi_t, delta_t).numpy()
    centroids = torch.nn.Parameter(as_tensor(kmeans(z0, k, seed)))
    params = dict(fusion.named_parameters())
    params["centroids"] = centroids
    opt = Adam(params, OptimizerConfig(learning_rate=learning_rate, seed=seed))

    def assignments() -> tuple[torch.Tensor, torch.Tensor]:
        z_star = fusion(xi_t, delta_t)
        return z_star, soft_assign(z_star, centroids, nu)

    with torch.no_grad():
        _, q = assignments()
        labels_prev = q.argmax(dim=1).numpy()

    history: list[float] = []
    iterations = 0
    if k == 1:
        max_iters = 0  # single cluster: assignments cannot change
    for _ in range(max_iters):
        z_star, q = assignments()
        p = target_distribution(q).detach()
        loss = clustering_loss(p, q)
        if not torch.isfinite(loss):
            raise NumericError("non-finite clustering loss", {"iteration": iterations})
        opt.zero_grad()
        loss.backward()
        opt.step()
        iterations += 1
        with torch.no_grad():
            _, q_new = assignments()
            labels = q_new.argmax(dim=1).numpy()
        changed = float((labels != labels_prev).mean())
        history.append(changed)
        labels_prev = labels
        if iterations >= min_iterations and changed < change_threshold:
            break

    with torch.no_grad():
        z_star, q = assignments()
        p = target_distribution(q)
    state = ClusterState(
        z_star=z_star.numpy(),
        centroids=centroids.detach().numpy(),
        q=q.numpy(),
        p=p.numpy(),
        nu=nu,
    )
    return AnnotatorResult(
        labels=q.argmax(dim=1).numpy(),
        state=state,
        fusion=fusion,
        k=k,
        iterations=iterations,
        change_history=history,
        eigengap_report=eigengap_report,
    )
