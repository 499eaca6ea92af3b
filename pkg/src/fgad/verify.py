"""Executable verification suite: oracle equivalences, limits, and gradient checks.

Each check returns a dict with a ``passed`` flag and the measured residuals;
``run_verification`` bundles them into one report. Failures are report
entries, never exceptions, so the suite always completes.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .annotator import (
    FusionBlock,
    clustering_loss,
    infer_cluster_count,
    soft_assign,
    target_distribution,
)
from .detector import MemoryBank
from .nn import DTYPE, MlpSpec, as_tensor, build_mlp, make_generator
from .scorer import (
    DeviationSet,
    TrendConfig,
    discrete_pair_weight,
    linear_mmd2_unbiased,
    plug_in_populations,
    scorer_loss,
    shift_exceedance_trend,
    smooth_pair_weight,
)

PairWeightFn = Callable[[int, int, float, float], float]


def check_mmd_equivalence(
    trials: int = 100,
    seed: int = 2024,
    tolerance: float = 1e-9,
    pair_weight_fn: PairWeightFn | None = None,
) -> dict:
    """Label-weighted double sum vs the unbiased linear-kernel estimator.

    ``pair_weight_fn`` exists as a fault-injection hook for the suite's own
    tests; the default is the production discrete weight.
    """
    weight = pair_weight_fn or discrete_pair_weight
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        m, n = rng.integers(3, 11), rng.integers(3, 11)
        dim = rng.integers(1, 9)
        inliers = rng.normal(size=(m, dim))
        anomalies = rng.normal(size=(n, dim)) + rng.normal(scale=2.0, size=dim)
        pooled = np.vstack([inliers, anomalies])
        labels = np.array([0] * m + [1] * n)
        gram = pooled @ pooled.T
        total = 0.0
        for i in range(m + n):
            for j in range(m + n):
                if i != j:
                    total += gram[i, j] * weight(labels[i], labels[j], m, n)
        expected = linear_mmd2_unbiased(inliers, anomalies)
        worst = max(worst, abs(total - expected) / max(abs(expected), 1e-12))
    return {"passed": bool(worst <= tolerance), "max_relative_residual": worst,
            "trials": trials, "tolerance": tolerance}


def check_pair_weight_limits(m_tilde: float = 6.0, n_tilde: float = 4.0) -> dict:
    """Endpoint limits of both smooth-weight variants against the discrete table.

    Same-label corners must match for both variants within O(h); the mixed
    corner must match -1/(m~ n~) for the sign-consistent variant, while the
    printed variant's mixed value is recorded (its sign flips).
    """
    discrete = {
        (0, 0): discrete_pair_weight(0, 0, m_tilde, n_tilde),
        (1, 1): discrete_pair_weight(1, 1, m_tilde, n_tilde),
        (0, 1): discrete_pair_weight(0, 1, m_tilde, n_tilde),
    }
    scale = sum(abs(v) for v in discrete.values())
    results: dict = {"m_tilde": m_tilde, "n_tilde": n_tilde, "limits": {}}
    passed = True
    for h in (1e-3, 1e-5):
        tol = 20.0 * h * scale
        for variant in ("as_printed", "sign_consistent"):
            at = lambda a, b: smooth_pair_weight(a, b, m_tilde, n_tilde, variant)
            entry = {
                "(h,h)": at(h, h),
                "(1-h,1-h)": at(1 - h, 1 - h),
                "(h,1-h)": at(h, 1 - h),
                "(1-h,h)": at(1 - h, h),
            }
            residual_00 = abs(entry["(h,h)"] - discrete[(0, 0)])
            residual_11 = abs(entry["(1-h,1-h)"] - discrete[(1, 1)])
            entry["residual_00"] = residual_00
            entry["residual_11"] = residual_11
            ok = residual_00 <= tol and residual_11 <= tol
            if variant == "sign_consistent":
                residual_01 = abs(entry["(h,1-h)"] - discrete[(0, 1)])
                entry["residual_01"] = residual_01
                ok = ok and residual_01 <= tol
            else:
                entry["mixed_sign"] = "+" if entry["(h,1-h)"] > 0 else "-"
            entry["tolerance"] = tol
            entry["passed"] = bool(ok)
            passed = passed and ok
            results["limits"][f"{variant}@h={h:g}"] = entry
    results["passed"] = passed
    return results


def check_scorer_bruteforce(trials: int = 20, seed: int = 515,
                            tolerance: float = 1e-9, n_max: int = 64) -> dict:
    """Vectorized scorer loss vs a naive O(N^2) double loop."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(4, n_max + 1))
        dim = int(rng.integers(1, 9))
        dev = rng.normal(size=(n, dim))
        p = rng.uniform(0.1, 0.9, size=n)
        # keep both inferred populations nondegenerate
        p = np.clip(p, None, (n - 1.5) / n)
        fast = float(scorer_loss(dev, p, "sign_consistent"))
        m_tilde, n_tilde = plug_in_populations(p, n)
        slow = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    slow -= (dev[i] @ dev[j]) * smooth_pair_weight(
                        p[i], p[j], m_tilde, n_tilde, "sign_consistent"
                    )
        worst = max(worst, abs(fast - slow) / max(abs(slow), 1e-12))
    return {"passed": bool(worst <= tolerance), "max_relative_residual": worst,
            "trials": trials, "tolerance": tolerance}


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


def _parameter_fd_residual(loss_fn: Callable[[], torch.Tensor],
                           params: dict[str, torch.Tensor], eps: float = 1e-6) -> float:
    """Max over parameter blocks of the relative autograd-vs-central-difference error."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    worst = 0.0
    for (_, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.reshape(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(loss_fn())
            flat[i] = orig - eps
            lo = float(loss_fn())
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * eps)
        denom = max(fd.norm().item(), 1e-10)
        worst = max(worst, (g.reshape(-1) - fd).norm().item() / denom)
    return worst


def check_gradients(seed: int = 99, tolerance: float = 1e-4) -> dict:
    """Finite-difference checks over every differentiable map in the pipeline."""
    gen = make_generator(seed, "gradcheck")
    residuals: dict[str, float] = {}

    # MLP: loss through all parameters
    mlp = build_mlp(MlpSpec((3, 5, 2)), seed)
    x = torch.randn((4, 3), generator=gen, dtype=DTYPE)
    c = torch.randn((4, 2), generator=gen, dtype=DTYPE)
    residuals["mlp"] = _parameter_fd_residual(
        lambda: (mlp(x) * c).sum(), dict(mlp.named_parameters())
    )

    # memory attention read: gradient w.r.t. the query latents
    bank = MemoryBank(6, 4, temperature=0.7)
    bank.update(torch.randn((6, 4), generator=gen, dtype=DTYPE))
    z = torch.randn((3, 4), generator=gen, dtype=DTYPE).requires_grad_(True)
    cz = torch.randn((3, 4), generator=gen, dtype=DTYPE)
    residuals["memory_attention"] = _parameter_fd_residual(
        lambda: (bank.read(z) * cz).sum(), {"z": z}
    )

    # fusion block: parameters plus both inputs
    fusion = FusionBlock(5, 4, 2, seed)
    xi = torch.randn((4, 5), generator=gen, dtype=DTYPE).requires_grad_(True)
    delta = torch.randn((4, 5), generator=gen, dtype=DTYPE).requires_grad_(True)
    cf = torch.randn((4, 4), generator=gen, dtype=DTYPE)
    fusion_params = dict(fusion.named_parameters())
    fusion_params.update({"input_xi": xi, "input_delta": delta})
    residuals["fusion_block"] = _parameter_fd_residual(
        lambda: (fusion(xi, delta) * cf).sum(), fusion_params
    )

    # clustering loss through assignments: embeddings and centroids
    z_emb = torch.randn((6, 3), generator=gen, dtype=DTYPE).requires_grad_(True)
    mu = torch.randn((2, 3), generator=gen, dtype=DTYPE).requires_grad_(True)
    with torch.no_grad():
        p_fixed = target_distribution(soft_assign(z_emb, mu))

    def cluster_fn():
        return clustering_loss(p_fixed, soft_assign(z_emb, mu))

    residuals["clustering_loss"] = _parameter_fd_residual(
        cluster_fn, {"z": z_emb, "mu": mu}
    )

    # pair-weight path: scorer loss as a pure function of the scores
    rng = np.random.default_rng(seed)
    dev = as_tensor(rng.normal(size=(8, 3)))
    p_scores = torch.tensor(rng.uniform(0.25, 0.75, size=8), dtype=DTYPE,
                            requires_grad=True)
    residuals["scorer_pair_weight"] = _parameter_fd_residual(
        lambda: scorer_loss(dev, p_scores), {"p": p_scores}
    )

    worst = max(residuals.values())
    return {"passed": bool(worst <= tolerance), "residuals": residuals,
            "max_relative_residual": worst, "tolerance": tolerance}


def check_shift_trend(
    epsilon: float = 0.3,
    n_grid: tuple[int, ...] = (50, 100, 200),
    trials: int = 200,
    seed: int = 7,
    cfg: TrendConfig | None = None,
) -> dict:
    """Exceedance rates must be non-increasing in n (fixed epsilon, fixed m/n)."""
    cfg = cfg or TrendConfig()
    rows = shift_exceedance_trend(cfg, n_grid, epsilon, trials, seed)
    rates = [row["rate"] for row in rows]
    non_increasing = all(a >= b for a, b in zip(rates, rates[1:]))
    return {"passed": bool(non_increasing), "rows": rows, "rates": rates,
            "epsilon": epsilon, "inlier_ratio": cfg.inlier_ratio}


def block_embeddings(k: int, per_block: int = 8, dim_per_block: int = 8,
                     seed: int = 0) -> np.ndarray:
    """Noiseless mutually-orthogonal block embeddings with k blocks."""
    rng = np.random.default_rng(seed)
    z = np.zeros((k * per_block, k * dim_per_block))
    for b in range(k):
        proto = np.zeros(k * dim_per_block)
        proto[b * dim_per_block : (b + 1) * dim_per_block] = rng.normal(size=dim_per_block)
        z[b * per_block : (b + 1) * per_block] = proto
    return z


def check_eigengap(seed: int = 3) -> dict:
    """Block oracle: exact recovery on orthogonal blocks, K=1 on identical rows."""
    outcomes = {}
    passed = True
    for k in (2, 3, 5):
        inferred, _ = infer_cluster_count(block_embeddings(k, seed=seed))
        outcomes[f"blocks_k{k}"] = inferred
        passed = passed and inferred == k
    identical = np.tile(np.ones(5), (7, 1))
    inferred, _ = infer_cluster_count(identical)
    outcomes["identical"] = inferred
    passed = passed and inferred == 1
    return {"passed": bool(passed), "inferred": outcomes}


def run_verification(seed: int = 0, pair_weight_fn: PairWeightFn | None = None,
                     trend_trials: int = 200) -> dict:
    """Run every check; failures become report entries with their residuals."""
    checks = {}
    started = time.perf_counter()
    checks["mmd_equivalence"] = check_mmd_equivalence(
        seed=seed + 2024, pair_weight_fn=pair_weight_fn
    )
    checks["pair_weight_limits"] = check_pair_weight_limits()
    checks["scorer_bruteforce"] = check_scorer_bruteforce(seed=seed + 515)
    checks["gradient_checks"] = check_gradients(seed=seed + 99)
    checks["shift_trend"] = check_shift_trend(seed=seed + 7, trials=trend_trials)
    checks["eigengap_oracle"] = check_eigengap(seed=seed + 3)
    return {
        "passed": all(c["passed"] for c in checks.values()),
        "checks": checks,
        "elapsed_seconds": round(time.perf_counter() - started, 3),
    }


def write_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path
