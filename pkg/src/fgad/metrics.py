"""Detection and annotation metrics: rank AUC, oracle-threshold F1, and NMI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (midrank convention)."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _binary(labels) -> np.ndarray:
    arr = np.asarray(labels).astype(bool)
    if arr.all() or not arr.any():
        raise DataError("both classes must be present")
    return arr


def auc(scores, binary_labels) -> float:
    """Rank-based (Mann-Whitney) AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary(binary_labels)
    ranks = _average_ranks(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_oracle_threshold(scores, binary_labels) -> float:
    """F1 after flagging exactly as many instances as there are true anomalies.

    Ties at the cutoff break by stable instance order; with the flagged count
    pinned to the true count, precision equals recall equals F1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary(binary_labels)
    k = int(labels.sum())
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(len(scores), dtype=bool)
    flags[order[:k]] = True
    tp = int((flags & labels).sum())
    return float(tp / k)


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalized by the arithmetic mean of the entropies.

    Permutation-invariant and symmetric; two constant partitions score 1.0,
    one constant partition against anything scores 0.0.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if len(a) != len(b):
        raise DataError("partitions must have equal length")
    if len(a) == 0:
        raise DataError("partitions must be nonempty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    n = len(a)
    contingency = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.float64)
    np.add.at(contingency, (ai, bi), 1.0)
    joint = contingency / n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    mi = (joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum()
    ha = -(pa[pa > 0] * np.log(pa[pa > 0])).sum()
    hb = -(pb[pb > 0] * np.log(pb[pb > 0])).sum()
    denom = (ha + hb) / 2.0
    if denom == 0.0:
        return 1.0  # both partitions constant: identical up to renaming
    return float(np.clip(mi / denom, 0.0, 1.0))


@dataclass(frozen=True)
class MetricsReport:
    """Run-level metric bundle; the product field is exactly f1 * nmi."""

    auc: float | None
    f1: float | None
    nmi: float | None
    run_seed: int
    config_digest: str

    @property
    def f1_times_nmi(self) -> float | None:
        if self.f1 is None or self.nmi is None:
            return None
        return self.f1 * self.nmi

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "f1": self.f1,
            "nmi": self.nmi,
            "f1_times_nmi": self.f1_times_nmi,
            "run_seed": self.run_seed,
            "config_digest": self.config_digest,
        }


def aggregate_over_seeds(rows: list[dict]) -> dict[str, dict]:
    """Per-metric mean/std/"mean(std)" over seed runs, skipping missing values."""
    keys = sorted({k for row in rows for k, v in row.items() if isinstance(v, (int, float))})
    out = {}
    for key in keys:
        values = np.array([row[key] for row in rows if row.get(key) is not None], dtype=np.float64)
        if len(values) == 0:
            continue
        mean, std = float(values.mean()), float(values.std())
        out[key] = {"mean": mean, "std": std, "formatted": f"{mean:.2f}({std:.2f})"}
    return out
