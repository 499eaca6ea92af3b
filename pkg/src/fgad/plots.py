"""Plot emission for completed runs: score histograms, subtype scatter, eigengaps."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .data import UNKNOWN_LABEL, is_anomaly_label
from .errors import DataError


def _pca_2d(values: np.ndarray) -> np.ndarray:
    """Deterministic 2-D PCA projection (component signs fixed by max-|loading|)."""
    centered = values - values.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    out = centered @ comps.T
    if out.shape[1] < 2:
        out = np.hstack([out, np.zeros((len(out), 2 - out.shape[1]))])
    return out


def plot_run(run_dir: str | Path) -> dict[str, str]:
    """Emit available plots for a run directory; returns {plot: path or skip notice}."""
    run = Path(run_dir)
    scores_path = run / "scores.csv"
    if not scores_path.exists():
        raise DataError(f"no scores.csv under {run}; is this a completed run?")
    results: dict[str, str] = {}

    scores = pd.read_csv(scores_path, dtype={"label": str})
    labeled = not scores["label"].eq(UNKNOWN_LABEL).all()
    fig, ax = plt.subplots(figsize=(6, 4))
    if labeled:
        truth = scores["label"].map(is_anomaly_label)
        ax.hist(scores.loc[~truth, "score"], bins=40, alpha=0.6, label="normal")
        ax.hist(scores.loc[truth, "score"], bins=40, alpha=0.6, label="anomaly")
        ax.legend()
    else:
        ax.hist(scores["score"], bins=40, alpha=0.8)
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("instances")
    ax.set_title("Score distribution")
    hist_path = run / "plot_scores.png"
    fig.savefig(hist_path, dpi=120)
    plt.close(fig)
    results["scores"] = str(hist_path)

    emb_path = run / "embeddings.csv"
    if labeled or emb_path.exists():
        if emb_path.exists():
            emb = pd.read_csv(emb_path)
            coord_cols = [c for c in emb.columns if c.startswith("e")]
            if len(emb) >= 2 and coord_cols:
                coords = _pca_2d(emb[coord_cols].to_numpy(dtype=np.float64))
                fig, ax = plt.subplots(figsize=(5, 5))
                for subtype in sorted(emb["subtype_id"].unique()):
                    sel = emb["subtype_id"] == subtype
                    ax.scatter(coords[sel, 0], coords[sel, 1], s=12, label=f"subtype {subtype}")
                ax.legend(fontsize=8)
                ax.set_title("Anomaly embeddings (PCA)")
                scatter_path = run / "plot_subtypes.png"
                fig.savefig(scatter_path, dpi=120)
                plt.close(fig)
                results["subtypes"] = str(scatter_path)
            else:
                results["subtypes"] = "skipped: empty anomaly set"
        else:
            results["subtypes"] = "skipped: no embeddings.csv"
    else:
        results["subtypes"] = "skipped: unlabeled run"

    metrics_path = run / "metrics.json"
    spectrum = None
    if metrics_path.exists():
        doc = json.loads(metrics_path.read_text())
        eigengap = doc.get("eigengap")
        if eigengap:
            spectrum = eigengap.get("eigenvalues")
    if spectrum:
        lam = np.asarray(spectrum)
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        ax1.plot(np.arange(1, len(lam) + 1), lam, marker=".")
        ax1.set_title("Spectrum (ascending)")
        ax1.set_xlabel("index")
        ax2.plot(np.arange(2, len(lam) + 1), np.diff(lam), marker=".")
        ax2.set_title("Eigengaps")
        ax2.set_xlabel("index")
        gap_path = run / "plot_eigengap.png"
        fig.savefig(gap_path, dpi=120)
        plt.close(fig)
        results["eigengap"] = str(gap_path)
    else:
        results["eigengap"] = "skipped: no inferred spectrum in metrics.json"
    return results
