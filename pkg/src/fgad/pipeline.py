"""End-to-end orchestration: detect, exclude, adapt, annotate, evaluate.

Every run is a pure function of (data, config, seed): artifacts (scores,
clusters, metrics, checkpoints) are written deterministically so a rerun with
the same config produces byte-identical JSON/CSV outputs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .adapter import (
    AdapterModel,
    adapt_anomalies,
    adapter_from_payload,
    adapter_to_payload,
    train_phase2,
)
from .annotator import AnnotatorResult, post_adaptation_deviations, train_annotator
from .config import RunConfig, config_digest
from .data import (
    DatasetBundle,
    ExpressionMatrix,
    UNKNOWN_LABEL,
    is_anomaly_label,
    load_csv,
    preprocess,
    synth_generate,
)
from .detector import (
    DetectorModel,
    LossWeights,
    detector_from_payload,
    detector_to_payload,
    reconstruction_deviation,
    train_phase1,
)
from .errors import DataError, FgadError
from .metrics import MetricsReport, auc, f1_oracle_threshold, nmi
from .nn import (
    MlpSpec,
    OptimizerConfig,
    TrainSchedule,
    derive_seed,
    load_checkpoint,
    save_checkpoint,
)
from .scorer import (
    DeviationSet,
    ScoreVector,
    ThresholdRule,
    default_scorer_spec,
    label_by_threshold,
    train_scorer,
)


@dataclass
class TargetStack:
    """All target instances concatenated in domain order."""

    values: np.ndarray
    instance_ids: tuple[str, ...]
    domain_ids: np.ndarray
    labels: tuple[str, ...] | None

    @property
    def truth(self) -> np.ndarray | None:
        if self.labels is None or all(l == UNKNOWN_LABEL for l in self.labels):
            return None
        return np.array([is_anomaly_label(l) for l in self.labels])

    def __len__(self) -> int:
        return len(self.instance_ids)


def stack_targets(bundle: DatasetBundle) -> TargetStack:
    if not bundle.targets:
        g = bundle.reference.n_features
        return TargetStack(np.zeros((0, g)), (), np.zeros(0, dtype=np.int64), None)
    values = np.vstack([t.values for t in bundle.targets])
    ids = tuple(i for t in bundle.targets for i in t.instance_ids)
    domains = np.concatenate(
        [np.full(t.n_instances, d) for d, t in zip(bundle.domain_ids, bundle.targets)]
    )
    labeled = any(t.labels is not None for t in bundle.targets)
    labels = (
        tuple(l for t in bundle.targets for l in (t.labels or (UNKNOWN_LABEL,) * t.n_instances))
        if labeled
        else None
    )
    return TargetStack(values, ids, domains, labels)


def build_bundle(cfg: RunConfig) -> DatasetBundle:
    if cfg.data.synthetic is not None:
        bundle = synth_generate(cfg.data.synthetic)
    else:
        bundle = load_csv(cfg.data.manifest)
    return preprocess(bundle, cfg.data.preprocess)


def resolve_threshold_rule(cfg: RunConfig, truth: np.ndarray | None) -> ThresholdRule:
    if cfg.threshold.rule == "oracle_count":
        if truth is None:
            raise DataError("oracle_count threshold rule requires labeled targets")
        return ThresholdRule("count", int(truth.sum()))
    return ThresholdRule(cfg.threshold.rule, cfg.threshold.value)


def flag_targets(cfg: RunConfig, bundle: DatasetBundle, targets: TargetStack,
                 scores: ScoreVector) -> np.ndarray:
    """Apply the flagging rule within each target dataset.

    Scores from independently trained per-dataset scorers are comparable
    within a dataset but not across them, so thresholds are resolved and
    applied per dataset and the flags concatenated.
    """
    flags = np.zeros(len(targets), dtype=bool)
    offset = 0
    for t in bundle.targets:
        n = t.n_instances
        block = slice(offset, offset + n)
        truth = targets.truth
        rule = resolve_threshold_rule(cfg, None if truth is None else truth[block])
        flags[block] = label_by_threshold(scores.p[block], rule)
        offset += n
    return flags


def per_target_detection(bundle: DatasetBundle, targets: TargetStack,
                         scores: ScoreVector) -> list[dict]:
    """AUC / oracle-threshold F1 for each labeled target dataset."""
    rows = []
    truth = targets.truth
    if truth is None:
        return rows
    offset = 0
    for d, t in zip(bundle.domain_ids, bundle.targets):
        n = t.n_instances
        block = slice(offset, offset + n)
        offset += n
        t_truth = truth[block]
        if 0 < t_truth.sum() < n:
            rows.append(
                {
                    "domain_id": int(d),
                    "auc": auc(scores.p[block], t_truth),
                    "f1": f1_oracle_threshold(scores.p[block], t_truth),
                    "n_instances": int(n),
                    "n_anomalies": int(t_truth.sum()),
                }
            )
    return rows


def _model_specs(cfg: RunConfig, n_features: int) -> dict[str, MlpSpec]:
    m = cfg.model
    return {
        "encoder": MlpSpec((n_features, *m.encoder_hidden, m.latent_dim)),
        "decoder": MlpSpec((m.latent_dim, *reversed(m.encoder_hidden), n_features)),
        "critic": MlpSpec((n_features, *m.critic_hidden, 1)),
    }


def _schedule(phase) -> TrainSchedule:
    return TrainSchedule(phase.epochs, phase.batch_size, phase.critic_steps)


def score_targets(cfg: RunConfig, bundle: DatasetBundle,
                  detector: DetectorModel) -> tuple[DeviationSet, ScoreVector, dict]:
    """Score each target dataset separately and concatenate in domain order.

    Scoring per dataset keeps each discrepancy problem free of cross-domain
    offsets (the split by domain would otherwise dominate the split by
    anomaly). Datasets too small to train on fall back to deviation-norm
    ranks.
    """
    sc = cfg.model.scorer
    dev_blocks, score_blocks, ids = [], [], []
    diagnostics: dict = {}
    for d, t in zip(bundle.domain_ids, bundle.targets):
        dev = reconstruction_deviation(detector, t)
        dev_blocks.append(dev.deviations)
        ids.extend(dev.instance_ids)
        if t.n_instances >= 4:
            result = train_scorer(
                dev,
                default_scorer_spec(t.n_features, sc.hidden),
                derive_seed(cfg.seed, f"scorer-{d}"),
                max_epochs=sc.max_epochs,
                learning_rate=sc.learning_rate,
                variant=sc.variant,
                eta=sc.eta,
                convergence_delta=sc.convergence_delta,
                min_epochs=sc.min_epochs,
                warmup_epochs=sc.warmup_epochs,
            )
            score_blocks.append(result.scores.p)
            diagnostics[f"target_{d}"] = {
                "epochs": result.epochs_run,
                "converged": result.converged,
                "collapsed": result.collapsed,
                **result.diagnostics,
            }
        else:
            norms = np.linalg.norm(dev.deviations, axis=1)
            ranks = np.argsort(np.argsort(norms, kind="stable"), kind="stable")
            fallback = sc.eta + (1 - 2 * sc.eta) * ranks / max(t.n_instances - 1, 1)
            score_blocks.append(fallback)
            diagnostics[f"target_{d}"] = {"fallback": "norm_rank"}
    deviations = DeviationSet(np.vstack(dev_blocks), tuple(ids))
    scores = ScoreVector(np.clip(np.concatenate(score_blocks), sc.eta, 1 - sc.eta), sc.eta)
    return deviations, scores, diagnostics


class _Timer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def phase(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                timer.timings[name] = round(time.perf_counter() - self.start, 3)
                if isinstance(exc, FgadError):
                    exc.args = (f"[phase {name}] {exc.args[0]}", *exc.args[1:])
                return False

        return _Ctx()


@dataclass
class PipelineResult:
    bundle: DatasetBundle
    targets: TargetStack
    detector: DetectorModel
    deviations: DeviationSet | None
    scores: ScoreVector | None
    flags: np.ndarray
    adapter: AdapterModel | None
    adapted: np.ndarray | None
    annotation: AnnotatorResult | None
    report: MetricsReport | None
    metrics_doc: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def exclude_flagged(bundle: DatasetBundle, targets: TargetStack, flags: np.ndarray) -> DatasetBundle:
    """Drop flagged target instances; the reference passes through unchanged."""
    kept = []
    offset = 0
    for t in bundle.targets:
        block = flags[offset : offset + t.n_instances]
        offset += t.n_instances
        keep_idx = np.nonzero(~block)[0]
        if len(keep_idx) < 2:
            raise DataError("a target dataset retains fewer than 2 instances after exclusion")
        kept.append(t.subset(keep_idx))
    return DatasetBundle(bundle.reference, tuple(kept), bundle.domain_ids, bundle.metadata)


def compute_metrics(
    cfg: RunConfig,
    bundle: DatasetBundle,
    targets: TargetStack,
    scores: ScoreVector | None,
    flags: np.ndarray,
    annotation: AnnotatorResult | None,
) -> tuple[MetricsReport, list[dict]]:
    """Detection metrics averaged over labeled target datasets, plus subtype NMI."""
    per_target: list[dict] = []
    auc_v = f1_v = nmi_v = None
    if scores is not None:
        per_target = per_target_detection(bundle, targets, scores)
        if per_target:
            auc_v = float(np.mean([row["auc"] for row in per_target]))
            f1_v = float(np.mean([row["f1"] for row in per_target]))
    truth = targets.truth
    if truth is not None and annotation is not None and flags.sum() > 0:
        truth_labels = [targets.labels[i] for i in np.nonzero(flags)[0]]
        nmi_v = nmi(truth_labels, annotation.labels)
    report = MetricsReport(
        auc=auc_v, f1=f1_v, nmi=nmi_v, run_seed=cfg.seed, config_digest=config_digest(cfg)
    )
    return report, per_target


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None,
                 echo=lambda msg: None) -> PipelineResult:
    """Run all phases in order, checkpointing every intermediate when out_dir is set."""
    timer = _Timer()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    with timer.phase("data"):
        bundle = build_bundle(cfg)
        targets = stack_targets(bundle)
    echo(f"data: {bundle.reference.n_instances} reference + {len(targets)} target instances")

    specs = _model_specs(cfg, bundle.reference.n_features)
    weights = LossWeights(cfg.model.alpha, cfg.model.beta, cfg.model.lambda_gp)

    with timer.phase("detect"):
        detector = train_phase1(
            bundle.reference,
            specs["encoder"],
            specs["decoder"],
            specs["critic"],
            _schedule(cfg.phase1),
            weights,
            derive_seed(cfg.seed, "detector"),
            memory_size=cfg.model.memory_size,
            temperature=cfg.model.temperature,
            optimizer=OptimizerConfig(learning_rate=cfg.phase1.learning_rate, seed=cfg.seed),
            use_memory=cfg.model.use_memory,
        )
    if out is not None:
        save_checkpoint(out / "checkpoints" / "detector.json", "detector",
                        detector_to_payload(detector))

    deviations = scores = None
    flags = np.zeros(len(targets), dtype=bool)
    if len(targets) > 0:
        with timer.phase("score"):
            deviations, scores, score_diag = score_targets(cfg, bundle, detector)
            flags = flag_targets(cfg, bundle, targets, scores)
        echo(f"score: flagged {int(flags.sum())}/{len(targets)} target instances")
    if out is not None:
        write_scores_csv(out / "scores.csv", targets, scores, flags)

    with timer.phase("adapt"):
        clean = exclude_flagged(bundle, targets, flags) if len(targets) else bundle
        adapter = train_phase2(
            clean,
            specs["encoder"],
            specs["decoder"],
            specs["critic"],
            _schedule(cfg.phase2),
            weights,
            derive_seed(cfg.seed, "adapter"),
            pool_size=cfg.phase2.pool_size,
            optimizer=OptimizerConfig(learning_rate=cfg.phase2.learning_rate, seed=cfg.seed),
        )
    if out is not None:
        save_checkpoint(out / "checkpoints" / "adapter.json", "adapter",
                        adapter_to_payload(adapter))

    adapted = None
    annotation = None
    flagged_idx = np.nonzero(flags)[0]
    if len(flagged_idx) > 0:
        with timer.phase("annotate"):
            anomalies = ExpressionMatrix(
                targets.values[flagged_idx],
                bundle.feature_names,
                tuple(targets.instance_ids[i] for i in flagged_idx),
            )
            adapted = adapt_anomalies(adapter, anomalies, targets.domain_ids[flagged_idx])
            delta = post_adaptation_deviations(detector, adapted)
            annotation = train_annotator(
                adapted,
                delta,
                cfg.model.cluster.k,
                derive_seed(cfg.seed, "annotator"),
                embed_dim=cfg.model.fusion.embed_dim,
                n_heads=cfg.model.fusion.n_heads,
                nu=cfg.model.cluster.nu,
                max_iters=cfg.model.cluster.max_iters,
                learning_rate=cfg.model.cluster.learning_rate,
                change_threshold=cfg.model.cluster.change_threshold,
                eigengap_mode=cfg.model.cluster.eigengap_mode,
                min_iterations=cfg.model.cluster.min_iterations,
            )
        echo(f"annotate: {annotation.k} subtypes over {len(flagged_idx)} anomalies "
             f"in {annotation.iterations} iterations")

    with timer.phase("evaluate"):
        report, per_target = compute_metrics(cfg, bundle, targets, scores, flags, annotation)
        metrics_doc = report.to_dict()
        metrics_doc["per_target"] = per_target
        metrics_doc["n_flagged"] = int(flags.sum())
        metrics_doc["k"] = None if annotation is None else annotation.k
        metrics_doc["eigengap"] = None if annotation is None else annotation.eigengap_report

    if out is not None:
        write_clusters_csv(out / "clusters.csv", targets, flagged_idx, annotation)
        write_embeddings_csv(out / "embeddings.csv", targets, flagged_idx, annotation)
        (out / "metrics.json").write_text(json.dumps(metrics_doc, indent=2, sort_keys=True) + "\n")
        if annotation is not None:
            save_checkpoint(
                out / "checkpoints" / "annotator.json", "annotator",
                {
                    "k": annotation.k,
                    "nu": annotation.state.nu,
                    "centroids": annotation.state.centroids.tolist(),
                    "iterations": annotation.iterations,
                },
            )
        manifest = {
            "config": cfg.raw,
            "config_digest": config_digest(cfg),
            "seed": cfg.seed,
            "threshold_rule": {"rule": cfg.threshold.rule, "value": cfg.threshold.value},
            "package_version": __version__,
            "phase_timings": timer.timings,
            "n_flagged": int(flags.sum()),
        }
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    return PipelineResult(
        bundle=bundle,
        targets=targets,
        detector=detector,
        deviations=deviations,
        scores=scores,
        flags=flags,
        adapter=adapter,
        adapted=adapted,
        annotation=annotation,
        report=report,
        metrics_doc=metrics_doc,
        timings=timer.timings,
    )


# ---------------------------------------------------------------------------
# Artifact I/O
# ---------------------------------------------------------------------------


def write_scores_csv(path: Path, targets: TargetStack, scores: ScoreVector | None,
                     flags: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = targets.labels or (UNKNOWN_LABEL,) * len(targets)
    frame = pd.DataFrame(
        {
            "instance_id": list(targets.instance_ids),
            "score": list(scores.p) if scores is not None else [0.0] * len(targets),
            "flagged": flags.astype(int),
            "domain_id": targets.domain_ids,
            "label": list(labels),
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g")


def write_clusters_csv(path: Path, targets: TargetStack, flagged_idx: np.ndarray,
                       annotation: AnnotatorResult | None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if annotation is None:
        pd.DataFrame(columns=["instance_id", "subtype_id", "max_assignment"]).to_csv(
            path, index=False
        )
        return
    frame = pd.DataFrame(
        {
            "instance_id": [targets.instance_ids[i] for i in flagged_idx],
            "subtype_id": annotation.labels,
            "max_assignment": annotation.state.q.max(axis=1),
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g")


def write_embeddings_csv(path: Path, targets: TargetStack, flagged_idx: np.ndarray,
                         annotation: AnnotatorResult | None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if annotation is None:
        pd.DataFrame(columns=["instance_id", "subtype_id"]).to_csv(path, index=False)
        return
    z = annotation.state.z_star
    frame = pd.DataFrame(z, columns=[f"e{j}" for j in range(z.shape[1])])
    frame.insert(0, "instance_id", [targets.instance_ids[i] for i in flagged_idx])
    frame["subtype_id"] = annotation.labels
    frame.to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# Partial runs (detect / adapt / annotate / eval as separate commands)
# ---------------------------------------------------------------------------


def _read_scores(out: Path) -> pd.DataFrame:
    path = out / "scores.csv"
    if not path.exists():
        raise DataError(f"missing scores.csv in {out}; run detect first")
    return pd.read_csv(path, dtype={"instance_id": str, "label": str})


def run_detect(cfg: RunConfig, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = build_bundle(cfg)
    targets = stack_targets(bundle)
    specs = _model_specs(cfg, bundle.reference.n_features)
    weights = LossWeights(cfg.model.alpha, cfg.model.beta, cfg.model.lambda_gp)
    detector = train_phase1(
        bundle.reference, specs["encoder"], specs["decoder"], specs["critic"],
        _schedule(cfg.phase1), weights, derive_seed(cfg.seed, "detector"),
        memory_size=cfg.model.memory_size, temperature=cfg.model.temperature,
        optimizer=OptimizerConfig(learning_rate=cfg.phase1.learning_rate, seed=cfg.seed),
        use_memory=cfg.model.use_memory,
    )
    save_checkpoint(out / "checkpoints" / "detector.json", "detector",
                    detector_to_payload(detector))
    scores = None
    flags = np.zeros(len(targets), dtype=bool)
    if len(targets) > 0:
        _, scores, _ = score_targets(cfg, bundle, detector)
        flags = flag_targets(cfg, bundle, targets, scores)
    write_scores_csv(out / "scores.csv", targets, scores, flags)
    return {"n_flagged": int(flags.sum()), "n_targets": len(targets)}


def run_adapt(cfg: RunConfig, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    bundle = build_bundle(cfg)
    targets = stack_targets(bundle)
    frame = _read_scores(out)
    flags = frame["flagged"].to_numpy().astype(bool)
    if len(flags) != len(targets):
        raise DataError("scores.csv does not match the configured dataset")
    specs = _model_specs(cfg, bundle.reference.n_features)
    weights = LossWeights(cfg.model.alpha, cfg.model.beta, cfg.model.lambda_gp)
    clean = exclude_flagged(bundle, targets, flags) if len(targets) else bundle
    adapter = train_phase2(
        clean, specs["encoder"], specs["decoder"], specs["critic"], _schedule(cfg.phase2),
        weights, derive_seed(cfg.seed, "adapter"), pool_size=cfg.phase2.pool_size,
        optimizer=OptimizerConfig(learning_rate=cfg.phase2.learning_rate, seed=cfg.seed),
    )
    save_checkpoint(out / "checkpoints" / "adapter.json", "adapter", adapter_to_payload(adapter))
    return {"n_style_rows": adapter.generator.n_targets}


def run_annotate(cfg: RunConfig, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    bundle = build_bundle(cfg)
    targets = stack_targets(bundle)
    frame = _read_scores(out)
    flags = frame["flagged"].to_numpy().astype(bool)
    detector = detector_from_payload(
        load_checkpoint(out / "checkpoints" / "detector.json", "detector")
    )
    adapter = adapter_from_payload(
        load_checkpoint(out / "checkpoints" / "adapter.json", "adapter")
    )
    flagged_idx = np.nonzero(flags)[0]
    annotation = None
    if len(flagged_idx):
        anomalies = ExpressionMatrix(
            targets.values[flagged_idx], bundle.feature_names,
            tuple(targets.instance_ids[i] for i in flagged_idx),
        )
        adapted = adapt_anomalies(adapter, anomalies, targets.domain_ids[flagged_idx])
        delta = post_adaptation_deviations(detector, adapted)
        annotation = train_annotator(
            adapted, delta, cfg.model.cluster.k, derive_seed(cfg.seed, "annotator"),
            embed_dim=cfg.model.fusion.embed_dim, n_heads=cfg.model.fusion.n_heads,
            nu=cfg.model.cluster.nu, max_iters=cfg.model.cluster.max_iters,
            learning_rate=cfg.model.cluster.learning_rate,
            change_threshold=cfg.model.cluster.change_threshold,
            eigengap_mode=cfg.model.cluster.eigengap_mode,
            min_iterations=cfg.model.cluster.min_iterations,
        )
    write_clusters_csv(out / "clusters.csv", targets, flagged_idx, annotation)
    write_embeddings_csv(out / "embeddings.csv", targets, flagged_idx, annotation)
    scores = ScoreVector(np.clip(frame["score"].to_numpy(), cfg.model.scorer.eta,
                                 1 - cfg.model.scorer.eta)) if len(targets) else None
    report, per_target = compute_metrics(cfg, bundle, targets, scores, flags, annotation)
    doc = report.to_dict()
    doc["per_target"] = per_target
    doc["n_flagged"] = int(flags.sum())
    doc["k"] = None if annotation is None else annotation.k
    doc["eigengap"] = None if annotation is None else annotation.eigengap_report
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def run_eval(cfg: RunConfig, out_dir: str | Path) -> dict:
    """Recompute metrics from scores.csv / clusters.csv against the configured labels."""
    out = Path(out_dir)
    frame = _read_scores(out)
    truth = np.array([is_anomaly_label(l) for l in frame["label"]])
    if frame["label"].eq(UNKNOWN_LABEL).all():
        raise DataError("eval requires labeled data")
    scores = frame["score"].to_numpy()
    flags = frame["flagged"].to_numpy().astype(bool)
    doc: dict = {
        "auc": auc(scores, truth) if 0 < truth.sum() < len(truth) else None,
        "f1": f1_oracle_threshold(scores, truth) if 0 < truth.sum() < len(truth) else None,
        "nmi": None,
    }
    clusters_path = out / "clusters.csv"
    if clusters_path.exists():
        clusters = pd.read_csv(clusters_path, dtype={"instance_id": str})
        if len(clusters):
            merged = clusters.merge(frame[["instance_id", "label"]], on="instance_id")
            doc["nmi"] = nmi(merged["label"], merged["subtype_id"])
    doc["f1_times_nmi"] = (
        doc["f1"] * doc["nmi"] if doc["f1"] is not None and doc["nmi"] is not None else None
    )
    doc["run_seed"] = cfg.seed
    doc["config_digest"] = config_digest(cfg)
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
