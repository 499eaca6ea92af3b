"""Dataset containers, CSV ingestion, preprocessing, and synthetic generation.

Instances live in dense float64 matrices (instances x features). A bundle is one
reference dataset (normals only) plus an ordered list of target datasets, each
tagged with an integer domain id. The synthetic generator draws data from the
additive model  x = content_prototype + domain_offset + gaussian_noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

NORMAL_LABEL = "normal"
UNKNOWN_LABEL = "unknown"


def anomaly_label(subtype: int) -> str:
    return f"anomaly_{subtype}"


def is_anomaly_label(label: str) -> bool:
    return label.startswith("anomaly_")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ExpressionMatrix:
    """Dense instances-x-features matrix with names and optional labels."""

    values: np.ndarray
    feature_names: tuple[str, ...]
    instance_ids: tuple[str, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(np.atleast_2d(self.values)))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "instance_ids", tuple(self.instance_ids))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
        n, g = self.values.shape
        if n < 1:
            raise DataError("matrix must contain at least one instance")
        if len(self.feature_names) != g:
            raise DataError(
                f"feature_names length {len(self.feature_names)} != number of columns {g}"
            )
        if len(self.instance_ids) != n:
            raise DataError(
                f"instance_ids length {len(self.instance_ids)} != number of rows {n}"
            )
        if self.labels is not None and len(self.labels) != n:
            raise DataError(f"labels length {len(self.labels)} != number of rows {n}")
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise DataError(
                f"non-finite value at row {bad[0]} column '{self.feature_names[bad[1]]}'"
            )

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def subset(self, row_idx: np.ndarray) -> "ExpressionMatrix":
        row_idx = np.asarray(row_idx)
        return ExpressionMatrix(
            values=self.values[row_idx],
            feature_names=self.feature_names,
            instance_ids=tuple(self.instance_ids[i] for i in row_idx),
            labels=None if self.labels is None else tuple(self.labels[i] for i in row_idx),
        )


@dataclass(frozen=True)
class DatasetBundle:
    """One reference dataset plus ordered target datasets sharing a feature space."""

    reference: ExpressionMatrix
    targets: tuple[ExpressionMatrix, ...]
    domain_ids: tuple[int, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "domain_ids", tuple(self.domain_ids))
        if len(self.targets) != len(self.domain_ids):
            raise DataError("one domain id required per target dataset")
        n_target = len(self.targets)
        if len(set(self.domain_ids)) != n_target:
            raise DataError(f"domain ids must be unique, got {self.domain_ids}")
        for d in self.domain_ids:
            if not 0 <= d < n_target:
                raise DataError(f"domain id {d} outside [0, {n_target})")
        for i, t in enumerate(self.targets):
            if t.feature_names != self.reference.feature_names:
                raise DataError(
                    f"target {i} features differ from reference; "
                    f"expected identical names and ordering"
                )
        if self.reference.labels is not None:
            bad = {
                l for l in self.reference.labels if l not in (NORMAL_LABEL, UNKNOWN_LABEL)
            }
            if bad:
                raise DataError(f"reference may carry only normal labels, found {sorted(bad)}")

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.reference.feature_names


@dataclass(frozen=True)
class DomainVector:
    """One-hot domain-identity vector; the all-zero vector means reference domain."""

    one_hot: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.one_hot, dtype=np.float64)
        if vec.ndim != 1 or not np.all(np.isin(vec, (0.0, 1.0))) or vec.sum() > 1:
            raise DataError("domain vector must be binary with at most one entry set")
        object.__setattr__(self, "one_hot", _freeze(vec))

    @property
    def is_reference(self) -> bool:
        return bool(self.one_hot.sum() == 0)


def domain_onehot(domain_ids: np.ndarray, n_targets: int) -> np.ndarray:
    """Expand integer domain ids (-1 = reference) into a batch of one-hot rows."""
    domain_ids = np.asarray(domain_ids, dtype=np.int64)
    if n_targets and (domain_ids.max(initial=-1) >= n_targets or domain_ids.min(initial=0) < -1):
        raise DataError(f"domain ids must lie in [-1, {n_targets}), got {domain_ids}")
    out = np.zeros((len(domain_ids), n_targets), dtype=np.float64)
    for i, d in enumerate(domain_ids):
        if d >= 0:
            out[i, d] = 1.0
    return out


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetSpec:
    """Size and composition of one synthetic target dataset."""

    size: int
    anomaly_ratio: float
    anomaly_subtypes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.size < 1:
            raise DataError("target size must be >= 1")
        if not 0.0 <= self.anomaly_ratio <= 1.0:
            raise DataError(f"anomaly_ratio {self.anomaly_ratio} outside [0, 1]")
        if self.anomaly_subtypes is not None:
            object.__setattr__(self, "anomaly_subtypes", tuple(self.anomaly_subtypes))


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls for the additive-model synthetic generator."""

    n_features: int
    n_normal_types: int
    n_anomaly_subtypes: int
    n_domains: int
    content_separation: float
    domain_shift_magnitude: float
    noise_sigma: float
    reference_size: int
    targets: tuple[TargetSpec, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        for name in ("n_features", "n_normal_types", "n_anomaly_subtypes", "reference_size"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.n_domains < 0:
            raise DataError("n_domains must be >= 0")
        for name in ("content_separation", "domain_shift_magnitude", "noise_sigma"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if len(self.targets) != self.n_domains:
            raise DataError(
                f"expected {self.n_domains} target specs, got {len(self.targets)}"
            )
        for t in self.targets:
            if t.anomaly_subtypes is not None:
                for s in t.anomaly_subtypes:
                    if not 0 <= s < self.n_anomaly_subtypes:
                        raise DataError(f"anomaly subtype {s} out of range")


def _draw_prototypes(rng: np.random.Generator, n: int, dim: int, separation: float) -> np.ndarray:
    protos = rng.standard_normal((n, dim))
    if n == 1:
        return protos
    diffs = protos[:, None, :] - protos[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    d_min = dist[np.triu_indices(n, k=1)].min()
    if d_min == 0:
        raise DataError("degenerate prototype draw; change the seed")
    return protos * (separation / d_min)


def synth_generate(spec: SyntheticSpec) -> DatasetBundle:
    """Generate a labeled bundle from the additive content+shift+noise model.

    Content prototypes (normal types first, then anomaly subtypes) are drawn
    from a seeded standard normal and rescaled so the minimum pairwise distance
    equals ``content_separation``. Each target domain gets an offset vector of
    norm ``domain_shift_magnitude``; the reference offset is zero. The reference
    contains only normal types. Fully reproducible from ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    g = spec.n_features
    n_types = spec.n_normal_types + spec.n_anomaly_subtypes
    prototypes = _draw_prototypes(rng, n_types, g, spec.content_separation)

    offsets = rng.standard_normal((spec.n_domains, g))
    norms = np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets = offsets / norms * spec.domain_shift_magnitude

    feature_names = tuple(f"f{j}" for j in range(g))
    type_ids: dict[str, np.ndarray] = {}

    def make_dataset(name, size, offset, anomaly_ratio, allowed_subtypes):
        n_anom = int(round(size * anomaly_ratio))
        n_norm = size - n_anom
        normal_types = rng.integers(0, spec.n_normal_types, size=n_norm)
        subtype_ids = (
            np.asarray(allowed_subtypes)[np.arange(n_anom) % len(allowed_subtypes)]
            if n_anom
            else np.empty(0, dtype=np.int64)
        )
        rows = np.concatenate(
            [prototypes[normal_types], prototypes[spec.n_normal_types + subtype_ids]]
        ) if n_anom else prototypes[normal_types]
        noise = rng.normal(0.0, spec.noise_sigma, size=(size, g)) if spec.noise_sigma > 0 else 0.0
        values = rows + offset + noise
        labels = [NORMAL_LABEL] * n_norm + [anomaly_label(int(s)) for s in subtype_ids]
        ids = tuple(f"{name}_{i}" for i in range(size))
        type_ids[name] = np.concatenate([normal_types, -1 - subtype_ids]) if n_anom else normal_types
        return ExpressionMatrix(values, feature_names, ids, tuple(labels))

    reference = make_dataset("ref", spec.reference_size, np.zeros(g), 0.0, ())
    targets = []
    for k, t in enumerate(spec.targets):
        allowed = t.anomaly_subtypes or tuple(range(spec.n_anomaly_subtypes))
        targets.append(make_dataset(f"t{k}", t.size, offsets[k], t.anomaly_ratio, allowed))

    metadata = {
        "prototypes": prototypes,
        "domain_offsets": offsets,
        "normal_type_ids": type_ids,
    }
    return DatasetBundle(reference, tuple(targets), tuple(range(spec.n_domains)), metadata)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    """Preprocessing steps, applied in order; all default to off."""

    total_scale: bool = False
    log1p: bool = False
    top_k_features: int | None = None


def _scaled_values(mat: ExpressionMatrix, median_total: float) -> np.ndarray:
    totals = mat.values.sum(axis=1)
    zero = np.nonzero(totals == 0)[0]
    if zero.size:
        raise DataError(f"instance '{mat.instance_ids[zero[0]]}' has zero total; cannot scale")
    return mat.values * (median_total / totals)[:, None]


def preprocess(bundle: DatasetBundle, cfg: PreprocessConfig) -> DatasetBundle:
    """Apply total-sum scaling, log1p, and reference-based top-K feature selection.

    The scaling target is the median instance total of the reference dataset;
    feature variances for the selection step are likewise computed on the
    reference only, so targets never influence the chosen feature set.
    """
    mats = [bundle.reference, *bundle.targets]
    if cfg.total_scale:
        if any(m.values.min() < 0 for m in mats):
            raise DataError("total-sum scaling requires nonnegative values")
        median_total = float(np.median(bundle.reference.values.sum(axis=1)))
        values = [_scaled_values(m, median_total) for m in mats]
    else:
        values = [m.values.copy() for m in mats]
    if cfg.log1p:
        if any(v.min() < 0 for v in values):
            raise DataError("log1p requires nonnegative values")
        values = [np.log1p(v) for v in values]

    names = bundle.feature_names
    if cfg.top_k_features is not None:
        k = cfg.top_k_features
        if k > len(names):
            raise DataError(f"top_k_features {k} exceeds feature count {len(names)}")
        variances = values[0].var(axis=0)
        # stable top-k: ties keep the lower original index
        order = np.argsort(-variances, kind="stable")[:k]
        keep = np.sort(order)
        values = [v[:, keep] for v in values]
        names = tuple(names[i] for i in keep)

    def rebuild(mat, vals):
        return ExpressionMatrix(vals, names, mat.instance_ids, mat.labels)

    return DatasetBundle(
        rebuild(bundle.reference, values[0]),
        tuple(rebuild(m, v) for m, v in zip(bundle.targets, values[1:])),
        bundle.domain_ids,
        bundle.metadata,
    )


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------

ID_COLUMN = "instance_id"
LABEL_COLUMN = "label"


def _read_matrix(path: Path, label_column: str | None, id_column: str | None) -> ExpressionMatrix:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    labels = None
    if label_column is not None:
        if label_column not in frame.columns:
            raise DataError(f"{path}: label column '{label_column}' not found")
        labels = tuple(frame.pop(label_column))
    if id_column is not None and id_column in frame.columns:
        ids = tuple(frame.pop(id_column))
    else:
        ids = tuple(f"{path.stem}_{i}" for i in range(len(frame)))
    values = np.empty(frame.shape, dtype=np.float64)
    for j, col in enumerate(frame.columns):
        cells = frame[col].to_numpy()
        try:
            # python float() is correctly rounded; pandas' fast parser can be
            # one ulp off, which breaks exact write/load round trips
            values[:, j] = [float(s) for s in cells]
        except ValueError:
            for row, cell in enumerate(cells):
                try:
                    float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {row} column '{col}'"
                    ) from None
    if labels is None:
        labels = (UNKNOWN_LABEL,) * len(frame)
    return ExpressionMatrix(values, tuple(frame.columns), ids, labels)


def _align_to_reference(mat: ExpressionMatrix, ref_names: tuple[str, ...], origin: str) -> ExpressionMatrix:
    if mat.feature_names == ref_names:
        return mat
    missing = [n for n in ref_names if n not in mat.feature_names]
    extra = [n for n in mat.feature_names if n not in ref_names]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing features {missing}")
        if extra:
            parts.append(f"unexpected features {extra}")
        raise DataError(f"{origin}: feature alignment failed: " + "; ".join(parts))
    order = [mat.feature_names.index(n) for n in ref_names]
    return ExpressionMatrix(mat.values[:, order], ref_names, mat.instance_ids, mat.labels)


def load_csv(manifest: dict | str | Path, base_dir: str | Path | None = None) -> DatasetBundle:
    """Load a bundle from CSV files described by a JSON manifest.

    The manifest maps each file to a role (``reference`` or ``target``) plus an
    optional label column; target columns are reordered to the reference's
    feature order, and any mismatch in the feature *set* is an alignment error.
    """
    if not isinstance(manifest, dict):
        manifest_path = Path(manifest)
        base_dir = base_dir or manifest_path.parent
        manifest = json.loads(manifest_path.read_text())
    base = Path(base_dir) if base_dir is not None else Path(".")
    files = manifest.get("files")
    if not files:
        raise DataError("manifest has no 'files' entries")

    reference = None
    targets: list[tuple[int, ExpressionMatrix]] = []
    for entry in files:
        path = base / entry["path"]
        if not path.exists():
            raise DataError(f"manifest file not found: {path}")
        mat = _read_matrix(path, entry.get("label_column"), entry.get("id_column", ID_COLUMN))
        role = entry.get("role")
        if role == "reference":
            if reference is not None:
                raise DataError("manifest declares more than one reference dataset")
            reference = mat
        elif role == "target":
            targets.append((int(entry["domain_id"]), mat))
        else:
            raise DataError(f"unknown role {role!r} for {entry['path']}")
    if reference is None:
        raise DataError("manifest declares no reference dataset")

    targets.sort(key=lambda pair: pair[0])
    aligned = tuple(
        _align_to_reference(mat, reference.feature_names, f"target domain {d}")
        for d, mat in targets
    )
    return DatasetBundle(reference, aligned, tuple(d for d, _ in targets))


def write_csv(bundle: DatasetBundle, out_dir: str | Path) -> Path:
    """Write the bundle as one CSV per dataset plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []

    def dump(mat: ExpressionMatrix, name: str, role: str, domain_id: int | None):
        frame = pd.DataFrame(mat.values, columns=list(mat.feature_names))
        frame.insert(0, ID_COLUMN, list(mat.instance_ids))
        labeled = mat.labels is not None
        if labeled:
            frame[LABEL_COLUMN] = list(mat.labels)
        path = out / f"{name}.csv"
        frame.to_csv(path, index=False, float_format="%.17g")
        entry = {"path": f"{name}.csv", "role": role, "id_column": ID_COLUMN}
        if labeled:
            entry["label_column"] = LABEL_COLUMN
        if domain_id is not None:
            entry["domain_id"] = domain_id
        entries.append(entry)

    dump(bundle.reference, "reference", "reference", None)
    for d, t in zip(bundle.domain_ids, bundle.targets):
        dump(t, f"target_{d}", "target", d)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Mixed continuous/categorical encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixedSchema:
    """Column kinds for mixed tabular records; unlisted columns are excluded."""

    continuous: tuple[str, ...]
    categorical: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        overlap = set(self.continuous) & set(self.categorical)
        if overlap:
            raise DataError(f"columns declared both continuous and categorical: {sorted(overlap)}")


class MixedEncoder:
    """One-hot categoricals and min-max scaled continuous columns, fit on a reference frame."""

    def __init__(self, schema: MixedSchema, reference: pd.DataFrame):
        self.schema = schema
        for col in (*schema.continuous, *schema.categorical):
            if col not in reference.columns:
                raise DataError(f"schema column '{col}' missing from reference records")
        self.levels = {
            col: tuple(sorted(reference[col].astype(str).unique()))
            for col in schema.categorical
        }
        cont = reference[list(schema.continuous)].astype(np.float64)
        self.mins = cont.min(axis=0).to_numpy()
        self.maxs = cont.max(axis=0).to_numpy()
        self.feature_names = tuple(
            [f"{c}={lvl}" for c in schema.categorical for lvl in self.levels[c]]
            + list(schema.continuous)
        )

    def transform(self, records: pd.DataFrame, ids: tuple[str, ...] | None = None,
                  labels: tuple[str, ...] | None = None) -> tuple[ExpressionMatrix, list[str]]:
        warnings: list[str] = []
        n = len(records)
        blocks = []
        for col in self.schema.categorical:
            levels = self.levels[col]
            block = np.zeros((n, len(levels)), dtype=np.float64)
            values = records[col].astype(str).to_numpy()
            index = {lvl: i for i, lvl in enumerate(levels)}
            unseen = set()
            for row, val in enumerate(values):
                j = index.get(val)
                if j is None:
                    unseen.add(val)
                else:
                    block[row, j] = 1.0
            if unseen:
                warnings.append(
                    f"column '{col}': unseen categories {sorted(unseen)} mapped to zero block"
                )
            blocks.append(block)
        cont = records[list(self.schema.continuous)].astype(np.float64).to_numpy()
        span = self.maxs - self.mins
        constant = span == 0
        if constant.any():
            for j in np.nonzero(constant)[0]:
                warnings.append(
                    f"column '{self.schema.continuous[j]}': constant on reference, scaled to zero"
                )
        safe_span = np.where(constant, 1.0, span)
        scaled = (cont - self.mins) / safe_span
        scaled[:, constant] = 0.0
        blocks.append(scaled)
        values = np.hstack(blocks) if blocks else np.zeros((n, 0))
        if ids is None:
            ids = tuple(str(i) for i in range(n))
        return ExpressionMatrix(values, self.feature_names, ids, labels), warnings


def encode_mixed(records: pd.DataFrame, schema: MixedSchema,
                 reference: pd.DataFrame | None = None) -> tuple[ExpressionMatrix, list[str]]:
    """Encode a mixed-type frame using reference statistics (defaults to the frame itself)."""
    encoder = MixedEncoder(schema, records if reference is None else reference)
    return encoder.transform(records)
