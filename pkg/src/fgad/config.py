"""Run configuration: strict parsing and validation of TOML/JSON configs.

Every section validates before any compute happens; unknown keys are rejected
with their full path so typos never silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import PreprocessConfig, SyntheticSpec, TargetSpec
from .errors import ConfigError


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{path}]")


def _get(section: dict, key: str, default, path: str, kind=None):
    value = section.get(key, default)
    if kind is not None and value is not None and not isinstance(value, kind):
        if kind is float and isinstance(value, int):
            return float(value)
        raise ConfigError(f"[{path}] {key} must be {getattr(kind, '__name__', kind)}")
    return value


@dataclass(frozen=True)
class ScorerConfig:
    hidden: tuple[int, ...] = (512, 256)
    variant: str = "sign_consistent"
    eta: float = 1e-4
    max_epochs: int = 300
    learning_rate: float = 3e-4
    convergence_delta: float = 0.5
    min_epochs: int = 40
    warmup_epochs: int = 150


@dataclass(frozen=True)
class FusionConfig:
    embed_dim: int = 256
    n_heads: int = 2


@dataclass(frozen=True)
class ClusterConfig:
    k: int | str = "infer"
    nu: float = 1.0
    eigengap_mode: str = "count_above"
    max_iters: int = 200
    learning_rate: float = 3e-4
    change_threshold: float = 0.001
    min_iterations: int = 30


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 256
    encoder_hidden: tuple[int, ...] = (512, 256, 256, 256, 256)
    critic_hidden: tuple[int, ...] = (512, 64, 64, 64)
    memory_size: int = 512
    temperature: float = 1.0
    use_memory: bool = True
    alpha: float = 50.0
    beta: float = 1.0
    lambda_gp: float = 10.0
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)


@dataclass(frozen=True)
class PhaseSchedule:
    epochs: int = 100
    batch_size: int = 256
    critic_steps: int = 1
    learning_rate: float = 3e-4
    pool_size: int = 2048


@dataclass(frozen=True)
class ThresholdConfig:
    rule: str = "oracle_count"
    value: float = 0.0

    def __post_init__(self):
        if self.rule not in ("count", "quantile", "absolute", "oracle_count"):
            raise ConfigError(f"unknown threshold rule '{self.rule}'")


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    synthetic: SyntheticSpec | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("[data] needs exactly one of 'manifest' or 'synthetic'")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str | None
    data: DataConfig
    model: ModelConfig
    phase1: PhaseSchedule
    phase2: PhaseSchedule
    threshold: ThresholdConfig
    raw: dict = field(default_factory=dict, compare=False)


def _parse_synthetic(section: dict, run_seed: int, path: str) -> SyntheticSpec:
    allowed = {
        "n_features", "n_normal_types", "n_anomaly_subtypes", "n_domains",
        "content_separation", "domain_shift_magnitude", "noise_sigma",
        "reference_size", "targets", "seed",
    }
    _check_keys(section, allowed, path)
    targets = []
    for i, t in enumerate(section.get("targets", [])):
        _check_keys(t, {"size", "anomaly_ratio", "anomaly_subtypes"}, f"{path}.targets[{i}]")
        targets.append(
            TargetSpec(
                size=int(t["size"]),
                anomaly_ratio=float(t.get("anomaly_ratio", 0.0)),
                anomaly_subtypes=tuple(t["anomaly_subtypes"]) if "anomaly_subtypes" in t else None,
            )
        )
    try:
        return SyntheticSpec(
            n_features=int(section["n_features"]),
            n_normal_types=int(section["n_normal_types"]),
            n_anomaly_subtypes=int(section["n_anomaly_subtypes"]),
            n_domains=int(section["n_domains"]),
            content_separation=float(section["content_separation"]),
            domain_shift_magnitude=float(section["domain_shift_magnitude"]),
            noise_sigma=float(section["noise_sigma"]),
            reference_size=int(section["reference_size"]),
            targets=tuple(targets),
            seed=int(section.get("seed", run_seed)),
        )
    except KeyError as err:
        raise ConfigError(f"[{path}] missing required key {err}") from err


def _parse_data(section: dict, run_seed: int) -> DataConfig:
    _check_keys(section, {"manifest", "synthetic", "preprocess"}, "data")
    pre = section.get("preprocess", {})
    _check_keys(pre, {"total_scale", "log1p", "top_k_features"}, "data.preprocess")
    preprocess = PreprocessConfig(
        total_scale=bool(pre.get("total_scale", False)),
        log1p=bool(pre.get("log1p", False)),
        top_k_features=pre.get("top_k_features"),
    )
    synthetic = None
    if "synthetic" in section:
        synthetic = _parse_synthetic(section["synthetic"], run_seed, "data.synthetic")
    return DataConfig(section.get("manifest"), synthetic, preprocess)


def _parse_model(section: dict) -> ModelConfig:
    allowed = {
        "latent_dim", "encoder_hidden", "critic_hidden", "memory_size", "temperature",
        "use_memory", "alpha", "beta", "lambda_gp", "scorer", "fusion", "cluster",
    }
    _check_keys(section, allowed, "model")
    sc = section.get("scorer", {})
    _check_keys(sc, {"hidden", "variant", "eta", "max_epochs", "learning_rate",
                     "convergence_delta", "min_epochs", "warmup_epochs"}, "model.scorer")
    fu = section.get("fusion", {})
    _check_keys(fu, {"embed_dim", "n_heads"}, "model.fusion")
    cl = section.get("cluster", {})
    _check_keys(cl, {"k", "nu", "eigengap_mode", "max_iters", "learning_rate",
                     "change_threshold", "min_iterations"}, "model.cluster")
    k = cl.get("k", "infer")
    if not (k == "infer" or isinstance(k, int)):
        raise ConfigError("[model.cluster] k must be an integer or 'infer'")
    defaults = ModelConfig()
    return ModelConfig(
        latent_dim=_get(section, "latent_dim", defaults.latent_dim, "model", int),
        encoder_hidden=tuple(section.get("encoder_hidden", defaults.encoder_hidden)),
        critic_hidden=tuple(section.get("critic_hidden", defaults.critic_hidden)),
        memory_size=_get(section, "memory_size", defaults.memory_size, "model", int),
        temperature=_get(section, "temperature", defaults.temperature, "model", float),
        use_memory=bool(section.get("use_memory", True)),
        alpha=_get(section, "alpha", defaults.alpha, "model", float),
        beta=_get(section, "beta", defaults.beta, "model", float),
        lambda_gp=_get(section, "lambda_gp", defaults.lambda_gp, "model", float),
        scorer=ScorerConfig(
            hidden=tuple(sc.get("hidden", (512, 256))),
            variant=_get(sc, "variant", "sign_consistent", "model.scorer", str),
            eta=_get(sc, "eta", 1e-4, "model.scorer", float),
            max_epochs=_get(sc, "max_epochs", 300, "model.scorer", int),
            learning_rate=_get(sc, "learning_rate", 3e-4, "model.scorer", float),
            convergence_delta=_get(sc, "convergence_delta", 0.5, "model.scorer", float),
            min_epochs=_get(sc, "min_epochs", 40, "model.scorer", int),
            warmup_epochs=_get(sc, "warmup_epochs", 150, "model.scorer", int),
        ),
        fusion=FusionConfig(
            embed_dim=_get(fu, "embed_dim", 256, "model.fusion", int),
            n_heads=_get(fu, "n_heads", 2, "model.fusion", int),
        ),
        cluster=ClusterConfig(
            k=k,
            nu=_get(cl, "nu", 1.0, "model.cluster", float),
            eigengap_mode=_get(cl, "eigengap_mode", "count_above", "model.cluster", str),
            max_iters=_get(cl, "max_iters", 200, "model.cluster", int),
            learning_rate=_get(cl, "learning_rate", 3e-4, "model.cluster", float),
            change_threshold=_get(cl, "change_threshold", 0.001, "model.cluster", float),
            min_iterations=_get(cl, "min_iterations", 30, "model.cluster", int),
        ),
    )


def _parse_phase(section: dict, path: str) -> PhaseSchedule:
    _check_keys(section, {"epochs", "batch_size", "critic_steps", "learning_rate",
                          "pool_size"}, path)
    d = PhaseSchedule()
    return PhaseSchedule(
        epochs=_get(section, "epochs", d.epochs, path, int),
        batch_size=_get(section, "batch_size", d.batch_size, path, int),
        critic_steps=_get(section, "critic_steps", d.critic_steps, path, int),
        learning_rate=_get(section, "learning_rate", d.learning_rate, path, float),
        pool_size=_get(section, "pool_size", d.pool_size, path, int),
    )


def parse_config(doc: dict) -> RunConfig:
    """Validate a parsed config mapping into a RunConfig; rejects unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(doc, {"seed", "out_dir", "data", "model", "train", "threshold"}, "root")
    seed = _get(doc, "seed", 0, "root", int)
    if "data" not in doc:
        raise ConfigError("config requires a [data] section")
    train = doc.get("train", {})
    _check_keys(train, {"phase1", "phase2"}, "train")
    thr = doc.get("threshold", {})
    _check_keys(thr, {"rule", "value"}, "threshold")
    return RunConfig(
        seed=seed,
        out_dir=_get(doc, "out_dir", None, "root", str),
        data=_parse_data(doc["data"], seed),
        model=_parse_model(doc.get("model", {})),
        phase1=_parse_phase(train.get("phase1", {}), "train.phase1"),
        phase2=_parse_phase(train.get("phase2", {}), "train.phase2"),
        threshold=ThresholdConfig(
            rule=_get(thr, "rule", "oracle_count", "threshold", str),
            value=_get(thr, "value", 0.0, "threshold", float),
        ),
        raw=doc,
    )


def load_config(path: str | Path) -> RunConfig:
    """Load TOML (default) or JSON config from disk."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            doc = json.loads(text)
        else:
            doc = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    return parse_config(doc)


def _canonical(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def config_digest(cfg: RunConfig) -> str:
    """Stable content hash of the raw config plus the effective seed."""
    payload = json.dumps(
        {"seed": cfg.seed, "config": _canonical(cfg.raw)}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
