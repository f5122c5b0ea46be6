"""Model/training configuration, the ablation variant matrix and YAML I/O."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


FUSION_MODES = ("transformer", "mlp", "none")


@dataclass(frozen=True)
class ModelConfig:
    n_td: int = 4
    n_bu: int = 16
    d_td: int = 32
    grid: tuple[int, int] = (16, 16)
    image_size: int = 64
    d_joint: int = 4
    cnn_channels: tuple[int, int] = (16, 32)
    hidden: int = 64
    shared: int = 32
    feedback: int = 16
    query_width: int = 64
    a2_module: bool = True
    fusion: str = "transformer"
    fusion_encoder: bool = True
    td_feature_norm: bool = True
    joint_residual: bool = True
    peripheral: bool = True
    foveal: bool = True
    consistency: bool = True
    spatial: bool = True
    alpha: float = 0.1
    beta: float = 0.1
    bu_temperature: float = 1.0
    td_temperature: float = 1.0
    sharpness: float = 0.05
    fovea_patch: int = 5
    fovea_size: int = 16
    peripheral_target: str = "next"
    seed: int = 0

    def __post_init__(self):
        validate_model_config(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        return _hash(dataclasses.asdict(self))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 5
    lr: float = 1e-3
    grad_clip: float = 1.0
    checkpoint_epochs: tuple[int, ...] = (10, 100, 500)
    rec_stride: int = 1
    data_dir: str = "data"
    out_dir: str = "runs/default"
    seed: int = 0
    # fraction of the previous joint prediction mixed into the next joint input
    joint_mix: float = 0.0
    joint_mix_warmup: int = 0  # epochs over which joint_mix ramps up from 0
    joint_noise: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.joint_mix <= 1.0 or self.joint_noise < 0 or self.joint_mix_warmup < 0:
            raise ConfigError("joint_mix must be in [0, 1]; joint_noise and joint_mix_warmup >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.rec_stride < 1:
            raise ConfigError("batch_size and rec_stride must be >= 1")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")


def validate_model_config(cfg: ModelConfig) -> None:
    if cfg.n_td < 1 or cfg.n_bu < 1:
        raise ConfigError("n_td and n_bu must be >= 1")
    if cfg.fusion not in FUSION_MODES:
        raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {cfg.fusion!r}")
    if not cfg.a2_module:
        raise ConfigError("every variant is built on the A2 point estimator")
    if cfg.consistency and not cfg.foveal:
        raise ConfigError("the consistency term compares foveal reconstructions; enable foveal")
    if cfg.alpha < 0 or cfg.beta < 0:
        raise ConfigError("alpha and beta must be non-negative")
    if min(cfg.bu_temperature, cfg.td_temperature, cfg.sharpness) <= 0:
        raise ConfigError("temperatures and sharpness must be positive")
    if tuple(g * 4 for g in cfg.grid) != (cfg.image_size, cfg.image_size):
        raise ConfigError("feature grid must be image_size / 4 on each side")
    if cfg.d_td % 4:
        raise ConfigError("d_td must be divisible by 4")
    if cfg.fovea_size != 16 or cfg.fovea_patch != 5:
        raise ConfigError("the foveal decoder maps 5x5 feature windows to 16x16 patches")
    if cfg.peripheral_target not in ("next", "current"):
        raise ConfigError("peripheral_target must be 'next' or 'current'")


# Model variants and their components; columns follow the ablation table.
VARIANT_COLUMNS = ("a2_module", "td_bu_integration", "peripheral", "foveal", "consistency",
                   "td_bu_integration_mlp", "spatial")
VARIANT_MATRIX = {
    "a2rnn":    (True, False, False, False, False, False, False),
    "variant1": (True, True, True, False, False, False, False),
    "variant2": (True, True, True, True, False, False, False),
    "variant3": (True, True, True, True, True, False, False),
    "variant4": (True, False, True, True, True, True, True),
    "proposed": (True, True, True, True, True, False, True),
}
# Column order of the results table.
TABLE_ORDER = ("proposed", "a2rnn", "variant1", "variant2", "variant3", "variant4")
TABLE_HEADERS = {"proposed": "Proposed", "a2rnn": "A2RNN", "variant1": "(1)", "variant2": "(2)",
                 "variant3": "(3)", "variant4": "(4)"}


def _fusion_for(integration: bool, integration_mlp: bool) -> str:
    if integration and integration_mlp:
        raise ConfigError("transformer and MLP integration are mutually exclusive")
    return "transformer" if integration else "mlp" if integration_mlp else "none"


def variant_flags(cfg: ModelConfig) -> dict[str, bool]:
    """Inverse of ``variant_config``: the table row a config corresponds to."""
    return {"a2_module": cfg.a2_module, "td_bu_integration": cfg.fusion == "transformer",
            "peripheral": cfg.peripheral, "foveal": cfg.foveal, "consistency": cfg.consistency,
            "td_bu_integration_mlp": cfg.fusion == "mlp", "spatial": cfg.spatial}


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in VARIANT_MATRIX:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANT_MATRIX)}")
    row = dict(zip(VARIANT_COLUMNS, VARIANT_MATRIX[name]))
    flags = {"a2_module": row["a2_module"],
             "fusion": _fusion_for(row["td_bu_integration"], row["td_bu_integration_mlp"]),
             "peripheral": row["peripheral"], "foveal": row["foveal"],
             "consistency": row["consistency"], "spatial": row["spatial"]}
    flags.update(overrides)
    return ModelConfig(**flags)


# ---------------------------------------------------------------- I/O


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(cls, raw: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    out = {}
    for k, v in raw.items():
        default = known[k].default
        out[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    return out


def config_from_dict(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    """``{"variant": name?, "model": {...}, "train": {...}}``; unknown keys raise."""
    raw = dict(raw or {})
    unknown = set(raw) - {"variant", "model", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    model_kw = _coerce(ModelConfig, raw.get("model") or {}, "model")
    train_kw = _coerce(TrainConfig, raw.get("train") or {}, "train")
    variant = raw.get("variant")
    model = variant_config(variant, **model_kw) if variant else ModelConfig(**model_kw)
    return model, TrainConfig(**train_kw)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return config_from_dict(yaml.safe_load(Path(path).read_text()))


def config_to_dict(model: ModelConfig, train: TrainConfig | None = None) -> dict:
    def plain(obj):
        d = dataclasses.asdict(obj)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    out = {"model": plain(model)}
    if train is not None:
        out["train"] = plain(train)
    return out


def save_config(path, model: ModelConfig, train: TrainConfig | None = None) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(model, train), sort_keys=False))


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**_coerce(ModelConfig, d, "model"))


@dataclass(frozen=True)
class SuiteConfig:
    variants: tuple[str, ...] = TABLE_ORDER
    seeds: tuple[int, ...] = (0, 1, 2)
    slots: tuple[int, ...] = (0, 1, 2)
    rollout_seed: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)  # overrides applied to every variant


def load_suite(path) -> SuiteConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return suite_from_dict(raw)


def suite_from_dict(raw: dict) -> SuiteConfig:
    kw = _coerce(SuiteConfig, raw, "suite")
    if "train" in kw:
        kw["train"] = TrainConfig(**_coerce(TrainConfig, kw["train"] or {}, "suite.train"))
    if "model" in kw:
        kw["model"] = _coerce(ModelConfig, kw["model"] or {}, "suite.model")
    for v in kw.get("variants", ()):
        if v not in VARIANT_MATRIX:
            raise ConfigError(f"unknown variant {v!r}")
    return SuiteConfig(**kw)
