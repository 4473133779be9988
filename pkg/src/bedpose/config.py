"""Experiment configuration loaded from a YAML document of namespaced keys.

Keys may be written flat (``train.epochs: 10``) or nested (``train: {epochs: 10}``);
both flatten to the same dotted names.
"""

from __future__ import annotations

import os
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from bedpose.errors import ConfigError
from bedpose.models import Cover, Modality
from bedpose.nets.backbone import BackboneConfig
from bedpose.nets.fusion import FusionConfig, FusionStrategy, FusionType
from bedpose.reconstruction import GanObjectiveConfig

# ---------------------------------------------------------------------------
# Typed readers
# ---------------------------------------------------------------------------

def _int_key(data: Mapping[str, Any], name: str, default: int) -> int:
    raw = data.get(name, default)
    if isinstance(raw, bool):
        raise ConfigError(f"{name} must be an integer, got {raw!r}")
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None


def _float_key(data: Mapping[str, Any], name: str, default: float) -> float:
    raw = data.get(name, default)
    if isinstance(raw, bool):
        raise ConfigError(f"{name} must be a number, got {raw!r}")
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {raw!r}") from None


def _str_key(data: Mapping[str, Any], name: str, default: str) -> str:
    raw = data.get(name, default)
    if raw is None:
        return ""
    if not isinstance(raw, (str, int, float)) or isinstance(raw, bool):
        raise ConfigError(f"{name} must be a string, got {raw!r}")
    return str(raw)


def _bool_key(data: Mapping[str, Any], name: str, default: bool) -> bool:
    raw = data.get(name, default)
    if not isinstance(raw, bool):
        raise ConfigError(f"{name} must be true or false, got {raw!r}")
    return raw


def _list_key(data: Mapping[str, Any], name: str, default: tuple[Any, ...]) -> tuple[Any, ...]:
    raw = data.get(name, default)
    if isinstance(raw, str):
        raw = [part.strip() for part in raw.split(",") if part.strip()]
    if not isinstance(raw, (list, tuple)):
        raise ConfigError(f"{name} must be a list, got {raw!r}")
    return tuple(raw)


def _modalities_key(
    data: Mapping[str, Any], name: str, default: tuple[Modality, ...],
) -> tuple[Modality, ...]:
    return tuple(Modality.parse(v) for v in _list_key(data, name, default))


def _flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        # Only the section level nests; fusion.checkpoints is itself a mapping.
        if isinstance(value, Mapping) and not prefix and name != "fusion.checkpoints":
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class DatasetSettings:
    root: str = ""
    modalities: tuple[Modality, ...] = (Modality.LWIR,)
    covers: tuple[Cover, ...] = tuple(Cover)
    eval_root: str = ""
    square_crop: bool = False
    sigma: float = 2.0
    max_samples: int = 0


@dataclass(frozen=True, slots=True)
class BackboneSettings:
    preset: str = "w32"
    input_size: int = 256

    def build(self, modality: Modality) -> BackboneConfig:
        return BackboneConfig.preset(
            self.preset, input_channels=modality.channels, input_size=self.input_size,
        )


@dataclass(frozen=True, slots=True)
class FusionSettings:
    stage: int = 3
    fusion_type: FusionType = FusionType.CONCATENATION
    strategy: FusionStrategy = FusionStrategy.END_TO_END
    modalities: tuple[Modality, ...] = ()
    primary: Modality | None = None
    dropout_p: float = 0.2
    checkpoints: tuple[tuple[Modality, str], ...] = ()
    pairs: tuple[tuple[Modality, ...], ...] = ()

    def groups(self) -> list[tuple[Modality, ...]]:
        """Modality sets to train, one fused model each."""
        if self.pairs:
            return list(self.pairs)
        if self.modalities:
            return [self.modalities]
        raise ConfigError("fusion.modalities or fusion.pairs is required for fusion training")

    def build(self, modalities: tuple[Modality, ...]) -> FusionConfig:
        primary = self.primary if self.primary in modalities else modalities[0]
        return FusionConfig(
            stage=self.stage,
            fusion_type=self.fusion_type,
            strategy=self.strategy,
            modalities=modalities,
            primary=primary,
            dropout_p=self.dropout_p,
        )

    def checkpoint_for(self, modality: Modality) -> str | None:
        return dict(self.checkpoints).get(modality)


@dataclass(frozen=True, slots=True)
class TrainSettings:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (70, 90)
    lr_gamma: float = 0.1
    max_steps: int = 0
    device: str = "cpu"


@dataclass(frozen=True, slots=True)
class EvalSettings:
    checkpoint: str = ""
    split: str = "test"
    gan_checkpoint: str = ""
    fusion_checkpoint: str = ""
    overlays: int = 0
    total: str = "joints"
    threshold: float = 0.5


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

_KNOWN_KEYS = frozenset({
    "seed", "out",
    "dataset.root", "dataset.modalities", "dataset.covers", "dataset.eval_root",
    "dataset.square_crop", "dataset.sigma", "dataset.max_samples",
    "backbone.preset", "backbone.input_size",
    "fusion.stage", "fusion.type", "fusion.strategy", "fusion.modalities", "fusion.primary",
    "fusion.dropout_p", "fusion.checkpoints", "fusion.pairs",
    "gan.lambda_l1", "gan.noise_mode", "gan.epochs_total", "gan.lr_base",
    "gan.lr_constant_epochs", "gan.batch_size", "gan.beta1", "gan.beta2", "gan.ngf", "gan.ndf",
    "gan.image_size", "gan.source", "gan.target",
    "train.epochs", "train.batch_size", "train.lr", "train.lr_milestones", "train.lr_gamma",
    "train.max_steps", "train.device",
    "eval.checkpoint", "eval.split", "eval.gan_checkpoint", "eval.fusion_checkpoint",
    "eval.overlays", "eval.total", "eval.threshold",
})


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    """Immutable, validated experiment settings."""

    seed: int
    out: str = "runs/latest"
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    gan: GanObjectiveConfig = field(default_factory=GanObjectiveConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    log_level: str = "INFO"

    # -----------------------------------------------------------------
    @classmethod
    def from_file(cls, path: str | os.PathLike[str], **overrides: Any) -> ExperimentConfig:
        """Parse a YAML config; ``overrides`` are flat keys applied on top."""
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path} must contain a mapping of keys")
        flat = _flatten(data)
        flat.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(flat)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> ExperimentConfig:
        """Build from flat (or section-nested) keys with early validation."""
        flat = _flatten(data)
        unknown = sorted(set(flat) - _KNOWN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if flat.get("seed") is None:
            raise ConfigError("seed is required")

        dataset = DatasetSettings(
            root=_str_key(flat, "dataset.root", ""),
            modalities=_modalities_key(flat, "dataset.modalities", (Modality.LWIR,)),
            covers=tuple(Cover.parse(c) for c in _list_key(flat, "dataset.covers", tuple(Cover))),
            eval_root=_str_key(flat, "dataset.eval_root", ""),
            square_crop=_bool_key(flat, "dataset.square_crop", False),
            sigma=_float_key(flat, "dataset.sigma", 2.0),
            max_samples=_int_key(flat, "dataset.max_samples", 0),
        )
        if not dataset.modalities:
            raise ConfigError("dataset.modalities must name at least one modality")

        backbone = BackboneSettings(
            preset=_str_key(flat, "backbone.preset", "w32"),
            input_size=_int_key(flat, "backbone.input_size", 256),
        )
        backbone.build(dataset.modalities[0])

        fusion = _fusion_settings(flat)
        gan = _gan_settings(flat)

        train = TrainSettings(
            epochs=_int_key(flat, "train.epochs", 100),
            batch_size=_int_key(flat, "train.batch_size", 64),
            lr=_float_key(flat, "train.lr", 1e-3),
            lr_milestones=tuple(
                int(v) for v in _list_key(flat, "train.lr_milestones", (70, 90))
            ),
            lr_gamma=_float_key(flat, "train.lr_gamma", 0.1),
            max_steps=_int_key(flat, "train.max_steps", 0),
            device=_str_key(flat, "train.device", "cpu"),
        )
        if train.epochs < 1 or train.batch_size < 1 or train.lr <= 0 or train.max_steps < 0:
            raise ConfigError("train.epochs, train.batch_size and train.lr must be positive")

        evaluation = EvalSettings(
            checkpoint=_str_key(flat, "eval.checkpoint", ""),
            split=_str_key(flat, "eval.split", "test"),
            gan_checkpoint=_str_key(flat, "eval.gan_checkpoint", ""),
            fusion_checkpoint=_str_key(flat, "eval.fusion_checkpoint", ""),
            overlays=_int_key(flat, "eval.overlays", 0),
            total=_str_key(flat, "eval.total", "joints"),
            threshold=_float_key(flat, "eval.threshold", 0.5),
        )
        if evaluation.split not in ("train", "fit", "val", "test", "all"):
            raise ConfigError(
                f"eval.split must be train, fit, val, test or all, got {evaluation.split!r}"
            )
        if evaluation.total not in ("joints", "instances"):
            raise ConfigError(f"eval.total must be joints or instances, got {evaluation.total!r}")

        return cls(
            seed=_int_key(flat, "seed", 0),
            out=_str_key(flat, "out", "runs/latest"),
            dataset=dataset,
            backbone=backbone,
            fusion=fusion,
            gan=gan,
            train=train,
            eval=evaluation,
            log_level=os.getenv("LOG_LEVEL", "INFO"),
        )

    def with_overrides(
        self, *, seed: int | None = None, out: str | None = None,
    ) -> ExperimentConfig:
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if out is not None:
            changes["out"] = out
        return replace(self, **changes) if changes else self

    def require_root(self) -> Path:
        if not self.dataset.root:
            raise ConfigError("dataset.root is required")
        return Path(self.dataset.root)

    def snapshot(self) -> dict[str, Any]:
        """Resolved config as flat JSON-ready keys."""
        out: dict[str, Any] = {"seed": self.seed, "out": self.out}
        for section in ("dataset", "backbone", "fusion", "gan", "train", "eval"):
            obj = getattr(self, section)
            for f in fields(obj):
                key = "type" if f.name == "fusion_type" else f.name
                value = getattr(obj, f.name)
                if f.name == "checkpoints":
                    out[f"{section}.{key}"] = {m.value: p for m, p in value}
                else:
                    out[f"{section}.{key}"] = _jsonable(value)
        return out


def _jsonable(value: Any) -> Any:
    if isinstance(value, (Modality, Cover, FusionType, FusionStrategy)):
        return value.value
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _fusion_settings(flat: Mapping[str, Any]) -> FusionSettings:
    try:
        fusion_type = FusionType(_str_key(flat, "fusion.type", "concatenation"))
    except ValueError:
        raise ConfigError(f"fusion.type must be addition or concatenation, "
                          f"got {flat.get('fusion.type')!r}") from None
    try:
        strategy = FusionStrategy(_str_key(flat, "fusion.strategy", "end_to_end"))
    except ValueError:
        raise ConfigError(f"fusion.strategy must be frozen_plain, frozen_weighted or end_to_end, "
                          f"got {flat.get('fusion.strategy')!r}") from None

    modalities = _modalities_key(flat, "fusion.modalities", ())
    raw_pairs = flat.get("fusion.pairs", ())
    if not isinstance(raw_pairs, (list, tuple)):
        raise ConfigError(f"fusion.pairs must be a list of modality lists, got {raw_pairs!r}")
    pairs = tuple(_modalities_key({"p": p}, "p", ()) for p in raw_pairs)

    raw_ckpts = flat.get("fusion.checkpoints", {}) or {}
    if not isinstance(raw_ckpts, Mapping):
        raise ConfigError(f"fusion.checkpoints must map modality to path, got {raw_ckpts!r}")
    checkpoints = tuple((Modality.parse(k), str(v)) for k, v in raw_ckpts.items())

    primary_raw = _str_key(flat, "fusion.primary", "")
    settings = FusionSettings(
        stage=_int_key(flat, "fusion.stage", 3),
        fusion_type=fusion_type,
        strategy=strategy,
        modalities=modalities,
        primary=Modality.parse(primary_raw) if primary_raw else None,
        dropout_p=_float_key(flat, "fusion.dropout_p", 0.2),
        checkpoints=checkpoints,
        pairs=pairs,
    )
    for group in (modalities,) * bool(modalities) + pairs:
        settings.build(group)
    if not modalities and not pairs:
        # Scalar knobs are checked even without a fusion group.
        FusionConfig(settings.stage, fusion_type, strategy, (Modality.LWIR, Modality.DEPTH),
                     Modality.LWIR, settings.dropout_p)
    return settings


def _gan_settings(flat: Mapping[str, Any]) -> GanObjectiveConfig:
    d = GanObjectiveConfig.__dataclass_fields__
    return GanObjectiveConfig(
        lambda_l1=_float_key(flat, "gan.lambda_l1", d["lambda_l1"].default),
        noise_mode=_str_key(flat, "gan.noise_mode", d["noise_mode"].default),
        epochs_total=_int_key(flat, "gan.epochs_total", d["epochs_total"].default),
        lr_base=_float_key(flat, "gan.lr_base", d["lr_base"].default),
        lr_constant_epochs=_int_key(
            flat, "gan.lr_constant_epochs", d["lr_constant_epochs"].default,
        ),
        batch_size=_int_key(flat, "gan.batch_size", d["batch_size"].default),
        beta1=_float_key(flat, "gan.beta1", d["beta1"].default),
        beta2=_float_key(flat, "gan.beta2", d["beta2"].default),
        ngf=_int_key(flat, "gan.ngf", d["ngf"].default),
        ndf=_int_key(flat, "gan.ndf", d["ndf"].default),
        image_size=_int_key(flat, "gan.image_size", d["image_size"].default),
        source=Modality.parse(_str_key(flat, "gan.source", "lwir")),
        target=Modality.parse(_str_key(flat, "gan.target", "visible")),
    )
