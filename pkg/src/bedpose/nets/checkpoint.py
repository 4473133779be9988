"""Versioned checkpoint container shared by pose, fusion and translation models.

A checkpoint is one ``torch.save`` blob::

    {"header": {"format_version", "kind", "config", "joint_order_version", ...},
     "states": {name: state_dict}}

and is read back with ``torch.load(weights_only=True)``.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
from torch import nn

from bedpose.errors import ConfigError, LoadError
from bedpose.models import JOINT_ORDER_VERSION, Modality
from bedpose.nets.backbone import Backbone, BackboneConfig, build_backbone
from bedpose.nets.fusion import FusedModel, FusionConfig, build_fused_model
from bedpose.nets.pix2pix import PatchDiscriminator, UNetGenerator

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

KIND_BACKBONE = "backbone"
KIND_FUSED = "fused"
KIND_TRANSLATOR = "translator"


@dataclass(slots=True)
class Checkpoint:
    header: dict[str, Any]
    states: dict[str, dict[str, torch.Tensor]]

    @property
    def kind(self) -> str:
        return str(self.header["kind"])

    @property
    def config(self) -> dict[str, Any]:
        return self.header["config"]


def save_checkpoint(
    path: str | os.PathLike[str],
    kind: str,
    config: Mapping[str, Any],
    states: Mapping[str, nn.Module],
    extra: Mapping[str, Any] | None = None,
) -> Path:
    """Write a checkpoint atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "joint_order_version": JOINT_ORDER_VERSION,
        **(extra or {}),
    }
    blob = {
        "header": header,
        "states": {name: module.state_dict() for name, module in states.items()},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)
    logger.info("Saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: str | os.PathLike[str], kind: str | None = None) -> Checkpoint:
    """Read and validate a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise LoadError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "header" not in blob or "states" not in blob:
        raise LoadError(f"{path} is not a bedpose checkpoint")
    header = blob["header"]
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(
            f"{path}: checkpoint format {header.get('format_version')} != {FORMAT_VERSION}"
        )
    if header.get("joint_order_version") != JOINT_ORDER_VERSION:
        raise ConfigError(f"{path}: checkpoint uses a different joint order")
    if kind is not None and header.get("kind") != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, got {header.get('kind')}")
    return Checkpoint(header=header, states=blob["states"])


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------

def save_backbone(
    path: str | os.PathLike[str], backbone: Backbone, extra: Mapping[str, Any] | None = None,
) -> Path:
    config = backbone.config.to_header()
    config["modality"] = backbone.modality.value if backbone.modality else None
    return save_checkpoint(path, KIND_BACKBONE, config, {"backbone": backbone}, extra)


def load_backbone(path: str | os.PathLike[str]) -> Backbone:
    ckpt = load_checkpoint(path, KIND_BACKBONE)
    config = dict(ckpt.config)
    modality = config.pop("modality", None)
    backbone = build_backbone(
        BackboneConfig.from_header(config), Modality.parse(modality) if modality else None,
    )
    backbone.load_state_dict(ckpt.states["backbone"])
    return backbone


# ---------------------------------------------------------------------------
# Fused models
# ---------------------------------------------------------------------------

def save_fused(
    path: str | os.PathLike[str], model: FusedModel, extra: Mapping[str, Any] | None = None,
) -> Path:
    config = {
        "fusion": model.config.to_header(),
        "backbones": {
            m.value: model.extractor(m).config.to_header() for m in model.config.modalities
        },
    }
    return save_checkpoint(path, KIND_FUSED, config, {"model": model}, extra)


def load_fused(path: str | os.PathLike[str]) -> FusedModel:
    ckpt = load_checkpoint(path, KIND_FUSED)
    fusion = FusionConfig.from_header(ckpt.config["fusion"])
    backbones = {
        Modality.parse(name): build_backbone(
            BackboneConfig.from_header(header), Modality.parse(name),
        )
        for name, header in ckpt.config["backbones"].items()
    }
    model = build_fused_model(fusion, backbones)
    model.load_state_dict(ckpt.states["model"])
    return model


# ---------------------------------------------------------------------------
# Translators
# ---------------------------------------------------------------------------

def save_translator(
    path: str | os.PathLike[str],
    generator: UNetGenerator,
    discriminator: PatchDiscriminator,
    config: Mapping[str, Any],
    extra: Mapping[str, Any] | None = None,
) -> Path:
    """``config`` carries ``source``/``target`` modality names, ``ngf``, ``ndf``, ``image_size``."""
    return save_checkpoint(
        path, KIND_TRANSLATOR, config,
        {"generator": generator, "discriminator": discriminator}, extra,
    )


def load_translator(
    path: str | os.PathLike[str],
) -> tuple[UNetGenerator, PatchDiscriminator, dict[str, Any]]:
    ckpt = load_checkpoint(path, KIND_TRANSLATOR)
    cfg = ckpt.config
    source, target = Modality.parse(cfg["source"]), Modality.parse(cfg["target"])
    generator = UNetGenerator(
        source.channels, target.channels, ngf=int(cfg["ngf"]), image_size=int(cfg["image_size"]),
    )
    discriminator = PatchDiscriminator(source.channels, target.channels, ndf=int(cfg["ndf"]))
    generator.load_state_dict(ckpt.states["generator"])
    discriminator.load_state_dict(ckpt.states["discriminator"])
    return generator, discriminator, dict(cfg)
