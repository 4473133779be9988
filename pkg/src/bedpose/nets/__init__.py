"""Pose backbone, fusion, translation networks and their checkpoint container."""

from bedpose.nets.backbone import Backbone, BackboneConfig, BranchFeatureSet, build_backbone
from bedpose.nets.checkpoint import (
    load_backbone,
    load_checkpoint,
    load_fused,
    load_translator,
    save_backbone,
    save_fused,
    save_translator,
)
from bedpose.nets.fusion import (
    FusedModel,
    FusionConfig,
    FusionReducer,
    FusionStrategy,
    FusionType,
    ModalWeights,
    apply_modal_weights,
    build_fused_model,
    fuse_add,
    fuse_concat,
    init_modal_weights,
    spatial_dropout,
)
from bedpose.nets.pix2pix import PatchDiscriminator, UNetGenerator

__all__ = [
    "Backbone",
    "BackboneConfig",
    "BranchFeatureSet",
    "FusedModel",
    "FusionConfig",
    "FusionReducer",
    "FusionStrategy",
    "FusionType",
    "ModalWeights",
    "PatchDiscriminator",
    "UNetGenerator",
    "apply_modal_weights",
    "build_backbone",
    "build_fused_model",
    "fuse_add",
    "fuse_concat",
    "init_modal_weights",
    "load_backbone",
    "load_checkpoint",
    "load_fused",
    "load_translator",
    "save_backbone",
    "save_fused",
    "save_translator",
    "spatial_dropout",
]
