"""Dataset layout, preprocessing, heatmap targets and the synthetic generator."""

from bedpose.data.heatmaps import make_target_heatmaps
from bedpose.data.layout import (
    AlignmentSpec,
    ChannelStats,
    SlpDataset,
    load_alignment,
    load_slp_layout,
    load_stats,
)
from bedpose.data.preprocess import (
    PoseInput,
    align_and_resize,
    composite_on_white,
    compute_channel_stats,
    crop_for_translation,
    normalize,
    prepare_pose_input,
    prepare_translation_pairs,
    square_crop,
    square_crop_for_depth,
    translation_bbox,
)
from bedpose.data.synthetic import generate_synthetic_dataset

__all__ = [
    "AlignmentSpec",
    "ChannelStats",
    "PoseInput",
    "SlpDataset",
    "align_and_resize",
    "composite_on_white",
    "compute_channel_stats",
    "crop_for_translation",
    "generate_synthetic_dataset",
    "load_alignment",
    "load_slp_layout",
    "load_stats",
    "make_target_heatmaps",
    "normalize",
    "prepare_pose_input",
    "prepare_translation_pairs",
    "square_crop",
    "square_crop_for_depth",
    "translation_bbox",
]
