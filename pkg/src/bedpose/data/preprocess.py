"""Per-sample preprocessing: alignment, cropping, resizing and normalisation.

All images are float32 (H, W, C) in [0, 1] until ``normalize``. Resampling is
bilinear. Regions are (x0, y0, x1, y1) rectangles in a named pixel frame.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import cv2
import numpy as np

from bedpose.data.layout import AlignmentSpec, ChannelStats, SlpDataset, apply_affine
from bedpose.errors import (
    AlignmentError,
    CompositeError,
    CropError,
    LoadError,
    NormalizationError,
    PairingError,
)
from bedpose.models import Cover, Modality, MultimodalSample, TranslationPair

logger = logging.getLogger(__name__)

BBOX_MARGIN = 0.15
NORM_EPS = 1e-6
PAIR_CROP_SIZE = (100, 256)

Region = tuple[float, float, float, float]


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def region_to_square(region: Region, size: tuple[int, int]) -> np.ndarray:
    """3x3 matrix mapping ``region`` onto a ``size`` (w, h) canvas."""
    x0, y0, x1, y1 = region
    sx = size[0] / (x1 - x0)
    sy = size[1] / (y1 - y0)
    return np.array([[sx, 0.0, -x0 * sx], [0.0, sy, -y0 * sy], [0.0, 0.0, 1.0]])


def warp(image: np.ndarray, matrix: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear affine warp into a (w, h) canvas with a zero border."""
    if np.allclose(matrix[:2], np.eye(3)[:2]) and image.shape[1::-1] == size:
        return image.copy()
    out = cv2.warpAffine(
        image, np.ascontiguousarray(matrix[:2], dtype=np.float64), size,
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    return out[:, :, None] if out.ndim == 2 else out


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (w, h) keeping the channel axis."""
    out = cv2.resize(image, size, interpolation=cv2.INTER_LINEAR)
    return out[:, :, None] if out.ndim == 2 else out


def joint_bbox(joints: np.ndarray, margin: float = BBOX_MARGIN) -> Region:
    """Tight joint box expanded by ``margin`` of its extent on each side."""
    x0, y0 = joints.min(axis=0)
    x1, y1 = joints.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise CropError(f"degenerate joint bounding box {w:.3f} x {h:.3f}")
    return (x0 - margin * w, y0 - margin * h, x1 + margin * w, y1 + margin * h)


def square_region(joints: np.ndarray, margin: float = BBOX_MARGIN) -> Region:
    """Square of side ``(1 + 2 * margin) * L`` centred on the joint box, ``L`` its longer side."""
    x0, y0 = joints.min(axis=0)
    x1, y1 = joints.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise CropError(f"degenerate joint bounding box {w:.3f} x {h:.3f}")
    half = (1.0 + 2.0 * margin) * max(w, h) / 2.0
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    return (cx - half, cy - half, cx + half, cy + half)


# ---------------------------------------------------------------------------
# Alignment and cropping
# ---------------------------------------------------------------------------

def align_and_resize(
    sample: MultimodalSample,
    spec: AlignmentSpec,
    out_size: int = 256,
    *,
    region: Region | None = None,
) -> MultimodalSample:
    """Warp every image into ``region`` of the reference frame, resampled to out_size^2.

    ``region`` defaults to the whole reference image. Joints follow the same map.
    """
    if sample.joint_frame is None:
        raise AlignmentError(
            f"sample {sample.key} is already in the common frame"
        )
    spec.covers(sample.images)
    w, h = spec.reference_size
    region = region or (0.0, 0.0, float(w), float(h))
    to_out = region_to_square(region, (out_size, out_size))

    images = {
        m: warp(image, to_out @ spec.to_reference(m), (out_size, out_size))
        for m, image in sample.images.items()
    }
    joints = apply_affine(to_out @ spec.to_reference(sample.joint_frame), sample.joints)
    return MultimodalSample(
        images=images, joints=joints, cover=sample.cover,
        subject_id=sample.subject_id, pose_id=sample.pose_id,
        joint_frame=None, native_sizes=dict(sample.native_sizes),
    )


def square_crop(
    sample: MultimodalSample, spec: AlignmentSpec, out_size: int = 256,
) -> MultimodalSample:
    """Crop all modalities to the joint-derived square and resize to out_size^2."""
    if sample.joint_frame is None:
        raise CropError(f"sample {sample.key} must be cropped before alignment")
    reference_joints = apply_affine(spec.to_reference(sample.joint_frame), sample.joints)
    region = square_region(reference_joints)
    return align_and_resize(sample, spec, out_size, region=region)


def square_crop_for_depth(
    sample: MultimodalSample, spec: AlignmentSpec, out_size: int = 256,
) -> MultimodalSample:
    """Square crop applied when depth is among the modalities (its corners are noisy)."""
    if Modality.DEPTH not in sample.images:
        raise CropError(f"sample {sample.key} has no depth image to crop for")
    return square_crop(sample, spec, out_size)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def normalize(
    image: np.ndarray, mean: Sequence[float], std: Sequence[float], eps: float = NORM_EPS,
) -> np.ndarray:
    """``(x_c - mean_c) / std_c`` per channel of an (H, W, C) image."""
    mean_arr = np.asarray(mean, dtype=np.float64)
    std_arr = np.asarray(std, dtype=np.float64)
    if mean_arr.shape != (image.shape[-1],) or std_arr.shape != (image.shape[-1],):
        raise NormalizationError(
            f"stats for {mean_arr.size} channels, image has {image.shape[-1]}"
        )
    if np.any(std_arr <= eps):
        raise NormalizationError(f"channel std {std_arr.tolist()} at or below {eps}")
    return ((image - mean_arr) / std_arr).astype(np.float32)


def compute_channel_stats(images: Iterable[np.ndarray]) -> ChannelStats:
    """Per-channel mean and population std over every pixel of ``images``."""
    total = total_sq = None
    count = 0
    for image in images:
        flat = image.reshape(-1, image.shape[-1]).astype(np.float64)
        s, sq = flat.sum(axis=0), (flat**2).sum(axis=0)
        total = s if total is None else total + s
        total_sq = sq if total_sq is None else total_sq + sq
        count += flat.shape[0]
    if total is None or total_sq is None or count == 0:
        raise NormalizationError("no images to compute channel statistics from")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return ChannelStats(tuple(float(v) for v in mean), tuple(float(v) for v in np.sqrt(var)))


# ---------------------------------------------------------------------------
# Pose-model input
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class PoseInput:
    """Network-ready tensors for one frame: normalised (C, S, S) arrays per modality."""

    images: dict[Modality, np.ndarray]
    joints: np.ndarray
    key: str


def prepare_pose_input(
    sample: MultimodalSample,
    spec: AlignmentSpec,
    stats: Mapping[Modality, ChannelStats],
    *,
    out_size: int = 256,
    square: bool = False,
) -> PoseInput:
    """Align (optionally square-crop), resize and normalise one sample."""
    aligned = square_crop(sample, spec, out_size) if square else align_and_resize(
        sample, spec, out_size
    )
    images: dict[Modality, np.ndarray] = {}
    for modality, image in aligned.images.items():
        try:
            s = stats[modality]
        except KeyError:
            raise LoadError(f"no channel statistics for {modality.value}") from None
        images[modality] = np.ascontiguousarray(normalize(image, s.mean, s.std).transpose(2, 0, 1))
    return PoseInput(images=images, joints=aligned.joints, key=sample.key)


# ---------------------------------------------------------------------------
# Translation pairs and compositing
# ---------------------------------------------------------------------------

def crop_for_translation(
    image: np.ndarray,
    to_target: np.ndarray,
    bbox: Region,
    image_size: int = 256,
) -> np.ndarray:
    """Crop ``bbox`` (target frame) to 100x256, then stretch to image_size^2."""
    crop = warp(image, region_to_square(bbox, PAIR_CROP_SIZE) @ to_target, PAIR_CROP_SIZE)
    return resize(crop, (image_size, image_size))


def translation_bbox(
    sample: MultimodalSample, spec: AlignmentSpec, target: Modality,
) -> Region:
    """Joint box (+ margin) in the target modality's pixel frame, clipped to the image."""
    if sample.joint_frame is None:
        raise PairingError(f"sample {sample.key} is already aligned")
    to_target = spec.from_reference(target) @ spec.to_reference(sample.joint_frame)
    x0, y0, x1, y1 = joint_bbox(apply_affine(to_target, sample.joints))
    w, h = sample.native_sizes.get(target, spec.frame_size(target))
    return (max(0.0, x0), max(0.0, y0), min(float(w), x1), min(float(h), y1))


def prepare_translation_pairs(
    dataset: SlpDataset,
    *,
    source: Modality = Modality.LWIR,
    target: Modality = Modality.VISIBLE,
    image_size: int = 256,
) -> list[TranslationPair]:
    """Pair every source image (all covers) with the uncovered target of the same pose."""
    spec = dataset.alignment
    targets: dict[tuple[str, str], tuple[np.ndarray, Region]] = {}
    pairs: list[TranslationPair] = []
    for ref in dataset.refs:
        key = (ref.subject_id, ref.pose_id)
        if key not in targets:
            try:
                uncovered = dataset.load(ref.subject_id, ref.pose_id, Cover.UNCOVERED, (target,))
            except LoadError as exc:
                raise PairingError(
                    f"no uncovered {target.value} image for subject {ref.subject_id} "
                    f"pose {ref.pose_id}: {exc}"
                ) from exc
            bbox = translation_bbox(uncovered, spec, target)
            image = crop_for_translation(uncovered.images[target], np.eye(3), bbox, image_size)
            targets[key] = (image, bbox)
        target_image, bbox = targets[key]
        sample = dataset.load(ref.subject_id, ref.pose_id, ref.cover, (source,))
        to_target = spec.from_reference(target) @ spec.to_reference(source)
        pairs.append(TranslationPair(
            source=crop_for_translation(sample.images[source], to_target, bbox, image_size),
            target=target_image,
            bbox=bbox,
            subject_id=ref.subject_id,
            pose_id=ref.pose_id,
            cover=ref.cover,
            source_modality=source,
            target_modality=target,
        ))
    logger.info("Prepared %d %s->%s translation pairs", len(pairs), source.value, target.value)
    return pairs


def composite_on_white(
    generated: np.ndarray, bbox: Region, canvas_size: tuple[int, int],
) -> np.ndarray:
    """White (w, h) canvas with ``generated`` resized into ``bbox`` (values in [0, 1])."""
    w, h = canvas_size
    x0, y0, x1, y1 = (int(round(v)) for v in bbox)
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h or x1 <= x0 or y1 <= y0:
        raise CompositeError(f"bbox {bbox} does not fit a {w}x{h} canvas")
    channels = generated.shape[2] if generated.ndim == 3 else 1
    canvas = np.ones((h, w, channels), dtype=np.float32)
    canvas[y0:y1, x0:x1] = resize(generated.astype(np.float32), (x1 - x0, y1 - y0))
    return canvas
