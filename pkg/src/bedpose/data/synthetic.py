"""Synthetic multimodal in-bed dataset written in the on-disk layout.

Each pose is one articulated 14-joint skeleton lying on a bed, drawn in the
visible frame and projected into every other modality through a fixed
per-dataset affine. Renderings:

* visible   limb capsules on a bed texture; covers blend a sheet/blanket over the body
* lwir      blurred limb heat plus optional residual-heat blobs
* depth     16-bit distance to the bed with the body raised and noisy corners
* pressure  contact-weighted blobs, identical across covers
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from bedpose.data.layout import (
    JOINTS_FILE,
    AlignmentSpec,
    image_path,
    read_image,
    save_alignment,
    save_stats,
    write_image,
    write_joints_file,
)
from bedpose.data.preprocess import compute_channel_stats
from bedpose.errors import ConfigError
from bedpose.models import LIMB_EDGES, NUM_JOINTS, Cover, DatasetSplit, Modality

logger = logging.getLogger(__name__)

# Unit-body joint offsets (x right, y towards the feet), thorax at the origin.
_SHOULDER = (0.10, 0.02)
_HIP = (0.07, 0.33)
_NECK = 0.11
_UPPER_ARM, _FOREARM = 0.16, 0.15
_THIGH, _SHIN = 0.22, 0.21
_BODY_SCALE = 0.85

_COVER_ALPHA = {Cover.UNCOVERED: 0.0, Cover.COVER1: 0.55, Cover.COVER2: 0.9}
_COVER_HEAT = {Cover.UNCOVERED: 1.0, Cover.COVER1: 0.85, Cover.COVER2: 0.7}

_BED_DEPTH_MM = 2100.0
_BODY_HEIGHT_MM = 220.0


@dataclass(frozen=True, slots=True)
class SyntheticSpec:
    """Dataset shape; ``scale`` shrinks every native resolution."""

    n_subjects: int
    poses_per_subject: int
    seed: int
    modalities: tuple[Modality, ...] = tuple(Modality)
    covers: tuple[Cover, ...] = tuple(Cover)
    scale: float = 1.0
    visible_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.n_subjects < 1 or self.poses_per_subject < 1:
            raise ConfigError("synthetic dataset needs at least one subject and one pose")
        if not self.modalities:
            raise ConfigError("synthetic dataset needs at least one modality")
        if not 0.0 < self.scale <= 1.0:
            raise ConfigError(f"scale must be in (0, 1], got {self.scale}")

    def size(self, modality: Modality) -> tuple[int, int]:
        w, h = (
            self.visible_size
            if modality is Modality.VISIBLE and self.visible_size
            else modality.native_size
        )
        return max(16, round(w * self.scale)), max(16, round(h * self.scale))

    @property
    def reference(self) -> Modality:
        """Highest-resolution modality present."""
        return max(self.modalities, key=lambda m: self.size(m)[0] * self.size(m)[1])


# ---------------------------------------------------------------------------
# Skeletons
# ---------------------------------------------------------------------------

def _rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _limb(start: np.ndarray, length: float, angle: float) -> np.ndarray:
    """Point ``length`` away from ``start`` along +y rotated by ``angle``."""
    return start + _rot(angle) @ np.array([0.0, length])


def sample_lying_skeleton(
    rng: np.random.Generator, size: tuple[int, int], margin: float = 0.04,
) -> np.ndarray:
    """14 joints of a supine body in a (w, h) portrait frame, all inside the margin."""
    w, h = size
    for _ in range(100):
        joints = np.zeros((NUM_JOINTS, 2))
        joints[12] = (0.0, 0.0)
        joints[13] = (rng.normal(0.0, 0.01), -_NECK)
        r_sh = np.array([-_SHOULDER[0], _SHOULDER[1]])
        l_sh = np.array([_SHOULDER[0], _SHOULDER[1]])
        r_hip = np.array([-_HIP[0], _HIP[1]])
        l_hip = np.array([_HIP[0], _HIP[1]])
        joints[8], joints[9] = r_sh, l_sh
        joints[2], joints[3] = r_hip, l_hip

        # Arms: abduction away from the torso, elbow bend.
        for shoulder, elbow, wrist, side in ((8, 7, 6, 1.0), (9, 10, 11, -1.0)):
            abduct = side * math.radians(rng.uniform(-5.0, 35.0))
            bend = math.radians(rng.uniform(-40.0, 40.0))
            joints[elbow] = _limb(joints[shoulder], _UPPER_ARM, abduct)
            joints[wrist] = _limb(joints[elbow], _FOREARM, abduct + bend)
        for hip, knee, ankle, side in ((2, 1, 0, 1.0), (3, 4, 5, -1.0)):
            spread = side * math.radians(rng.uniform(-3.0, 15.0))
            bend = math.radians(rng.uniform(-10.0, 10.0))
            joints[knee] = _limb(joints[hip], _THIGH, spread)
            joints[ankle] = _limb(joints[knee], _SHIN, spread + bend)

        body = joints @ _rot(math.radians(rng.normal(0.0, 6.0))).T
        scale = _BODY_SCALE * h * rng.uniform(0.92, 1.0)
        centre = np.array([
            w / 2 + rng.normal(0.0, 0.03 * w),
            h * 0.12 + _NECK * scale + rng.normal(0.0, 0.02 * h),
        ])
        pixels = body * scale + centre
        lo = np.array([margin * w, margin * h])
        hi = np.array([(1 - margin) * w, (1 - margin) * h])
        if np.all(pixels >= lo) and np.all(pixels < hi):
            return pixels
    raise ConfigError(f"cannot fit a skeleton into a {w}x{h} frame")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _pt(p: np.ndarray) -> tuple[int, int]:
    return int(p[0]), int(p[1])


def _limb_mask(joints: np.ndarray, size: tuple[int, int], thickness: float) -> np.ndarray:
    """Float mask of limb capsules plus a torso polygon and head disc."""
    w, h = size
    mask = np.zeros((h, w), dtype=np.float32)
    t = max(1, int(round(thickness)))
    pts = np.round(joints).astype(np.int32)
    torso = pts[[8, 9, 3, 2]]
    cv2.fillConvexPoly(mask, torso, 1.0)
    for a, b in LIMB_EDGES:
        cv2.line(mask, _pt(pts[a]), _pt(pts[b]), 1.0, t, lineType=cv2.LINE_AA)
    cv2.circle(mask, _pt(pts[13]), max(1, int(round(thickness * 1.3))), 1.0, -1, cv2.LINE_AA)
    return mask


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return cv2.GaussianBlur(image, (0, 0), sigmaX=max(sigma, 0.3))


def _cover_region(joints: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Blanket mask from the shoulders down over the bed width."""
    w, h = size
    mask = np.zeros((h, w), dtype=np.float32)
    top = int(max(0, min(joints[8, 1], joints[9, 1])))
    mask[top:, int(0.1 * w): int(0.9 * w)] = 1.0
    return _blur(mask, 0.01 * w)


def render_visible(
    joints: np.ndarray, size: tuple[int, int], cover: Cover, rng: np.random.Generator,
    texture: np.ndarray,
) -> np.ndarray:
    w, _ = size
    body = _limb_mask(joints, size, 0.045 * w)
    skin = np.array([0.87, 0.68, 0.55], dtype=np.float32)
    image = texture * (1.0 - body[:, :, None]) + skin * body[:, :, None]
    alpha = _COVER_ALPHA[cover]
    if alpha:
        sheet = np.array([0.55, 0.65, 0.85], dtype=np.float32)
        blend = alpha * _cover_region(joints, size)[:, :, None]
        image = image * (1.0 - blend) + sheet * blend
    noise = rng.normal(0.0, 0.01, image.shape).astype(np.float32)
    return np.clip(image + noise, 0.0, 1.0)


def bed_texture(size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    w, h = size
    base = np.array([0.93, 0.92, 0.88], dtype=np.float32)
    stripes = 0.03 * np.sin(np.arange(w, dtype=np.float32) * (2 * np.pi / max(8, w // 12)))
    tex = np.broadcast_to(base, (h, w, 3)) - stripes[None, :, None]
    grain = _blur(rng.normal(0.0, 0.02, (h, w)).astype(np.float32), 1.0)
    return np.clip(tex + grain[:, :, None], 0.0, 1.0).astype(np.float32)


def render_lwir(
    joints: np.ndarray, size: tuple[int, int], cover: Cover, rng: np.random.Generator,
    residual: Sequence[tuple[float, float, float]],
) -> np.ndarray:
    w, _ = size
    heat = _limb_mask(joints, size, 0.06 * w)
    for x, y, r in residual:
        blob = np.zeros_like(heat)
        cv2.circle(blob, (int(x), int(y)), max(1, int(r)), 0.5, -1)
        heat = np.maximum(heat, blob)
    heat = _blur(heat, 0.02 * w * (1.0 + (1.0 - _COVER_HEAT[cover]) * 2.0))
    image = 0.2 + 0.75 * _COVER_HEAT[cover] * heat
    image += rng.normal(0.0, 0.01, image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0)[:, :, None]


def render_depth(
    joints: np.ndarray, size: tuple[int, int], cover: Cover, rng: np.random.Generator,
) -> np.ndarray:
    """Distance in millimetres (uint16 range)."""
    w, h = size
    elevation = _blur(_limb_mask(joints, size, 0.06 * w), 0.015 * w)
    if cover is not Cover.UNCOVERED:
        level = 0.35 if cover is Cover.COVER1 else 0.5
        elevation = np.maximum(elevation, level * _cover_region(joints, size))
    depth = _BED_DEPTH_MM - _BODY_HEIGHT_MM * elevation
    depth += rng.normal(0.0, 2.0, depth.shape)
    corner = max(2, int(0.12 * min(w, h)))
    for ys in (slice(0, corner), slice(h - corner, h)):
        for xs in (slice(0, corner), slice(w - corner, w)):
            patch = depth[ys, xs]
            depth[ys, xs] = rng.uniform(0.0, 4000.0, patch.shape)
    return np.clip(depth, 0.0, 65535.0)[:, :, None]


def render_pressure(joints: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    w, _ = size
    contact = 0.35 * _limb_mask(joints, size, 0.05 * w)
    weights = {2: 1.0, 3: 1.0, 12: 0.9, 8: 0.6, 9: 0.6, 13: 0.7, 0: 0.5, 5: 0.5, 6: 0.3, 11: 0.3}
    pts = np.round(joints).astype(np.int32)
    for j, weight in weights.items():
        blob = np.zeros_like(contact)
        cv2.circle(blob, _pt(pts[j]), max(1, int(0.06 * w)), weight, -1)
        contact = np.maximum(contact, blob)
    return np.clip(_blur(contact, 0.03 * w), 0.0, 1.0)[:, :, None]


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_affines(
    spec: SyntheticSpec, rng: np.random.Generator,
) -> dict[Modality, np.ndarray]:
    """Per-modality 3x3 maps from reference pixels into modality pixels."""
    ref_w, ref_h = spec.size(spec.reference)
    affines: dict[Modality, np.ndarray] = {}
    for modality in spec.modalities:
        if modality is spec.reference:
            affines[modality] = np.eye(3)
            continue
        w, h = spec.size(modality)
        k = rng.uniform(0.93, 0.98)
        dx = rng.uniform(-0.3, 0.3) * (1 - k) * w
        dy = rng.uniform(-0.3, 0.3) * (1 - k) * h
        affines[modality] = np.array([
            [k * w / ref_w, 0.0, (1 - k) * w / 2 + dx],
            [0.0, k * h / ref_h, (1 - k) * h / 2 + dy],
            [0.0, 0.0, 1.0],
        ])
    return affines


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def generate_synthetic_dataset(
    out: str | os.PathLike[str],
    n_subjects: int,
    poses_per_subject: int,
    seed: int,
    *,
    modalities: Iterable[Modality] = tuple(Modality),
    covers: Iterable[Cover] = tuple(Cover),
    scale: float = 1.0,
    visible_size: tuple[int, int] | None = None,
) -> Path:
    """Write a complete dataset (images, annotations, alignment, stats) under ``out``."""
    spec = SyntheticSpec(
        n_subjects, poses_per_subject, seed,
        tuple(modalities), tuple(covers), scale, visible_size,
    )
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    reference = spec.reference
    ref_size = spec.size(reference)
    affines = _render_affines(spec, rng)

    subjects = [f"{i + 1:05d}" for i in range(spec.n_subjects)]
    with_visible = Modality.VISIBLE in spec.modalities
    for subject in subjects:
        texture = bed_texture(spec.size(Modality.VISIBLE), rng) if with_visible else None
        poses: dict[str, np.ndarray] = {}
        for p in range(spec.poses_per_subject):
            pose = f"{p + 1:06d}"
            joints = sample_lying_skeleton(rng, ref_size)
            poses[pose] = joints
            residual = [
                (rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.9), rng.uniform(0.03, 0.07))
                for _ in range(int(rng.integers(0, 3)))
            ]
            _render_pose(spec, root, subject, pose, joints, affines, texture, residual, rng)
        write_joints_file(root / subject / JOINTS_FILE, poses)

    alignment = AlignmentSpec(
        reference, ref_size,
        {m: np.linalg.inv(a)[:2] for m, a in affines.items()},
        {m: spec.size(m) for m in spec.modalities},
    )
    save_alignment(root, alignment)

    train = DatasetSplit.default(subjects).train_subjects
    stats = {
        m: compute_channel_stats(
            read_image(image_path(root, s, m, c, f"{p + 1:06d}"))
            for s in train for c in spec.covers for p in range(spec.poses_per_subject)
        )
        for m in spec.modalities
    }
    save_stats(root, stats)
    logger.info(
        "Generated %d subjects x %d poses x %d covers (%s) under %s",
        spec.n_subjects, spec.poses_per_subject, len(spec.covers),
        ",".join(m.value for m in spec.modalities), root,
    )
    return root


def _render_pose(
    spec: SyntheticSpec,
    root: Path,
    subject: str,
    pose: str,
    joints: np.ndarray,
    affines: dict[Modality, np.ndarray],
    texture: np.ndarray | None,
    residual: Sequence[tuple[float, float, float]],
    rng: np.random.Generator,
) -> None:
    for modality in spec.modalities:
        size = spec.size(modality)
        w, h = size
        local = joints @ affines[modality][:2, :2].T + affines[modality][:2, 2]
        blobs = [(x * w, y * h, r * w) for x, y, r in residual]
        pressure = render_pressure(local, size) if modality is Modality.PRESSURE else None
        for cover in spec.covers:
            if modality is Modality.VISIBLE:
                assert texture is not None
                image = _to_uint8(render_visible(local, size, cover, rng, texture))
            elif modality is Modality.LWIR:
                image = _to_uint8(render_lwir(local, size, cover, rng, blobs))
            elif modality is Modality.DEPTH:
                image = np.round(render_depth(local, size, cover, rng)).astype(np.uint16)
            else:
                assert pressure is not None
                image = _to_uint8(pressure)
            write_image(image_path(root, subject, modality, cover, pose), image)
