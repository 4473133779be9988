"""Domain data models: modalities, joints, samples, skeletons and reports."""

from __future__ import annotations

from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from typing import ClassVar

import numpy as np
import pandas as pd

from bedpose.errors import ConfigError, LoadError

# ---------------------------------------------------------------------------
# Modalities and cover conditions
# ---------------------------------------------------------------------------


class Modality(StrEnum):
    """Imaging modality. Values double as dataset directory names."""

    VISIBLE = "visible"
    LWIR = "lwir"
    DEPTH = "depth"
    PRESSURE = "pressure"

    @property
    def channels(self) -> int:
        """Image channels fed to the backbone (3 for visible, else 1)."""
        return 3 if self is Modality.VISIBLE else 1

    @property
    def native_size(self) -> tuple[int, int]:
        """Native (width, height) of the home-setting sensor."""
        return _NATIVE_SIZES[self]

    @classmethod
    def parse(cls, value: str) -> Modality:
        """Parse a modality name, raising ConfigError for unknown names."""
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown modality {value!r} (expected one of: {names})") from None


_NATIVE_SIZES: dict[Modality, tuple[int, int]] = {
    Modality.VISIBLE: (576, 1024),
    Modality.LWIR: (120, 160),
    Modality.DEPTH: (424, 512),
    Modality.PRESSURE: (84, 192),
}

# Hospital-setting visible camera.
SIMLAB_VISIBLE_SIZE: tuple[int, int] = (896, 1600)


class Cover(StrEnum):
    """Bedding condition over the subject."""

    UNCOVERED = "uncover"
    COVER1 = "cover1"
    COVER2 = "cover2"

    @classmethod
    def parse(cls, value: str) -> Cover:
        """Parse a cover name, raising ConfigError for unknown names."""
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown cover condition {value!r}") from None


# ---------------------------------------------------------------------------
# Joint vocabulary
# ---------------------------------------------------------------------------

JOINT_NAMES: tuple[str, ...] = (
    "Right Ankle", "Right Knee", "Right Hip",
    "Left Hip", "Left Knee", "Left Ankle",
    "Right Wrist", "Right Elbow", "Right Shoulder",
    "Left Shoulder", "Left Elbow", "Left Wrist",
    "Thorax", "Head",
)
NUM_JOINTS = len(JOINT_NAMES)
THORAX, HEAD = 12, 13

# Bumped whenever JOINT_NAMES changes; stored in checkpoint headers.
JOINT_ORDER_VERSION = 1

LIMB_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 2),      # right ankle - knee - hip
    (5, 4), (4, 3),      # left ankle - knee - hip
    (2, 12), (3, 12),    # hips - thorax
    (6, 7), (7, 8),      # right wrist - elbow - shoulder
    (11, 10), (10, 9),   # left wrist - elbow - shoulder
    (8, 12), (9, 12),    # shoulders - thorax
    (12, 13),            # thorax - head
)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class MultimodalSample:
    """One synchronised frame: images per modality plus 14-joint ground truth.

    Images are float32 arrays of shape (H, W, C) with values in [0, 1].
    ``joint_frame`` names the modality whose pixel grid the joints are expressed
    in; ``None`` means the common square frame produced by preprocessing.
    """

    images: dict[Modality, np.ndarray]
    joints: np.ndarray
    cover: Cover
    subject_id: str
    pose_id: str
    joint_frame: Modality | None = Modality.VISIBLE
    native_sizes: dict[Modality, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.shape != (NUM_JOINTS, 2):
            raise LoadError(
                f"sample {self.subject_id}/{self.pose_id}: expected {NUM_JOINTS} joints, "
                f"got array of shape {joints.shape}"
            )
        if not np.all(np.isfinite(joints)):
            raise LoadError(f"sample {self.subject_id}/{self.pose_id}: non-finite joints")
        self.joints = joints
        for modality, image in self.images.items():
            self.native_sizes.setdefault(modality, (image.shape[1], image.shape[0]))

    @property
    def key(self) -> str:
        """Stable identifier used for overlay file names."""
        return f"{self.subject_id}_{self.pose_id}_{self.cover.value}"


@dataclass(frozen=True, slots=True)
class DatasetSplit:
    """Disjoint train / test subject lists (validation is a tail of train)."""

    train_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]

    _TRAIN_FRACTION: ClassVar[float] = 90 / 102
    _VAL_FRACTION: ClassVar[float] = 0.1

    def __post_init__(self) -> None:
        overlap = set(self.train_subjects) & set(self.test_subjects)
        if overlap:
            raise ConfigError(f"train and test subjects overlap: {sorted(overlap)}")

    @classmethod
    def default(cls, subjects: list[str] | tuple[str, ...]) -> DatasetSplit:
        """First ~88% of subjects train, the rest test (90/12 on 102 subjects)."""
        ordered = tuple(sorted(subjects))
        n = len(ordered)
        n_train = max(1, min(n - 1, round(n * cls._TRAIN_FRACTION))) if n > 1 else n
        return cls(train_subjects=ordered[:n_train], test_subjects=ordered[n_train:])

    @property
    def validation_subjects(self) -> tuple[str, ...]:
        """Tail of the training subjects used for checkpoint selection."""
        n_val = round(len(self.train_subjects) * self._VAL_FRACTION)
        return self.train_subjects[len(self.train_subjects) - n_val:] if n_val else ()

    @property
    def fit_subjects(self) -> tuple[str, ...]:
        """Training subjects minus the validation tail."""
        n_val = len(self.validation_subjects)
        return self.train_subjects[: len(self.train_subjects) - n_val]

    def subjects(self, name: str) -> tuple[str, ...]:
        """Resolve a split name (train, fit, val, test, all)."""
        table = {
            "train": self.train_subjects,
            "fit": self.fit_subjects,
            "val": self.validation_subjects,
            "test": self.test_subjects,
            "all": self.train_subjects + self.test_subjects,
        }
        if name not in table:
            raise ConfigError(f"unknown split {name!r} (expected one of: {', '.join(table)})")
        return table[name]


# ---------------------------------------------------------------------------
# Skeletons and reports
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Skeleton:
    """14 (x, y) joint coordinates with per-joint validity flags."""

    coords: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.ones(NUM_JOINTS, dtype=bool))

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(NUM_JOINTS, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(NUM_JOINTS)

    @property
    def head_bone(self) -> float:
        """Head-to-thorax distance."""
        return float(np.linalg.norm(self.coords[HEAD] - self.coords[THORAX]))

    def scaled(self, sx: float, sy: float | None = None) -> Skeleton:
        """Return a copy with coordinates scaled per axis."""
        factor = np.array([sx, sx if sy is None else sy])
        return Skeleton(self.coords * factor, self.valid.copy())


@dataclass(frozen=True, slots=True)
class PckhReport:
    """Per-joint PCKh rates (percent) plus the summary row."""

    per_joint: tuple[float, ...]
    total: float
    sample_count: int
    excluded_count: int
    threshold: float = 0.5

    def to_frame(self, column: str = "PCKh") -> pd.DataFrame:
        """Rows in joint order followed by ``Total``."""
        rows = list(JOINT_NAMES) + ["Total"]
        values = list(self.per_joint) + [self.total]
        return pd.DataFrame({column: values}, index=pd.Index(rows, name="Joint"))


@dataclass(slots=True)
class TranslationPair:
    """Aligned (source, target) images for cross-modality translation.

    Images are float32 (H, W, C) in [0, 1]; ``bbox`` is (x0, y0, x1, y1) in the
    target modality's native frame.
    """

    source: np.ndarray
    target: np.ndarray
    bbox: tuple[float, float, float, float]
    subject_id: str
    pose_id: str
    cover: Cover
    source_modality: Modality = Modality.LWIR
    target_modality: Modality = Modality.VISIBLE
