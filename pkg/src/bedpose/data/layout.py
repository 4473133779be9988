"""On-disk dataset grammar: loader, annotation files, alignment and channel stats.

Layout::

    root/alignment.json                                  reference modality + affines
    root/stats.json                                      per-modality mean/std
    root/<subject>/joints_gt.txt                         14 "x y" rows per pose
    root/<subject>/<modality>/<cover>/image_<pose>.png   uint8 or uint16 PNG

Joints are stored in the pixel frame of the alignment reference modality.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import overload

import cv2
import numpy as np

from bedpose.errors import AlignmentError, LoadError
from bedpose.models import NUM_JOINTS, Cover, DatasetSplit, Modality, MultimodalSample
from bedpose.storage import load_json, save_json

logger = logging.getLogger(__name__)

JOINTS_FILE = "joints_gt.txt"
ALIGNMENT_FILE = "alignment.json"
STATS_FILE = "stats.json"
_POSE_HEADER = "# pose"


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def read_image(path: str | os.PathLike[str]) -> np.ndarray:
    """Decode a PNG into float32 (H, W, C) in [0, 1].

    uint8 is divided by 255 and uint16 by 65535. Colour images come back RGB.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise LoadError(f"unreadable image: {path}")
    if raw.dtype == np.uint8:
        image = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        image = raw.astype(np.float32) / 65535.0
    else:
        raise LoadError(f"unsupported pixel type {raw.dtype} in {path}")
    if image.ndim == 2:
        return image[:, :, None]
    if image.shape[2] == 4:
        image = image[:, :, :3]
    return np.ascontiguousarray(image[:, :, ::-1])


def write_image(path: str | os.PathLike[str], image: np.ndarray) -> None:
    """Encode a uint8/uint16 array (RGB if 3-channel) as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = image[:, :, 0] if image.ndim == 3 and image.shape[2] == 1 else image
    if data.ndim == 3:
        data = data[:, :, ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(data)):
        raise LoadError(f"cannot write image: {path}")


def image_path(root: Path, subject: str, modality: Modality, cover: Cover, pose: str) -> Path:
    return root / subject / modality.value / cover.value / f"image_{pose}.png"


# ---------------------------------------------------------------------------
# Joint annotations
# ---------------------------------------------------------------------------

def read_joints_file(path: str | os.PathLike[str]) -> dict[str, np.ndarray]:
    """Parse ``# pose <id>`` blocks of 14 ``x y`` rows each."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise LoadError(f"missing annotation file: {path}") from None
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc

    poses: dict[str, list[list[float]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(_POSE_HEADER):
            current = line[len(_POSE_HEADER):].strip()
            if not current or current in poses:
                raise LoadError(f"{path}:{lineno}: bad or duplicate pose header {line!r}")
            poses[current] = []
            continue
        if current is None:
            raise LoadError(f"{path}:{lineno}: joint row before any pose header")
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            poses[current].append([float(parts[0]), float(parts[1])])
        except ValueError:
            raise LoadError(f"{path}:{lineno}: expected 'x y', got {line!r}") from None

    out: dict[str, np.ndarray] = {}
    for pose, rows in poses.items():
        if len(rows) != NUM_JOINTS:
            raise LoadError(f"{path}: pose {pose} has {len(rows)} joints, expected {NUM_JOINTS}")
        joints = np.asarray(rows, dtype=np.float64)
        if not np.all(np.isfinite(joints)):
            raise LoadError(f"{path}: pose {pose} has non-finite joints")
        out[pose] = joints
    if not out:
        raise LoadError(f"{path}: no poses annotated")
    return out


def write_joints_file(path: str | os.PathLike[str], poses: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for pose, joints in poses.items():
        lines.append(f"{_POSE_HEADER} {pose}")
        lines.extend(f"{x:.3f} {y:.3f}" for x, y in np.asarray(joints).reshape(NUM_JOINTS, 2))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def _as_3x3(matrix: np.ndarray) -> np.ndarray:
    return np.vstack([np.asarray(matrix, dtype=np.float64).reshape(2, 3), [0.0, 0.0, 1.0]])


@dataclass(slots=True)
class AlignmentSpec:
    """Per-modality 2x3 affines from modality pixels into the reference frame."""

    reference: Modality
    reference_size: tuple[int, int]
    transforms: dict[Modality, np.ndarray] = field(default_factory=dict)
    sizes: dict[Modality, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        identity = np.eye(3)[:2]
        given = self.transforms.get(self.reference)
        if given is not None and not np.allclose(given, identity):
            raise AlignmentError(f"reference modality {self.reference.value} must map by identity")
        self.transforms = {m: np.asarray(t, dtype=np.float64).reshape(2, 3)
                           for m, t in self.transforms.items()}
        self.transforms[self.reference] = identity.copy()
        self.sizes[self.reference] = (int(self.reference_size[0]), int(self.reference_size[1]))
        for modality, matrix in self.transforms.items():
            if abs(np.linalg.det(matrix[:, :2])) < 1e-12:
                raise AlignmentError(f"alignment for {modality.value} is not invertible")

    @classmethod
    def identity(
        cls, modalities: Iterable[Modality], reference: Modality, reference_size: tuple[int, int],
    ) -> AlignmentSpec:
        modalities = tuple(modalities)
        return cls(
            reference, reference_size,
            {m: np.eye(3)[:2] for m in modalities},
            {m: reference_size for m in modalities},
        )

    def to_reference(self, modality: Modality) -> np.ndarray:
        """3x3 matrix mapping ``modality`` pixels into the reference frame."""
        try:
            return _as_3x3(self.transforms[modality])
        except KeyError:
            raise AlignmentError(f"no alignment transform for {modality.value}") from None

    def from_reference(self, modality: Modality) -> np.ndarray:
        return np.linalg.inv(self.to_reference(modality))

    def frame_size(self, modality: Modality) -> tuple[int, int]:
        """Pixel (w, h) of ``modality`` images in this dataset."""
        return self.sizes.get(modality, modality.native_size)

    def covers(self, modalities: Iterable[Modality]) -> None:
        missing = [m.value for m in modalities if m not in self.transforms]
        if missing:
            raise AlignmentError(f"alignment spec lacks: {', '.join(missing)}")

    def to_json(self) -> dict[str, object]:
        return {
            "reference": self.reference.value,
            "reference_size": list(self.reference_size),
            "transforms": {m.value: t.tolist() for m, t in self.transforms.items()},
            "sizes": {m.value: list(s) for m, s in self.sizes.items()},
        }

    @classmethod
    def from_json(cls, data: Mapping[str, object]) -> AlignmentSpec:
        try:
            reference = Modality.parse(str(data["reference"]))
            size = tuple(int(v) for v in data["reference_size"])  # type: ignore[union-attr]
            transforms = {
                Modality.parse(name): np.asarray(matrix, dtype=np.float64).reshape(2, 3)
                for name, matrix in data["transforms"].items()  # type: ignore[union-attr]
            }
            sizes = {
                Modality.parse(name): (int(s[0]), int(s[1]))
                for name, s in data.get("sizes", {}).items()  # type: ignore[union-attr]
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise AlignmentError(f"malformed alignment document: {exc}") from exc
        return cls(reference, (size[0], size[1]), transforms, sizes)


def apply_affine(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 2x3 or 3x3 affine to (K, 2) points."""
    m = _as_3x3(matrix[:2])
    pts = np.asarray(points, dtype=np.float64)
    return pts @ m[:2, :2].T + m[:2, 2]


# ---------------------------------------------------------------------------
# Channel statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]


def load_stats(root: str | os.PathLike[str]) -> dict[Modality, ChannelStats]:
    data = load_json(Path(root) / STATS_FILE)
    try:
        return {
            Modality.parse(name): ChannelStats(tuple(v["mean"]), tuple(v["std"]))
            for name, v in data.items()
        }
    except (AttributeError, KeyError, TypeError) as exc:
        raise LoadError(f"malformed {Path(root) / STATS_FILE}: {exc}") from exc


def save_stats(root: str | os.PathLike[str], stats: Mapping[Modality, ChannelStats]) -> Path:
    return save_json(
        {m.value: {"mean": list(s.mean), "std": list(s.std)} for m, s in stats.items()},
        Path(root) / STATS_FILE,
    )


def load_alignment(root: str | os.PathLike[str]) -> AlignmentSpec:
    return AlignmentSpec.from_json(load_json(Path(root) / ALIGNMENT_FILE))


def save_alignment(root: str | os.PathLike[str], spec: AlignmentSpec) -> Path:
    return save_json(spec.to_json(), Path(root) / ALIGNMENT_FILE)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SampleRef:
    subject_id: str
    pose_id: str
    cover: Cover


class SlpDataset(Sequence[MultimodalSample]):
    """Lazy view over a dataset root; images are decoded on access."""

    def __init__(
        self,
        root: Path,
        modalities: tuple[Modality, ...],
        covers: tuple[Cover, ...],
        refs: list[SampleRef],
        joints: dict[str, dict[str, np.ndarray]],
        alignment: AlignmentSpec,
        subjects: tuple[str, ...],
    ) -> None:
        self.root = root
        self.modalities = modalities
        self.covers = covers
        self.refs = refs
        self.alignment = alignment
        self.subjects = subjects
        self._joints = joints

    def __len__(self) -> int:
        return len(self.refs)

    @overload
    def __getitem__(self, index: int) -> MultimodalSample: ...
    @overload
    def __getitem__(self, index: slice) -> list[MultimodalSample]: ...

    def __getitem__(self, index: int | slice) -> MultimodalSample | list[MultimodalSample]:
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        ref = self.refs[index]
        return self.load(ref.subject_id, ref.pose_id, ref.cover)

    def __iter__(self) -> Iterator[MultimodalSample]:
        for i in range(len(self)):
            yield self[i]

    def load(
        self,
        subject: str,
        pose: str,
        cover: Cover,
        modalities: Iterable[Modality] | None = None,
    ) -> MultimodalSample:
        """Decode one frame; raises LoadError naming the missing file."""
        try:
            joints = self._joints[subject][pose]
        except KeyError:
            raise LoadError(f"no annotation for subject {subject} pose {pose}") from None
        wanted = tuple(modalities) if modalities is not None else self.modalities
        images = {
            m: read_image(image_path(self.root, subject, m, cover, pose)) for m in wanted
        }
        return MultimodalSample(
            images=images, joints=joints.copy(), cover=cover,
            subject_id=subject, pose_id=pose, joint_frame=self.alignment.reference,
        )

    def subset(self, subjects: Iterable[str]) -> SlpDataset:
        """Same view restricted to ``subjects``, order preserved."""
        keep = set(subjects)
        return SlpDataset(
            self.root, self.modalities, self.covers,
            [r for r in self.refs if r.subject_id in keep],
            self._joints, self.alignment,
            tuple(s for s in self.subjects if s in keep),
        )

    def split(self, split: DatasetSplit | None = None) -> DatasetSplit:
        return split or DatasetSplit.default(self.subjects)


def _subject_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / JOINTS_FILE).exists())


def load_slp_layout(
    root: str | os.PathLike[str],
    modalities: Iterable[Modality],
    covers: Iterable[Cover] = tuple(Cover),
    *,
    subjects: Iterable[str] | None = None,
) -> SlpDataset:
    """Index a dataset root; every requested image must exist.

    Annotations are parsed eagerly, images lazily.
    """
    root = Path(root)
    modalities = tuple(modalities)
    covers = tuple(covers)
    if not root.is_dir():
        raise LoadError(f"dataset root not found: {root}")
    alignment = load_alignment(root)
    try:
        alignment.covers(modalities)
    except AlignmentError as exc:
        raise LoadError(f"missing modality data under {root}: {exc}") from exc

    dirs = _subject_dirs(root)
    if subjects is not None:
        wanted = set(subjects)
        dirs = [d for d in dirs if d.name in wanted]
    if not dirs:
        raise LoadError(f"no subject directories with {JOINTS_FILE} under {root}")

    refs: list[SampleRef] = []
    joints: dict[str, dict[str, np.ndarray]] = {}
    for subject_dir in dirs:
        subject = subject_dir.name
        joints[subject] = read_joints_file(subject_dir / JOINTS_FILE)
        for modality in modalities:
            if not (subject_dir / modality.value).is_dir():
                raise LoadError(f"missing {modality.value} data: {subject_dir / modality.value}")
        for cover in covers:
            for pose in joints[subject]:
                for modality in modalities:
                    path = image_path(root, subject, modality, cover, pose)
                    if not path.is_file():
                        raise LoadError(f"missing image: {path}")
                refs.append(SampleRef(subject, pose, cover))

    logger.info(
        "Indexed %d samples from %d subjects under %s (%s)",
        len(refs), len(dirs), root, ",".join(m.value for m in modalities),
    )
    return SlpDataset(
        root, modalities, covers, refs, joints, alignment, tuple(d.name for d in dirs),
    )
