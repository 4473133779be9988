"""Heatmap decoding, PCKh, normalised L2 error and skeleton overlays."""

from __future__ import annotations

import logging
import os
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Literal

import cv2
import numpy as np
import pandas as pd
import torch

from bedpose.errors import ReportError
from bedpose.models import JOINT_NAMES, LIMB_EDGES, NUM_JOINTS, PckhReport, Skeleton

logger = logging.getLogger(__name__)

PCKH_THRESHOLD = 0.5
HEATMAP_STRIDE = 4

GT_COLOR = (255, 255, 0)  # yellow, RGB
PRED_COLOR = (0, 0, 255)  # blue, RGB


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode_heatmaps(
    heatmaps: np.ndarray | torch.Tensor, *, refine: bool = True, stride: int = HEATMAP_STRIDE,
) -> Skeleton:
    """Argmax per joint (first row-major hit wins), quarter-cell shift, times ``stride``."""
    if isinstance(heatmaps, torch.Tensor):
        heatmaps = heatmaps.detach().cpu().numpy()
    maps = np.asarray(heatmaps, dtype=np.float64)
    n, h, w = maps.shape
    flat = maps.reshape(n, -1)
    idx = np.argmax(flat, axis=1)
    ys, xs = np.divmod(idx, w)
    coords = np.stack([xs, ys], axis=1).astype(np.float64)

    if refine:
        for j in range(n):
            x, y = xs[j], ys[j]
            hm = maps[j]
            if 0 < x < w - 1:
                coords[j, 0] += 0.25 * np.sign(hm[y, x + 1] - hm[y, x - 1])
            if 0 < y < h - 1:
                coords[j, 1] += 0.25 * np.sign(hm[y + 1, x] - hm[y - 1, x])
    valid = np.isfinite(flat).all(axis=1)
    return Skeleton(coords * stride, valid)


def decode_batch(heatmaps: torch.Tensor, *, refine: bool = True) -> list[Skeleton]:
    return [decode_heatmaps(h, refine=refine) for h in heatmaps.detach().cpu().numpy()]


# ---------------------------------------------------------------------------
# PCKh and L2
# ---------------------------------------------------------------------------

def pckh(
    pred: Skeleton, gt: Skeleton, threshold: float = PCKH_THRESHOLD,
) -> np.ndarray | None:
    """Per-joint correctness ``||pred - gt|| < threshold * head_bone``.

    Returns None when the ground-truth head bone has zero length (sample excluded).
    """
    head = gt.head_bone
    if not head > 0.0:
        return None
    dist = np.linalg.norm(pred.coords - gt.coords, axis=1)
    return (dist < threshold * head) & pred.valid


def normalized_l2(pred: Skeleton, gt: Skeleton) -> np.ndarray | None:
    """Per-joint distance divided by the ground-truth head bone (None if it is zero)."""
    head = gt.head_bone
    if not head > 0.0:
        return None
    return np.linalg.norm(pred.coords - gt.coords, axis=1) / head


def aggregate_pckh(
    results: Iterable[np.ndarray | None],
    *,
    threshold: float = PCKH_THRESHOLD,
    total: Literal["joints", "instances"] = "joints",
) -> PckhReport:
    """Percent correct per joint over non-excluded samples.

    ``total="joints"`` averages the 14 per-joint rates; ``"instances"`` pools every
    joint instance. The two agree whenever every joint of every sample is scored.
    """
    kept: list[np.ndarray] = []
    excluded = 0
    for result in results:
        if result is None:
            excluded += 1
        else:
            kept.append(np.asarray(result, dtype=bool).reshape(NUM_JOINTS))
    if not kept:
        raise ReportError(f"no evaluable samples ({excluded} excluded)")
    table = np.stack(kept)
    per_joint = 100.0 * table.mean(axis=0)
    if total == "joints":
        summary = float(per_joint.mean())
    elif total == "instances":
        summary = float(100.0 * table.sum() / table.size)
    else:
        raise ValueError(f"unknown total mode {total!r}")
    return PckhReport(
        per_joint=tuple(float(v) for v in per_joint),
        total=summary,
        sample_count=len(kept),
        excluded_count=excluded,
        threshold=threshold,
    )


def aggregate_l2(results: Iterable[np.ndarray | None]) -> pd.DataFrame:
    """Mean normalised L2 per joint plus the overall mean, in PCKh table row order."""
    kept = [np.asarray(r, dtype=np.float64) for r in results if r is not None]
    if not kept:
        raise ReportError("no evaluable samples for normalised L2")
    per_joint = np.stack(kept).mean(axis=0)
    rows = list(JOINT_NAMES) + ["Mean"]
    values = list(per_joint) + [float(per_joint.mean())]
    return pd.DataFrame({"L2": values}, index=pd.Index(rows, name="Joint"))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def pckh_table(reports: Mapping[str, PckhReport]) -> pd.DataFrame:
    """One column per report, rows in joint order then ``Total``."""
    if not reports:
        raise ReportError("no reports to tabulate")
    return pd.concat([r.to_frame(name) for name, r in reports.items()], axis=1)


def write_table(frame: pd.DataFrame, path: str | os.PathLike[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, float_format="%.4f")
    logger.info("Wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

def _as_rgb8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img[:, :, :3])


def _draw(canvas: np.ndarray, skeleton: Skeleton, color: tuple[int, int, int], t: int) -> None:
    pts = np.round(skeleton.coords).astype(np.int64)
    for a, b in LIMB_EDGES:
        if skeleton.valid[a] and skeleton.valid[b]:
            cv2.line(
                canvas, (int(pts[a, 0]), int(pts[a, 1])), (int(pts[b, 0]), int(pts[b, 1])),
                color, t, lineType=cv2.LINE_AA,
            )


def render_overlay(
    image: np.ndarray,
    gt: Skeleton,
    pred: Skeleton,
    path: str | os.PathLike[str] | None = None,
) -> np.ndarray:
    """Ground truth in yellow, prediction in blue on top; optionally saved as PNG."""
    canvas = _as_rgb8(image).copy()
    thickness = max(1, round(min(canvas.shape[:2]) / 128))
    _draw(canvas, gt, GT_COLOR, thickness)
    _draw(canvas, pred, PRED_COLOR, thickness)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(path), canvas[:, :, ::-1])
    return canvas


def evaluate_skeletons(
    preds: Sequence[Skeleton], gts: Sequence[Skeleton], *, threshold: float = PCKH_THRESHOLD,
) -> tuple[list[np.ndarray | None], list[np.ndarray | None]]:
    """PCKh booleans and normalised L2 per sample."""
    return (
        [pckh(p, g, threshold) for p, g in zip(preds, gts)],
        [normalized_l2(p, g) for p, g in zip(preds, gts)],
    )
