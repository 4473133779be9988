"""Gaussian heatmap targets for 14-joint regression."""

from __future__ import annotations

import logging

import numpy as np

from bedpose.models import NUM_JOINTS

logger = logging.getLogger(__name__)

HEATMAP_STRIDE = 4
DEFAULT_SIGMA = 2.0


def make_target_heatmaps(
    joints: np.ndarray,
    sigma: float = DEFAULT_SIGMA,
    heatmap_size: int = 64,
    stride: int = HEATMAP_STRIDE,
) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised Gaussians (peak 1) centred on ``joint / stride``.

    The hottest cell is ``round(joint / stride)``. With ``sigma <= 0`` only that cell is set.

    Returns ``(maps, weights)`` with maps shaped (14, S, S). A joint whose centre
    falls outside the grid keeps whatever tail lands inside and gets weight 0.
    """
    joints = np.asarray(joints, dtype=np.float64).reshape(NUM_JOINTS, 2)
    maps = np.zeros((NUM_JOINTS, heatmap_size, heatmap_size), dtype=np.float32)
    weights = np.ones(NUM_JOINTS, dtype=np.float32)
    grid = np.arange(heatmap_size, dtype=np.float64)
    centres = joints / stride
    cells = np.floor(centres + 0.5).astype(np.int64)

    for j, (mx, my) in enumerate(cells):
        inside = 0 <= mx < heatmap_size and 0 <= my < heatmap_size
        if not inside:
            weights[j] = 0.0
            logger.warning(
                "Joint %d at (%.1f, %.1f) falls outside the %dx%d heatmap grid",
                j, joints[j, 0], joints[j, 1], heatmap_size, heatmap_size,
            )
        if sigma <= 0:
            if inside:
                maps[j, my, mx] = 1.0
            continue
        cx, cy = centres[j]
        gx = np.exp(-((grid - cx) ** 2) / (2.0 * sigma**2))
        gy = np.exp(-((grid - cy) ** 2) / (2.0 * sigma**2))
        maps[j] = np.outer(gy, gx).astype(np.float32)
    return maps, weights
