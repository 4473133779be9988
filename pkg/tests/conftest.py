"""Shared fixtures: small synthetic datasets and tiny network configs."""

from pathlib import Path

import numpy as np
import pytest

from bedpose.data.synthetic import generate_synthetic_dataset
from bedpose.models import NUM_JOINTS, Cover, Modality
from bedpose.nets.backbone import BackboneConfig


@pytest.fixture(scope="session")
def home_root(tmp_path_factory) -> Path:
    """3 subjects x 2 poses x 2 covers, visible + LWIR, quarter resolution."""
    return generate_synthetic_dataset(
        tmp_path_factory.mktemp("home"), 3, 2, seed=7,
        modalities=(Modality.VISIBLE, Modality.LWIR),
        covers=(Cover.UNCOVERED, Cover.COVER1),
        scale=0.25,
    )


@pytest.fixture(scope="session")
def full_root(tmp_path_factory) -> Path:
    """Every modality and cover, 2 subjects x 1 pose."""
    return generate_synthetic_dataset(
        tmp_path_factory.mktemp("full"), 2, 1, seed=11, scale=0.25,
    )


@pytest.fixture
def tiny() -> BackboneConfig:
    return BackboneConfig.preset("tiny", input_size=64)


def random_joints(rng: np.random.Generator, low: float = 20.0, high: float = 236.0) -> np.ndarray:
    """14 joints uniform in a square, head and thorax kept apart."""
    joints = rng.uniform(low, high, size=(NUM_JOINTS, 2))
    joints[13] = joints[12] + rng.uniform(5.0, 15.0, size=2)
    return joints
