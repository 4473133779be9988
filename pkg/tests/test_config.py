"""Experiment config parsing and validation."""

import json

import pytest

from bedpose.config import ExperimentConfig
from bedpose.errors import ConfigError
from bedpose.models import Cover, Modality
from bedpose.nets.fusion import FusionStrategy, FusionType


def test_flat_and_nested_keys_agree():
    flat = ExperimentConfig.from_mapping({
        "seed": 1, "train.epochs": 5, "dataset.modalities": ["lwir", "depth"],
    })
    nested = ExperimentConfig.from_mapping({
        "seed": 1, "train": {"epochs": 5}, "dataset": {"modalities": "lwir, depth"},
    })
    assert flat == nested
    assert flat.train.epochs == 5
    assert flat.dataset.modalities == (Modality.LWIR, Modality.DEPTH)


def test_defaults():
    config = ExperimentConfig.from_mapping({"seed": 0})
    assert config.backbone.preset == "w32"
    assert config.backbone.input_size == 256
    assert config.dataset.covers == tuple(Cover)
    assert config.fusion.fusion_type is FusionType.CONCATENATION
    assert config.fusion.strategy is FusionStrategy.END_TO_END
    assert config.fusion.dropout_p == 0.2
    assert config.gan.lambda_l1 == 100.0
    assert config.eval.split == "test"


@pytest.mark.parametrize("data, fragment", [
    ({"seed": 0, "train.epoch": 3}, "train.epoch"),
    ({"seed": 0, "colour": "red"}, "colour"),
])
def test_unknown_key(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        ExperimentConfig.from_mapping(data)


def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed"):
        ExperimentConfig.from_mapping({"train.epochs": 3})


@pytest.mark.parametrize("data", [
    {"dataset.modalities": ["thermal"]},
    {"dataset.modalities": []},
    {"dataset.covers": ["blanket"]},
    {"fusion.modalities": ["lwir"]},
    {"fusion.modalities": ["lwir", "lwir"]},
    {"fusion.dropout_p": 1.0},
    {"fusion.stage": 4},
    {"fusion.type": "multiplication"},
    {"fusion.strategy": "frozen"},
    {"backbone.preset": "w64"},
    {"backbone.input_size": 100},
    {"train.epochs": True},
    {"train.lr": "fast"},
    {"train.batch_size": 0},
    {"gan.image_size": 48},
    {"gan.source": "visible"},
    {"eval.split": "holdout"},
    {"eval.total": "median"},
    {"dataset.square_crop": "yes"},
])
def test_invalid_values(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"seed": 0, **data})


def test_fusion_groups_and_checkpoints():
    config = ExperimentConfig.from_mapping({
        "seed": 0,
        "fusion": {
            "strategy": "frozen_weighted",
            "pairs": [["lwir", "depth"], ["lwir", "pressure"]],
            "checkpoints": {"lwir": "runs/lwir/model.pt", "depth": "runs/depth/model.pt"},
            "primary": "lwir",
        },
    })
    assert config.fusion.groups() == [
        (Modality.LWIR, Modality.DEPTH), (Modality.LWIR, Modality.PRESSURE),
    ]
    assert config.fusion.checkpoint_for(Modality.DEPTH) == "runs/depth/model.pt"
    assert config.fusion.checkpoint_for(Modality.PRESSURE) is None
    built = config.fusion.build((Modality.DEPTH, Modality.PRESSURE))
    assert built.primary is Modality.DEPTH


def test_groups_need_modalities():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"seed": 0}).fusion.groups()


def test_from_file_with_overrides(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(
        "seed: 3\n"
        "out: runs/a\n"
        "dataset:\n"
        "  root: data/synthetic\n"
        "  modalities: [lwir]\n"
        "train.epochs: 2\n"
    )
    config = ExperimentConfig.from_file(path, seed=9, out=None)
    assert config.seed == 9
    assert config.out == "runs/a"
    assert config.train.epochs == 2
    assert str(config.require_root()) == "data/synthetic"
    assert config.with_overrides(out="runs/b").out == "runs/b"
    assert config.with_overrides() is config


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(bad)
    listing = tmp_path / "list.yaml"
    listing.write_text("- seed\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(listing)


def test_root_required():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"seed": 0}).require_root()


def test_snapshot_round_trip():
    config = ExperimentConfig.from_mapping({
        "seed": 4,
        "dataset.modalities": ["depth", "lwir"],
        "fusion.modalities": ["depth", "lwir"],
        "fusion.type": "addition",
        "fusion.checkpoints": {"depth": "d.pt"},
        "fusion.pairs": [["lwir", "depth"]],
        "gan.ngf": 16,
    })
    snapshot = config.snapshot()
    json.dumps(snapshot)
    assert snapshot["fusion.type"] == "addition"
    assert snapshot["fusion.checkpoints"] == {"depth": "d.pt"}
    assert snapshot["fusion.pairs"] == [["lwir", "depth"]]
    assert ExperimentConfig.from_mapping(snapshot) == config
