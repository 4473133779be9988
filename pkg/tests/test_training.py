"""Pose datasets, the heatmap loss and the training loop."""

import numpy as np
import pytest
import torch

from bedpose.config import TrainSettings
from bedpose.data.layout import load_slp_layout
from bedpose.errors import ConfigError
from bedpose.models import NUM_JOINTS, Cover, Modality
from bedpose.nets.backbone import build_backbone
from bedpose.training import (
    dataset_stats,
    fit_pose_model,
    make_pose_dataset,
    masked_mse,
    model_modalities,
)

COVERS = (Cover.UNCOVERED, Cover.COVER1)


@pytest.fixture
def lwir(home_root):
    dataset = load_slp_layout(home_root, (Modality.LWIR,), COVERS)
    return dataset, dataset_stats(dataset)


class TestPoseDataset:
    def test_item_layout(self, lwir):
        dataset, stats = lwir
        data = make_pose_dataset(dataset, ["00001"], stats, input_size=64, square=False, sigma=2)
        assert len(data) == 4
        item = data[0]
        assert item["images"]["lwir"].shape == (1, 64, 64)
        assert item["images"]["lwir"].dtype == torch.float32
        assert item["target"].shape == (NUM_JOINTS, 16, 16)
        assert item["weight"].shape == (NUM_JOINTS,)
        assert item["joints"].shape == (NUM_JOINTS, 2)
        assert data[0] is item
        with pytest.raises(IndexError):
            data[4]

    def test_max_samples(self, lwir):
        dataset, stats = lwir
        data = make_pose_dataset(
            dataset, dataset.subjects, stats, input_size=64, square=True, sigma=2, max_samples=5,
        )
        assert len(data) == 5

    def test_stats_read_from_dataset_root(self, lwir):
        _, stats = lwir
        assert set(stats) == {Modality.LWIR}
        assert len(stats[Modality.LWIR].mean) == 1


def test_masked_mse_ignores_zero_weight():
    pred = torch.zeros(2, NUM_JOINTS, 4, 4)
    target = torch.zeros(2, NUM_JOINTS, 4, 4)
    target[:, 0] = 1.0
    weight = torch.ones(2, NUM_JOINTS)
    assert masked_mse(pred, target, weight).item() == pytest.approx(1.0 / NUM_JOINTS)
    weight[:, 0] = 0.0
    assert masked_mse(pred, target, weight).item() == 0.0


class TestFit:
    def test_history_and_step_cap(self, lwir, tiny):
        dataset, stats = lwir
        data = make_pose_dataset(
            dataset, dataset.subjects, stats, input_size=64, square=False, sigma=2,
        )
        model = build_backbone(tiny, Modality.LWIR)
        settings = TrainSettings(epochs=5, batch_size=4, lr=1e-3, lr_milestones=(1,), max_steps=4)
        seen = []
        result = fit_pose_model(model, data, settings, seed=0, on_epoch=seen.append)
        assert result.steps == 4
        frame = result.losses_frame()
        assert list(frame["epoch"]) == [1, 2]
        assert frame["lr"].tolist() == pytest.approx([1e-3, 1e-4])
        assert frame["val_pckh"].isna().all()
        assert [e.epoch for e in seen] == [1, 2]
        assert result.best_epoch == 2

    def test_best_validation_weights_are_kept(self, lwir, tiny):
        dataset, stats = lwir
        fit = make_pose_dataset(dataset, ["00001"], stats, input_size=64, square=False, sigma=2)
        val = make_pose_dataset(dataset, ["00002"], stats, input_size=64, square=False, sigma=2)
        model = build_backbone(tiny, Modality.LWIR)
        settings = TrainSettings(epochs=2, batch_size=4, lr=1e-3)
        result = fit_pose_model(model, fit, settings, seed=0, val_set=val)
        frame = result.losses_frame()
        assert frame["val_pckh"].notna().all()
        assert result.best_epoch == int(frame["epoch"][frame["val_pckh"].idxmax()])

    def test_deterministic(self, lwir, tiny):
        dataset, stats = lwir
        data = make_pose_dataset(dataset, ["00001"], stats, input_size=64, square=False, sigma=2)
        settings = TrainSettings(epochs=2, batch_size=2, lr=1e-3)
        losses = []
        for _ in range(2):
            torch.manual_seed(3)
            model = build_backbone(tiny, Modality.LWIR)
            result = fit_pose_model(model, data, settings, seed=3)
            losses.append(result.losses_frame()["train_loss"].to_numpy())
        np.testing.assert_array_equal(losses[0], losses[1])

    def test_empty_training_split(self, lwir, tiny):
        dataset, stats = lwir
        empty = make_pose_dataset(dataset, [], stats, input_size=64, square=False, sigma=2)
        with pytest.raises(ConfigError):
            fit_pose_model(build_backbone(tiny, Modality.LWIR), empty, TrainSettings(), seed=0)

    def test_model_modalities(self, tiny):
        assert model_modalities(build_backbone(tiny, Modality.DEPTH)) == (Modality.DEPTH,)
        with pytest.raises(ConfigError):
            model_modalities(build_backbone(tiny))
