"""Heatmap-regression training and evaluation for uni-modal and fused pose models."""

from __future__ import annotations

import copy
import logging
import os
import random
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from bedpose.config import TrainSettings
from bedpose.data.heatmaps import HEATMAP_STRIDE, make_target_heatmaps
from bedpose.data.layout import STATS_FILE, ChannelStats, SlpDataset, load_stats
from bedpose.data.preprocess import (
    PoseInput,
    align_and_resize,
    compute_channel_stats,
    prepare_pose_input,
    square_crop,
)
from bedpose.errors import ConfigError, ReportError
from bedpose.metrics import (
    PCKH_THRESHOLD,
    aggregate_l2,
    aggregate_pckh,
    decode_batch,
    evaluate_skeletons,
    render_overlay,
)
from bedpose.models import Modality, MultimodalSample, PckhReport, Skeleton
from bedpose.nets.fusion import FusedModel

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def dataset_stats(dataset: SlpDataset) -> dict[Modality, ChannelStats]:
    """Channel statistics from ``stats.json``, else computed over the training split."""
    if (dataset.root / STATS_FILE).is_file():
        stats = load_stats(dataset.root)
        if all(m in stats for m in dataset.modalities):
            return {m: stats[m] for m in dataset.modalities}
    train = dataset.subset(dataset.split().train_subjects)
    logger.info("Computing channel statistics over %d training samples", len(train))
    return {
        m: compute_channel_stats(
            train.load(r.subject_id, r.pose_id, r.cover, (m,)).images[m] for r in train.refs
        )
        for m in dataset.modalities
    }


class PoseDataset(Dataset):
    """Network-ready samples with heatmap targets; prepared items are cached."""

    def __init__(
        self,
        dataset: SlpDataset,
        stats: Mapping[Modality, ChannelStats],
        *,
        input_size: int = 256,
        square: bool = False,
        sigma: float = 2.0,
        max_samples: int = 0,
    ) -> None:
        self.dataset = dataset
        self.stats = dict(stats)
        self.input_size = input_size
        self.square = square
        self.sigma = sigma
        self.heatmap_size = input_size // HEATMAP_STRIDE
        n = len(dataset)
        self.length = min(n, max_samples) if max_samples > 0 else n
        self._cache: dict[int, dict[str, object]] = {}

    def __len__(self) -> int:
        return self.length

    def prepared(self, index: int) -> PoseInput:
        return prepare_pose_input(
            self.dataset[index], self.dataset.alignment, self.stats,
            out_size=self.input_size, square=self.square,
        )

    def aligned(self, index: int) -> MultimodalSample:
        """Un-normalised images in the network frame, for overlays."""
        sample = self.dataset[index]
        spec = self.dataset.alignment
        if self.square:
            return square_crop(sample, spec, self.input_size)
        return align_and_resize(sample, spec, self.input_size)

    def __getitem__(self, index: int) -> dict[str, object]:
        if index < 0 or index >= self.length:
            raise IndexError(index)
        item = self._cache.get(index)
        if item is None:
            prepared = self.prepared(index)
            maps, weights = make_target_heatmaps(
                prepared.joints, self.sigma, self.heatmap_size, HEATMAP_STRIDE,
            )
            item = {
                "images": {m.value: torch.from_numpy(a) for m, a in prepared.images.items()},
                "target": torch.from_numpy(maps),
                "weight": torch.from_numpy(weights.astype(np.float32)),
                "joints": torch.from_numpy(prepared.joints.astype(np.float64)),
                "index": index,
            }
            self._cache[index] = item
        return item


def make_pose_dataset(
    dataset: SlpDataset,
    subjects: Iterable[str],
    stats: Mapping[Modality, ChannelStats],
    *,
    input_size: int,
    square: bool,
    sigma: float,
    max_samples: int = 0,
) -> PoseDataset:
    return PoseDataset(
        dataset.subset(subjects), stats,
        input_size=input_size, square=square, sigma=sigma, max_samples=max_samples,
    )


# ---------------------------------------------------------------------------
# Model plumbing
# ---------------------------------------------------------------------------

def masked_mse(pred: torch.Tensor, target: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Per-joint heatmap MSE, zeroed for joints without a target."""
    per_joint = ((pred - target) ** 2).mean(dim=(2, 3))
    return (per_joint * weight).mean()


def run_pose_model(
    model: nn.Module, images: Mapping[str, torch.Tensor], device: str = "cpu",
) -> torch.Tensor:
    if isinstance(model, FusedModel):
        return model({Modality(k): v.to(device) for k, v in images.items()})
    modality = getattr(model, "modality", None)
    if modality is None:
        raise ConfigError("uni-modal backbone has no modality to read inputs for")
    return model(images[modality.value].to(device))


def model_modalities(model: nn.Module) -> tuple[Modality, ...]:
    if isinstance(model, FusedModel):
        return model.config.modalities
    modality = getattr(model, "modality", None)
    if modality is None:
        raise ConfigError("uni-modal backbone has no modality")
    return (modality,)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Evaluation:
    report: PckhReport
    l2: pd.DataFrame
    preds: list[Skeleton]
    gts: list[Skeleton]


@torch.no_grad()
def predict(
    model: nn.Module, dataset: PoseDataset, *, batch_size: int = 32, device: str = "cpu",
) -> tuple[list[Skeleton], list[Skeleton]]:
    """Decoded predictions and ground truth, both in input-pixel coordinates."""
    was_training = model.training
    model.eval()
    preds: list[Skeleton] = []
    gts: list[Skeleton] = []
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    for batch in loader:
        heatmaps = run_pose_model(model, batch["images"], device)
        preds.extend(decode_batch(heatmaps))
        gts.extend(Skeleton(j.numpy()) for j in batch["joints"])
    model.train(was_training)
    return preds, gts


def evaluate_pose_model(
    model: nn.Module,
    dataset: PoseDataset,
    *,
    threshold: float = PCKH_THRESHOLD,
    total: str = "joints",
    batch_size: int = 32,
    device: str = "cpu",
) -> Evaluation:
    if len(dataset) == 0:
        raise ReportError("evaluation split is empty")
    preds, gts = predict(model, dataset, batch_size=batch_size, device=device)
    correct, l2 = evaluate_skeletons(preds, gts, threshold=threshold)
    report = aggregate_pckh(correct, threshold=threshold, total=total)  # type: ignore[arg-type]
    return Evaluation(report, aggregate_l2(l2), preds, gts)


def render_overlays(
    dataset: PoseDataset,
    evaluation: Evaluation,
    out_dir: str | os.PathLike[str],
    limit: int,
    modality: Modality | None = None,
) -> list[Path]:
    """Best-effort overlay PNGs for the first ``limit`` samples."""
    out_dir = Path(out_dir)
    written: list[Path] = []
    for i in range(min(limit, len(dataset))):
        try:
            sample = dataset.aligned(i)
            shown = modality or next(iter(sample.images))
            path = out_dir / f"{sample.key}_{shown.value}.png"
            render_overlay(sample.images[shown], evaluation.gts[i], evaluation.preds[i], path)
            written.append(path)
        except Exception:
            logger.exception("Failed to render overlay %d", i)
    logger.info("Rendered %d overlays under %s", len(written), out_dir)
    return written


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class PoseEpoch:
    epoch: int
    train_loss: float
    lr: float
    val_pckh: float


@dataclass(slots=True)
class PoseTrainResult:
    model: nn.Module
    history: list[PoseEpoch] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0

    def losses_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(h.epoch, h.train_loss, h.lr, h.val_pckh) for h in self.history],
            columns=["epoch", "train_loss", "lr", "val_pckh"],
        )


def _trainable(model: nn.Module) -> list[nn.Parameter]:
    if isinstance(model, FusedModel):
        return model.trainable_parameters()
    return [p for p in model.parameters() if p.requires_grad]


def fit_pose_model(
    model: nn.Module,
    train_set: PoseDataset,
    settings: TrainSettings,
    *,
    seed: int,
    val_set: PoseDataset | None = None,
    on_epoch: Callable[[PoseEpoch], None] | None = None,
) -> PoseTrainResult:
    """Adam + step decay on masked heatmap MSE; best validation PCKh picks the weights.

    ``settings.max_steps`` (when > 0) caps the number of optimiser steps.
    """
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    seed_everything(seed)
    device = settings.device
    model.to(device)
    optimizer = torch.optim.Adam(_trainable(model), lr=settings.lr)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(settings.lr_milestones), gamma=settings.lr_gamma,
    )
    loader = DataLoader(
        train_set,
        batch_size=min(settings.batch_size, len(train_set)),
        shuffle=True,
        generator=torch.Generator().manual_seed(seed),
    )
    validate = val_set is not None and len(val_set) > 0

    result = PoseTrainResult(model)
    best_val = -1.0
    best_state: dict[str, torch.Tensor] | None = None
    for epoch in range(1, settings.epochs + 1):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        total, batches = 0.0, 0
        for batch in loader:
            optimizer.zero_grad(set_to_none=True)
            pred = run_pose_model(model, batch["images"], device)
            loss = masked_mse(pred, batch["target"].to(device), batch["weight"].to(device))
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            batches += 1
            result.steps += 1
            if settings.max_steps and result.steps >= settings.max_steps:
                break
        scheduler.step()

        val_pckh = float("nan")
        if validate:
            assert val_set is not None
            val_pckh = evaluate_pose_model(
                model, val_set, batch_size=settings.batch_size, device=device,
            ).report.total
            if val_pckh > best_val:
                best_val = val_pckh
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
        stats = PoseEpoch(epoch, total / max(batches, 1), lr, val_pckh)
        result.history.append(stats)
        logger.info(
            "Epoch %d/%d: loss %.6f  lr %.2e  val PCKh %.2f",
            epoch, settings.epochs, stats.train_loss, lr, val_pckh,
        )
        if on_epoch is not None:
            on_epoch(stats)
        if settings.max_steps and result.steps >= settings.max_steps:
            logger.info("Reached %d optimiser steps", result.steps)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
        logger.info("Restored epoch %d weights (val PCKh %.2f)", result.best_epoch, best_val)
    else:
        result.best_epoch = result.history[-1].epoch
    return result
