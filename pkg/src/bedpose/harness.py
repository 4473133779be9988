"""Experiment commands: uni-modal training, fusion training, cGAN training, evaluation.

Each command reads an ``ExperimentConfig``, writes its artefacts under ``config.out``
and finishes with ``manifest.json`` and ``report.md``.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd
from torch import nn

from bedpose.config import ExperimentConfig
from bedpose.data.layout import ChannelStats, SlpDataset, load_slp_layout
from bedpose.data.preprocess import prepare_translation_pairs
from bedpose.errors import ConfigError, LoadError, ReportError
from bedpose.manifest import RunManifest, start_run
from bedpose.metrics import pckh_table, write_table
from bedpose.models import Modality, PckhReport
from bedpose.nets.backbone import Backbone, build_backbone
from bedpose.nets.checkpoint import (
    KIND_BACKBONE,
    KIND_FUSED,
    load_backbone,
    load_checkpoint,
    load_fused,
    save_backbone,
    save_fused,
    save_translator,
)
from bedpose.nets.fusion import FusedModel, build_fused_model
from bedpose.plots import plot_series
from bedpose.reconstruction import TranslationResult, translate_any
from bedpose.report import write_report
from bedpose.training import (
    Evaluation,
    PoseDataset,
    PoseTrainResult,
    dataset_stats,
    evaluate_pose_model,
    fit_pose_model,
    make_pose_dataset,
    model_modalities,
    render_overlays,
    seed_everything,
)

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"


@dataclass(slots=True)
class RunResult:
    manifest: RunManifest
    reports: dict[str, PckhReport] = field(default_factory=dict)
    checkpoints: dict[str, Path] = field(default_factory=dict)
    table: pd.DataFrame | None = None
    translation: TranslationResult | None = None


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def stats_header(stats: Mapping[Modality, ChannelStats]) -> dict[str, Any]:
    return {m.value: {"mean": list(s.mean), "std": list(s.std)} for m, s in stats.items()}


def stats_from_header(header: Mapping[str, Any]) -> dict[Modality, ChannelStats]:
    raw = header.get("stats") or {}
    return {
        Modality.parse(name): ChannelStats(tuple(v["mean"]), tuple(v["std"]))
        for name, v in raw.items()
    }


def _open(config: ExperimentConfig, modalities: tuple[Modality, ...], root: str = "") -> SlpDataset:
    return load_slp_layout(
        Path(root) if root else config.require_root(), modalities, config.dataset.covers,
    )


def _pose_splits(
    config: ExperimentConfig,
    dataset: SlpDataset,
    stats: Mapping[Modality, ChannelStats],
    input_size: int,
) -> tuple[PoseDataset, PoseDataset, PoseDataset]:
    """(fit, validation, test) pose datasets over the default subject split."""
    split = dataset.split()
    opts: dict[str, Any] = {
        "input_size": input_size,
        "square": config.dataset.square_crop,
        "sigma": config.dataset.sigma,
    }
    limit = config.dataset.max_samples
    return (
        make_pose_dataset(dataset, split.fit_subjects, stats, max_samples=limit, **opts),
        make_pose_dataset(dataset, split.validation_subjects, stats, **opts),
        make_pose_dataset(dataset, split.test_subjects, stats, **opts),
    )


def _write_losses(manifest: RunManifest, frame: pd.DataFrame, name: str = "losses") -> Path:
    path = manifest.out_dir / f"{name}.csv"
    frame.to_csv(path, index=False, float_format="%.6f")
    manifest.add(name, path)
    return path


def _write_evaluation(
    manifest: RunManifest, evaluation: Evaluation, column: str, suffix: str = "",
) -> pd.DataFrame:
    table = evaluation.report.to_frame(column)
    manifest.add(f"metrics{suffix}", write_table(table, manifest.out_dir / f"metrics{suffix}.csv"))
    manifest.add(f"l2{suffix}", write_table(evaluation.l2, manifest.out_dir / f"l2{suffix}.csv"))
    return table


def _finish(result: RunResult, threshold: float) -> RunResult:
    write_report(result.manifest, result.table, threshold)
    result.manifest.write()
    return result


def _input_size(model: nn.Module) -> int:
    if isinstance(model, FusedModel):
        return model.backbone_config.input_size
    return model.config.input_size  # type: ignore[union-attr]


# ---------------------------------------------------------------------------
# train-unimodal
# ---------------------------------------------------------------------------

def train_unimodal(config: ExperimentConfig) -> RunResult:
    """Train one backbone on a single modality and evaluate it on the test split."""
    modalities = config.dataset.modalities
    if len(modalities) != 1:
        raise ConfigError(
            f"train-unimodal needs exactly one dataset.modalities entry, got {len(modalities)}"
        )
    modality = modalities[0]
    seed_everything(config.seed)
    manifest = start_run("train-unimodal", config.snapshot(), config.out)

    dataset = _open(config, modalities)
    stats = dataset_stats(dataset)
    backbone = build_backbone(config.backbone.build(modality), modality)
    fit, val, test = _pose_splits(config, dataset, stats, backbone.config.input_size)
    logger.info(
        "Training %s backbone on %d samples (%d validation, %d test)",
        modality.value, len(fit), len(val), len(test),
    )
    trained = fit_pose_model(backbone, fit, config.train, seed=config.seed, val_set=val)

    path = save_backbone(
        manifest.out_dir / CHECKPOINT_DIR / f"backbone_{modality.value}.pt", backbone,
        extra=_checkpoint_extra(config, stats, trained),
    )
    manifest.add("checkpoint", path)
    _write_losses(manifest, trained.losses_frame())

    evaluation = evaluate_pose_model(
        backbone, test, threshold=config.eval.threshold, total=config.eval.total,
        batch_size=config.train.batch_size, device=config.train.device,
    )
    table = _write_evaluation(manifest, evaluation, modality.value)
    logger.info("%s test PCKh@%.1f: %.2f", modality.value, config.eval.threshold,
                evaluation.report.total)
    result = RunResult(manifest, {modality.value: evaluation.report}, {"checkpoint": path}, table)
    return _finish(result, config.eval.threshold)


def _checkpoint_extra(
    config: ExperimentConfig, stats: Mapping[Modality, ChannelStats], trained: PoseTrainResult,
) -> dict[str, Any]:
    return {
        "stats": stats_header(stats),
        "square_crop": config.dataset.square_crop,
        "seed": config.seed,
        "best_epoch": trained.best_epoch,
    }


# ---------------------------------------------------------------------------
# train-fusion
# ---------------------------------------------------------------------------

def _fusion_backbones(
    config: ExperimentConfig, group: tuple[Modality, ...],
) -> tuple[dict[Modality, Backbone], dict[Modality, ChannelStats]]:
    """Backbones per modality: from ``fusion.checkpoints`` or freshly initialised."""
    strategy = config.fusion.strategy
    backbones: dict[Modality, Backbone] = {}
    stats: dict[Modality, ChannelStats] = {}
    for modality in group:
        raw = config.fusion.checkpoint_for(modality)
        if not raw:
            if strategy.frozen:
                raise ConfigError(
                    f"fusion.strategy {strategy.value} needs a uni-modal checkpoint for "
                    f"{modality.value} in fusion.checkpoints"
                )
            backbones[modality] = build_backbone(config.backbone.build(modality), modality)
            continue
        path = Path(raw)
        if not path.is_file():
            raise ConfigError(f"fusion checkpoint for {modality.value} not found: {path}")
        backbone = load_backbone(path)
        if backbone.modality is not modality:
            found = backbone.modality.value if backbone.modality else "none"
            raise ConfigError(f"{path} holds a {found} backbone, expected {modality.value}")
        backbones[modality] = backbone
        stats.update(stats_from_header(load_checkpoint(path).header))
    return backbones, stats


def train_fusion(config: ExperimentConfig) -> RunResult:
    """Train one fused model per modality group (``fusion.modalities`` or ``fusion.pairs``)."""
    groups = config.fusion.groups()
    seed_everything(config.seed)
    manifest = start_run("train-fusion", config.snapshot(), config.out)
    result = RunResult(manifest)
    multi = len(groups) > 1

    for group in groups:
        label = "-".join(m.value for m in group)
        fusion = config.fusion.build(group)
        backbones, stats = _fusion_backbones(config, group)
        model = build_fused_model(fusion, backbones, seed=config.seed)

        dataset = _open(config, group)
        if any(m not in stats for m in group):
            computed = dataset_stats(dataset)
            stats = {m: stats.get(m, computed[m]) for m in group}
        fit, val, test = _pose_splits(config, dataset, stats, model.backbone_config.input_size)
        logger.info("Training %s fusion on %d samples", label, len(fit))
        trained = fit_pose_model(model, fit, config.train, seed=config.seed, val_set=val)

        suffix = f"_{label}" if multi else ""
        path = save_fused(
            manifest.out_dir / CHECKPOINT_DIR / f"fused_{label}.pt", model,
            extra=_checkpoint_extra(config, stats, trained),
        )
        manifest.add(f"checkpoint{suffix}", path)
        result.checkpoints[label] = path
        _write_losses(manifest, trained.losses_frame(), f"losses{suffix}")

        evaluation = evaluate_pose_model(
            model, test, threshold=config.eval.threshold, total=config.eval.total,
            batch_size=config.train.batch_size, device=config.train.device,
        )
        result.reports[label] = evaluation.report
        l2_path = write_table(evaluation.l2, manifest.out_dir / f"l2{suffix}.csv")
        manifest.add(f"l2{suffix}", l2_path)
        logger.info("%s fusion test PCKh: %.2f", label, evaluation.report.total)

    table = pckh_table(result.reports)
    manifest.add("metrics", write_table(table, manifest.out_dir / "metrics.csv"))
    if multi:
        table = table.assign(Average=table.mean(axis=1))
        manifest.add("pairs", write_table(table, manifest.out_dir / "pairs.csv"))
    result.table = table
    return _finish(result, config.eval.threshold)


# ---------------------------------------------------------------------------
# train-cgan
# ---------------------------------------------------------------------------

def train_cgan(config: ExperimentConfig) -> RunResult:
    """Train the source -> target translator on training-subject pairs."""
    gan = config.gan
    seed_everything(config.seed)
    manifest = start_run("train-cgan", config.snapshot(), config.out)

    dataset = _open(config, (gan.source, gan.target))
    train = dataset.subset(dataset.split().train_subjects)
    pairs = prepare_translation_pairs(
        train, source=gan.source, target=gan.target, image_size=gan.image_size,
    )
    if config.dataset.max_samples > 0:
        pairs = pairs[: config.dataset.max_samples]
    trained = translate_any(
        pairs, gan.source, gan.target, gan, seed=config.seed, device=config.train.device,
    )

    path = save_translator(
        manifest.out_dir / CHECKPOINT_DIR / "translator.pt",
        trained.generator, trained.discriminator, gan.to_header(),
        extra={"seed": config.seed, "pairs": len(pairs)},
    )
    manifest.add("checkpoint", path)
    _write_losses(manifest, trained.losses_frame())
    try:
        manifest.add("losses_plot", plot_series(
            [("generator L1", trained.losses_frame())], "g_l1", manifest.out_dir / "losses.png",
        ))
    except Exception:
        logger.exception("Failed to plot the generator loss curve")
    result = RunResult(manifest, checkpoints={"checkpoint": path}, translation=trained)
    return _finish(result, config.eval.threshold)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def load_pose_checkpoint(path: str | Path) -> tuple[nn.Module, dict[str, Any]]:
    """A backbone or fused model plus its checkpoint header."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    header = load_checkpoint(path).header
    if header["kind"] == KIND_BACKBONE:
        return load_backbone(path), header
    if header["kind"] == KIND_FUSED:
        return load_fused(path), header
    raise ConfigError(f"{path} is a {header['kind']} checkpoint, not a pose model")


def evaluate(config: ExperimentConfig) -> RunResult:
    """Score a pose checkpoint on ``eval.split`` of ``dataset.eval_root`` (or ``dataset.root``)."""
    if not config.eval.checkpoint:
        raise ConfigError("eval.checkpoint is required")
    seed_everything(config.seed)
    manifest = start_run("evaluate", config.snapshot(), config.out)
    model, header = load_pose_checkpoint(config.eval.checkpoint)
    modalities = model_modalities(model)

    root = config.dataset.eval_root or config.dataset.root
    try:
        dataset = _open(config, modalities, root)
    except LoadError as exc:
        raise LoadError(
            f"checkpoint needs {','.join(m.value for m in modalities)}: {exc}"
        ) from exc
    stats = stats_from_header(header)
    if not all(m in stats for m in modalities):
        stats = dataset_stats(dataset)
    square = bool(header.get("square_crop", config.dataset.square_crop))

    subjects = dataset.split().subjects(config.eval.split)
    data = make_pose_dataset(
        dataset, subjects, stats,
        input_size=_input_size(model), square=square, sigma=config.dataset.sigma,
    )
    if len(data) == 0:
        raise ReportError(f"split {config.eval.split!r} of {dataset.root} has no samples")
    evaluation = evaluate_pose_model(
        model, data, threshold=config.eval.threshold, total=config.eval.total,
        batch_size=config.train.batch_size, device=config.train.device,
    )
    table = _write_evaluation(manifest, evaluation, config.eval.split)
    logger.info("%s PCKh@%.1f on %s: %.2f", config.eval.split, config.eval.threshold,
                dataset.root, evaluation.report.total)

    if config.eval.overlays > 0:
        for i, path in enumerate(render_overlays(
            data, evaluation, manifest.out_dir / "overlays", config.eval.overlays,
        )):
            manifest.add(f"overlay_{i:03d}", path)
    result = RunResult(manifest, {config.eval.split: evaluation.report}, table=table)
    return _finish(result, config.eval.threshold)
