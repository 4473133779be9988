"""Synthetic-visible evaluation: LWIR -> translator -> white composite -> fused pose model.

The fused visible/LWIR model sees the generated visible image in place of a real
one. Both cropping variants are scored: the joint-derived square and the full frame.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch

from bedpose.config import ExperimentConfig
from bedpose.data.layout import ChannelStats, SlpDataset, load_slp_layout
from bedpose.data.preprocess import (
    PoseInput,
    composite_on_white,
    crop_for_translation,
    prepare_pose_input,
    translation_bbox,
)
from bedpose.errors import ConfigError, ReportError
from bedpose.harness import RunResult, stats_from_header
from bedpose.manifest import start_run
from bedpose.metrics import (
    aggregate_pckh,
    decode_batch,
    pckh,
    pckh_table,
    write_table,
)
from bedpose.models import Modality, MultimodalSample, PckhReport, Skeleton
from bedpose.nets.checkpoint import KIND_FUSED, load_checkpoint, load_fused, load_translator
from bedpose.nets.fusion import FusedModel
from bedpose.nets.pix2pix import UNetGenerator
from bedpose.reconstruction import translate
from bedpose.report import write_report

logger = logging.getLogger(__name__)

SQUARE_COLUMN = "Square BB"
FULL_COLUMN = "Without BB"


def _require(path: str, name: str) -> Path:
    if not path:
        raise ConfigError(f"{name} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{name} not found: {p}")
    return p


def synthesize_sample(
    sample: MultimodalSample,
    dataset: SlpDataset,
    generator: UNetGenerator,
    *,
    source: Modality,
    target: Modality,
    image_size: int,
) -> MultimodalSample:
    """Replace the target image with the translator's output composited on white."""
    spec = dataset.alignment
    bbox = translation_bbox(sample, spec, target)
    to_target = spec.from_reference(target) @ spec.to_reference(source)
    crop = crop_for_translation(sample.images[source], to_target, bbox, image_size)
    generated = translate(generator, crop[None])[0]
    canvas = composite_on_white(generated, bbox, spec.frame_size(target))
    return MultimodalSample(
        images={target: canvas, source: sample.images[source]},
        joints=sample.joints,
        cover=sample.cover,
        subject_id=sample.subject_id,
        pose_id=sample.pose_id,
        joint_frame=sample.joint_frame,
    )


@torch.no_grad()
def _score(
    model: FusedModel,
    inputs: Sequence[PoseInput],
    batch_size: int,
    threshold: float,
    total: str = "joints",
) -> PckhReport:
    model.eval()
    results: list[np.ndarray | None] = []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start:start + batch_size]
        images = {
            m: torch.from_numpy(np.stack([p.images[m] for p in chunk]))
            for m in model.config.modalities
        }
        preds = decode_batch(model(images))
        results.extend(pckh(pred, Skeleton(p.joints), threshold) for pred, p in zip(preds, chunk))
    return aggregate_pckh(results, threshold=threshold, total=total)  # type: ignore[arg-type]


def run_synthetic_visible_pipeline(config: ExperimentConfig) -> RunResult:
    """Score a fused visible/LWIR model on translator-generated visible images."""
    gan_path = _require(config.eval.gan_checkpoint, "eval.gan_checkpoint")
    fusion_path = _require(config.eval.fusion_checkpoint, "eval.fusion_checkpoint")
    torch.manual_seed(config.seed)
    manifest = start_run("reconstruct-eval", config.snapshot(), config.out)

    generator, _, gan_cfg = load_translator(gan_path)
    source, target = Modality.parse(gan_cfg["source"]), Modality.parse(gan_cfg["target"])
    header = load_checkpoint(fusion_path, KIND_FUSED).header
    model = load_fused(fusion_path)
    if set(model.config.modalities) != {source, target}:
        raise ConfigError(
            f"fusion model covers {','.join(m.value for m in model.config.modalities)}, "
            f"translator produces {source.value}->{target.value}"
        )
    stats: dict[Modality, ChannelStats] = stats_from_header(header)
    if not all(m in stats for m in (source, target)):
        raise ConfigError(
            f"{fusion_path} carries no channel statistics for {source.value}/{target.value}"
        )

    root = config.dataset.eval_root or config.require_root()
    dataset = load_slp_layout(root, (source,), config.dataset.covers)
    subset = dataset.subset(dataset.split().subjects(config.eval.split))
    refs = subset.refs[: config.dataset.max_samples or None]
    if not refs:
        raise ReportError(f"split {config.eval.split!r} of {dataset.root} has no samples")

    size = model.backbone_config.input_size
    spec = subset.alignment
    square: list[PoseInput] = []
    full: list[PoseInput] = []
    for ref in refs:
        sample = subset.load(ref.subject_id, ref.pose_id, ref.cover)
        synthetic = synthesize_sample(
            sample, subset, generator,
            source=source, target=target, image_size=int(gan_cfg["image_size"]),
        )
        square.append(prepare_pose_input(synthetic, spec, stats, out_size=size, square=True))
        full.append(prepare_pose_input(synthetic, spec, stats, out_size=size, square=False))
    logger.info("Synthesised %d %s images from %s", len(refs), target.value, source.value)

    threshold = config.eval.threshold
    batch = config.train.batch_size
    reports = {
        SQUARE_COLUMN: _score(model, square, batch, threshold, config.eval.total),
        FULL_COLUMN: _score(model, full, batch, threshold, config.eval.total),
    }
    table = pckh_table(reports)
    manifest.add("metrics", write_table(table, manifest.out_dir / "metrics.csv"))
    logger.info(
        "Synthetic-visible PCKh: %.2f (square BB), %.2f (without BB)",
        reports[SQUARE_COLUMN].total, reports[FULL_COLUMN].total,
    )
    result = RunResult(manifest, reports, table=table)
    write_report(manifest, table, threshold)
    manifest.write()
    return result
