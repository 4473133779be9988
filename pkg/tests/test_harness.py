"""Experiment commands on tiny networks and quarter-resolution synthetic data."""

import numpy as np
import pandas as pd
import pytest
import torch

from bedpose.config import ExperimentConfig, TrainSettings
from bedpose.data.layout import load_slp_layout, load_stats
from bedpose.data.synthetic import generate_synthetic_dataset
from bedpose.errors import ConfigError, LoadError, ReportError
from bedpose.harness import (
    evaluate,
    load_pose_checkpoint,
    train_cgan,
    train_fusion,
    train_unimodal,
)
from bedpose.manifest import RunManifest
from bedpose.metrics import aggregate_pckh, pckh
from bedpose.models import JOINT_NAMES, Cover, Modality
from bedpose.nets.backbone import BackboneConfig, build_backbone
from bedpose.pipeline import FULL_COLUMN, SQUARE_COLUMN, run_synthetic_visible_pipeline
from bedpose.training import fit_pose_model, make_pose_dataset, predict

TABLE_ROWS = list(JOINT_NAMES) + ["Total"]


def _config(out, root, **extra) -> ExperimentConfig:
    data = {
        "seed": 0,
        "out": str(out),
        "dataset.root": str(root),
        "dataset.covers": ["uncover", "cover1"],
        "backbone.preset": "tiny",
        "backbone.input_size": 64,
        "train.epochs": 1,
        "train.batch_size": 4,
        **extra,
    }
    return ExperimentConfig.from_mapping(data)


@pytest.fixture(scope="module")
def runs_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="module")
def unimodal(home_root, runs_dir):
    return {
        m: train_unimodal(_config(runs_dir / f"uni_{m.value}", home_root,
                                  **{"dataset.modalities": [m.value]}))
        for m in (Modality.VISIBLE, Modality.LWIR)
    }


@pytest.fixture(scope="module")
def fused(home_root, runs_dir):
    return train_fusion(_config(
        runs_dir / "fusion", home_root,
        **{"fusion.modalities": ["visible", "lwir"], "fusion.stage": 3,
           "fusion.type": "concatenation", "fusion.strategy": "end_to_end"},
    ))


@pytest.fixture(scope="module")
def translator(home_root, runs_dir):
    return train_cgan(_config(
        runs_dir / "cgan", home_root,
        **{"gan.ngf": 8, "gan.ndf": 8, "gan.image_size": 32,
           "gan.epochs_total": 1, "gan.lr_constant_epochs": 1},
    ))


# ═══════════════════════════════════════════════════════════════════════════
# train-unimodal / evaluate
# ═══════════════════════════════════════════════════════════════════════════

class TestUnimodal:
    def test_artefacts(self, unimodal):
        result = unimodal[Modality.LWIR]
        manifest = RunManifest.load(result.manifest.out_dir)
        assert {"checkpoint", "losses", "metrics", "l2", "report"} <= set(manifest.artifacts)
        manifest.verify()
        table = pd.read_csv(manifest.resolve("metrics"), index_col="Joint")
        assert list(table.index) == TABLE_ROWS
        assert list(table.columns) == ["lwir"]
        losses = pd.read_csv(manifest.resolve("losses"))
        assert list(losses.columns) == ["epoch", "train_loss", "lr", "val_pckh"]
        report = manifest.resolve("report").read_text()
        assert "train-unimodal" in report and "Right Ankle" in report

    def test_checkpoint_carries_stats(self, unimodal):
        model, header = load_pose_checkpoint(unimodal[Modality.VISIBLE].checkpoints["checkpoint"])
        assert model.modality is Modality.VISIBLE
        assert set(header["stats"]) == {"visible"}
        assert len(header["stats"]["visible"]["mean"]) == 3

    def test_needs_one_modality(self, home_root, tmp_path):
        config = _config(tmp_path, home_root, **{"dataset.modalities": ["visible", "lwir"]})
        with pytest.raises(ConfigError):
            train_unimodal(config)

    def test_evaluate_matches_training_report(self, unimodal, home_root, tmp_path):
        trained = unimodal[Modality.LWIR]
        config = _config(
            tmp_path / "eval", home_root,
            **{"eval.checkpoint": str(trained.checkpoints["checkpoint"]), "eval.overlays": 2},
        )
        result = evaluate(config)
        assert result.reports["test"].total == pytest.approx(trained.reports["lwir"].total)
        overlays = sorted((tmp_path / "eval" / "overlays").glob("*.png"))
        assert [p.name for p in overlays] == [
            "00003_000001_uncover_lwir.png", "00003_000002_uncover_lwir.png",
        ]

    def test_evaluate_empty_split(self, unimodal, home_root, tmp_path):
        config = _config(
            tmp_path, home_root,
            **{"eval.checkpoint": str(unimodal[Modality.LWIR].checkpoints["checkpoint"]),
               "eval.split": "val"},
        )
        with pytest.raises(ReportError):
            evaluate(config)

    def test_evaluate_on_root_without_modality(self, unimodal, tmp_path):
        other = generate_synthetic_dataset(
            tmp_path / "visible_only", 2, 1, seed=0,
            modalities=(Modality.VISIBLE,), covers=(Cover.UNCOVERED,), scale=0.25,
        )
        config = _config(
            tmp_path / "eval", other,
            **{"eval.checkpoint": str(unimodal[Modality.LWIR].checkpoints["checkpoint"]),
               "dataset.covers": ["uncover"]},
        )
        with pytest.raises(LoadError, match="lwir"):
            evaluate(config)

    def test_evaluate_missing_checkpoint(self, home_root, tmp_path):
        with pytest.raises(ConfigError):
            evaluate(_config(tmp_path, home_root))
        with pytest.raises(ConfigError):
            evaluate(_config(tmp_path, home_root, **{"eval.checkpoint": str(tmp_path / "x.pt")}))


# ═══════════════════════════════════════════════════════════════════════════
# train-fusion
# ═══════════════════════════════════════════════════════════════════════════

class TestFusionRuns:
    def test_end_to_end(self, fused):
        table = pd.read_csv(fused.manifest.resolve("metrics"), index_col="Joint")
        assert list(table.index) == TABLE_ROWS
        assert list(table.columns) == ["visible-lwir"]
        assert 0.0 <= fused.reports["visible-lwir"].total <= 100.0

    def test_frozen_from_unimodal_checkpoints(self, unimodal, home_root, tmp_path):
        checkpoints = {m.value: str(r.checkpoints["checkpoint"]) for m, r in unimodal.items()}
        result = train_fusion(_config(
            tmp_path, home_root,
            **{"fusion.modalities": ["visible", "lwir"], "fusion.strategy": "frozen_weighted",
               "fusion.type": "addition", "fusion.stage": 2, "fusion.checkpoints": checkpoints},
        ))
        model, _ = load_pose_checkpoint(result.checkpoints["visible-lwir"])
        source, _ = load_pose_checkpoint(checkpoints["lwir"])
        for a, b in zip(model.extractor(Modality.LWIR).stem.parameters(),
                        source.stem.parameters(), strict=True):
            assert torch.equal(a, b)

    def test_frozen_needs_checkpoints(self, home_root, tmp_path):
        config = _config(
            tmp_path, home_root,
            **{"fusion.modalities": ["visible", "lwir"], "fusion.strategy": "frozen_plain"},
        )
        with pytest.raises(ConfigError):
            train_fusion(config)

    def test_pair_sweep(self, full_root, tmp_path):
        result = train_fusion(_config(
            tmp_path, full_root,
            **{"dataset.covers": ["uncover", "cover1", "cover2"],
               "fusion.pairs": [["lwir", "depth"], ["lwir", "pressure"]]},
        ))
        pairs = pd.read_csv(result.manifest.resolve("pairs"), index_col="Joint")
        assert list(pairs.columns) == ["lwir-depth", "lwir-pressure", "Average"]
        np.testing.assert_allclose(
            pairs["Average"], pairs[["lwir-depth", "lwir-pressure"]].mean(axis=1), atol=1e-3,
        )


# ═══════════════════════════════════════════════════════════════════════════
# train-cgan / reconstruct-eval
# ═══════════════════════════════════════════════════════════════════════════

class TestReconstruction:
    def test_translator_artefacts(self, translator):
        manifest = RunManifest.load(translator.manifest.out_dir)
        assert {"checkpoint", "losses", "losses_plot", "report"} <= set(manifest.artifacts)
        losses = pd.read_csv(manifest.resolve("losses"))
        assert list(losses.columns) == ["epoch", "g_l1", "g_adv", "d_loss", "lr"]

    def test_synthetic_visible_table(self, fused, translator, home_root, tmp_path):
        config = _config(
            tmp_path, home_root,
            **{"eval.gan_checkpoint": str(translator.checkpoints["checkpoint"]),
               "eval.fusion_checkpoint": str(fused.checkpoints["visible-lwir"])},
        )
        result = run_synthetic_visible_pipeline(config)
        table = pd.read_csv(result.manifest.resolve("metrics"), index_col="Joint")
        assert list(table.index) == TABLE_ROWS
        assert list(table.columns) == [SQUARE_COLUMN, FULL_COLUMN]
        assert table.notna().all().all()

    def test_total_mode_reaches_aggregation(self, fused, translator, home_root, tmp_path,
                                            monkeypatch):
        modes = []

        def recording(results, **kwargs):
            modes.append(kwargs.get("total"))
            return aggregate_pckh(results, **kwargs)

        monkeypatch.setattr("bedpose.pipeline.aggregate_pckh", recording)
        config = _config(
            tmp_path, home_root,
            **{"eval.total": "instances",
               "eval.gan_checkpoint": str(translator.checkpoints["checkpoint"]),
               "eval.fusion_checkpoint": str(fused.checkpoints["visible-lwir"])},
        )
        run_synthetic_visible_pipeline(config)
        assert modes == ["instances", "instances"]

    def test_requires_checkpoints(self, home_root, tmp_path):
        with pytest.raises(ConfigError):
            run_synthetic_visible_pipeline(_config(tmp_path, home_root))


# ═══════════════════════════════════════════════════════════════════════════
# Long-running acceptance checks
# ═══════════════════════════════════════════════════════════════════════════

@pytest.mark.slow
class TestAcceptance:
    def test_overfit_small_set(self, tmp_path):
        root = generate_synthetic_dataset(
            tmp_path / "data", 16, 4, seed=1,
            modalities=(Modality.LWIR,), covers=(Cover.UNCOVERED,), scale=0.5,
        )
        dataset = load_slp_layout(root, (Modality.LWIR,), (Cover.UNCOVERED,))
        data = make_pose_dataset(
            dataset, dataset.subjects, load_stats(root),
            input_size=128, square=True, sigma=2.0,
        )
        assert len(data) == 64
        model = build_backbone(BackboneConfig.preset("tiny", input_size=128), Modality.LWIR)
        settings = TrainSettings(
            epochs=200, batch_size=16, lr=1e-3, lr_milestones=(), max_steps=200,
        )
        fit_pose_model(model, data, settings, seed=0)
        preds, gts = predict(model, data, batch_size=16)
        results = [pckh(p, g) for p, g in zip(preds, gts, strict=True)]
        assert aggregate_pckh(results).total >= 90.0

    def test_end_to_end_is_deterministic(self, tmp_path):
        root = generate_synthetic_dataset(
            tmp_path / "data", 6, 2, seed=5,
            modalities=(Modality.VISIBLE, Modality.LWIR),
            covers=(Cover.UNCOVERED, Cover.COVER1), scale=0.25,
        )

        def pipeline(out):
            checkpoints = {
                m: str(train_unimodal(_config(
                    out / f"uni_{m}", root, **{"dataset.modalities": [m]},
                )).checkpoints["checkpoint"])
                for m in ("visible", "lwir")
            }
            fusion = train_fusion(_config(
                out / "fusion", root,
                **{"fusion.modalities": ["visible", "lwir"], "fusion.checkpoints": checkpoints},
            ))
            gan = train_cgan(_config(
                out / "cgan", root,
                **{"gan.ngf": 8, "gan.ndf": 8, "gan.image_size": 32,
                   "gan.epochs_total": 2, "gan.lr_constant_epochs": 1},
            ))
            return run_synthetic_visible_pipeline(_config(
                out / "eval", root,
                **{"eval.gan_checkpoint": str(gan.checkpoints["checkpoint"]),
                   "eval.fusion_checkpoint": str(fusion.checkpoints["visible-lwir"])},
            ))

        first = pipeline(tmp_path / "a")
        second = pipeline(tmp_path / "b")
        a = first.manifest.resolve("metrics").read_text()
        b = second.manifest.resolve("metrics").read_text()
        assert a == b
        assert list(first.table.columns) == [SQUARE_COLUMN, FULL_COLUMN]

    def test_full_frame_scores_at_least_square_crop(self, tmp_path):
        root = generate_synthetic_dataset(
            tmp_path / "data", 5, 6, seed=2,
            modalities=(Modality.VISIBLE, Modality.LWIR), covers=(Cover.UNCOVERED,), scale=0.5,
        )
        common = {"dataset.covers": ["uncover"], "backbone.input_size": 128}
        square, full = [], []
        for seed in (0, 1, 2):
            out = tmp_path / f"seed{seed}"
            fusion = train_fusion(_config(
                out / "fusion", root,
                **{**common, "seed": seed, "train.epochs": 60, "train.batch_size": 8,
                   "fusion.modalities": ["visible", "lwir"], "fusion.primary": "lwir",
                   "fusion.type": "concatenation", "fusion.strategy": "end_to_end"},
            ))
            gan = train_cgan(_config(
                out / "cgan", root,
                **{**common, "seed": seed,
                   "gan.ngf": 8, "gan.ndf": 8, "gan.image_size": 32,
                   "gan.epochs_total": 10, "gan.lr_constant_epochs": 5},
            ))
            result = run_synthetic_visible_pipeline(_config(
                out / "eval", root,
                **{**common, "seed": seed, "eval.split": "train",
                   "eval.gan_checkpoint": str(gan.checkpoints["checkpoint"]),
                   "eval.fusion_checkpoint": str(fusion.checkpoints["visible-lwir"])},
            ))
            square.append(result.reports[SQUARE_COLUMN].total)
            full.append(result.reports[FULL_COLUMN].total)
        assert np.mean(full) >= np.mean(square)
