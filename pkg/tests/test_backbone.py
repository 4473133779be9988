"""Backbone shape law, stage splicing and gradient correctness."""

import pytest
import torch

from bedpose.errors import ConfigError, ModelInputError
from bedpose.models import Modality
from bedpose.nets.backbone import (
    FUSABLE_STAGES,
    BackboneConfig,
    BranchFeatureSet,
    build_backbone,
)


class TestShapeLaw:
    """Branch b at stage k has C*2^b channels at S/(4*2^b) resolution."""

    @pytest.mark.parametrize("preset", BackboneConfig.preset_names())
    @pytest.mark.parametrize("stage", FUSABLE_STAGES)
    def test_branch_shapes(self, preset, stage):
        config = BackboneConfig.preset(preset, input_size=64)
        model = build_backbone(config, Modality.LWIR).eval()
        with torch.no_grad():
            feats = model.forward_to_stage(torch.randn(2, 1, 64, 64), stage)
        c = config.base_channels
        expected = [(c * 2**b, 16 // 2**b, 16 // 2**b) for b in range(stage)]
        assert feats.shapes == expected
        assert feats.stage == stage
        assert feats.modality is Modality.LWIR

    @pytest.mark.parametrize("preset", BackboneConfig.preset_names())
    def test_heatmap_output(self, preset):
        config = BackboneConfig.preset(preset, input_size=64)
        model = build_backbone(config).eval()
        with torch.no_grad():
            out = model(torch.randn(2, 1, 64, 64))
        assert out.shape == (2, 14, 16, 16)

    def test_unbatched_input(self, tiny):
        model = build_backbone(tiny).eval()
        with torch.no_grad():
            out = model(torch.randn(1, 64, 64))
        assert out.shape == (14, 16, 16)

    def test_visible_takes_three_channels(self):
        config = BackboneConfig.preset("tiny", input_channels=3, input_size=64)
        model = build_backbone(config, Modality.VISIBLE).eval()
        with torch.no_grad():
            assert model(torch.randn(1, 3, 64, 64)).shape == (1, 14, 16, 16)

    def test_wrong_input_shape(self, tiny):
        model = build_backbone(tiny)
        with pytest.raises(ModelInputError):
            model(torch.randn(1, 3, 64, 64))
        with pytest.raises(ModelInputError):
            model(torch.randn(1, 1, 32, 32))

    @pytest.mark.parametrize("stage", [1, 4])
    def test_unfusable_stage(self, tiny, stage):
        model = build_backbone(tiny)
        with pytest.raises(ConfigError):
            model.forward_to_stage(torch.randn(1, 1, 64, 64), stage)

    def test_input_size_must_divide_by_32(self):
        with pytest.raises(ConfigError):
            BackboneConfig.preset("tiny", input_size=48)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            BackboneConfig.preset("w64")

    def test_modality_channel_mismatch(self, tiny):
        with pytest.raises(ConfigError):
            build_backbone(tiny, Modality.VISIBLE)

    def test_input_channels_only_change_first_conv(self):
        """N=3 and N=1 differ by exactly 2 * 9 * stem_channels weights."""
        one = build_backbone(BackboneConfig.preset("tiny", input_channels=1, input_size=64))
        three = build_backbone(BackboneConfig.preset("tiny", input_channels=3, input_size=64))
        assert three.num_parameters() - one.num_parameters() == 2 * 9 * 16

    @pytest.mark.parametrize(("preset", "expected"), [
        ("w32", 28_534_862),
        ("w48", 63_594_446),
        ("tiny", 185_390),
    ])
    def test_parameter_count(self, preset, expected):
        model = build_backbone(BackboneConfig.preset(preset, input_size=64))
        assert model.num_parameters() == expected

    def test_parameter_count_rgb(self):
        config = BackboneConfig.preset("w32", input_channels=3, input_size=64)
        assert build_backbone(config, Modality.VISIBLE).num_parameters() == 28_536_014


class TestStageSplice:
    """forward_from_stage(forward_to_stage(x, N), N) reproduces forward(x)."""

    @pytest.mark.parametrize("stage", FUSABLE_STAGES)
    def test_bit_exact(self, tiny, stage):
        torch.manual_seed(0)
        model = build_backbone(tiny).eval()
        x = torch.randn(2, 1, 64, 64)
        with torch.no_grad():
            full = model(x)
            spliced = model.forward_from_stage(model.forward_to_stage(x, stage), stage)
        assert torch.equal(full, spliced)

    def test_rejects_wrong_branch_count(self, tiny):
        model = build_backbone(tiny).eval()
        with torch.no_grad():
            feats = model.forward_to_stage(torch.randn(1, 1, 64, 64), 3)
        truncated = BranchFeatureSet(3, feats.features[:2])
        with pytest.raises(ModelInputError):
            model.forward_from_stage(truncated, 3)

    def test_rejects_wrong_branch_shape(self, tiny):
        model = build_backbone(tiny).eval()
        with torch.no_grad():
            feats = model.forward_to_stage(torch.randn(1, 1, 64, 64), 2)
        bad = feats.replace([feats[0], torch.zeros(1, 16, 4, 4)])
        with pytest.raises(ModelInputError):
            model.forward_from_stage(bad, 2)

    def test_header_round_trip(self, tiny):
        assert BackboneConfig.from_header(tiny.to_header()) == tiny


class TestGradient:
    """Autograd matches central finite differences in double precision."""

    def test_finite_differences(self):
        config = BackboneConfig.preset("tiny", base_channels=4, input_size=32)
        torch.manual_seed(3)
        model = build_backbone(config).double().eval()
        with torch.no_grad():
            for p in model.parameters():
                p.normal_(0.0, 0.3)
        x = torch.randn(1, 1, 32, 32, dtype=torch.float64)
        cotangent = torch.randn(1, 14, 8, 8, dtype=torch.float64)

        def loss() -> torch.Tensor:
            return (model(x) * cotangent).sum()

        params = [p for p in model.parameters() if p.dim() == 4]
        picks = [params[0], params[len(params) // 4], params[len(params) // 2],
                 params[3 * len(params) // 4], params[-1]]
        model.zero_grad()
        loss().backward()
        eps = 1e-6
        for p in picks:
            analytic = p.grad.view(-1)[0].item()
            flat = p.data.view(-1)
            original = flat[0].item()
            with torch.no_grad():
                flat[0] = original + eps
                up = loss().item()
                flat[0] = original - eps
                down = loss().item()
                flat[0] = original
            numeric = (up - down) / (2 * eps)
            assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-6
