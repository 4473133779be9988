"""cGAN objective, learning-rate schedule, translation networks and training loop."""

import math

import numpy as np
import pytest
import torch

from bedpose.data.layout import load_slp_layout
from bedpose.data.preprocess import prepare_translation_pairs
from bedpose.data.synthetic import generate_synthetic_dataset
from bedpose.errors import ConfigError, ModelInputError, NumericError
from bedpose.models import Cover, Modality, TranslationPair
from bedpose.nets.pix2pix import PatchDiscriminator, UNetGenerator
from bedpose.reconstruction import (
    GanObjectiveConfig,
    cgan_loss,
    discriminator_loss,
    discriminator_scores,
    discriminator_step,
    generator_adversarial_loss,
    generator_forward,
    generator_step,
    l1_loss,
    lr_at_epoch,
    to_signed,
    to_unit,
    total_generator_objective,
    train_translation,
    translate,
    translate_any,
)

SMALL = dict(ngf=8, ndf=8, image_size=32)


def _pairs(n, seed=0, size=32):
    rng = np.random.default_rng(seed)
    return [
        TranslationPair(
            source=rng.random((size, size, 1), dtype=np.float32),
            target=rng.random((size, size, 3), dtype=np.float32),
            bbox=(0.0, 0.0, float(size), float(size)),
            subject_id="00001",
            pose_id=f"{i + 1:06d}",
            cover=Cover.UNCOVERED,
        )
        for i in range(n)
    ]


class TestObjective:
    """E[log D(x,y)] + E[log(1 - D(x,G(x)))] on clamped probabilities."""

    def test_chance_level_value(self):
        half = torch.full((4, 1, 2, 2), 0.5)
        assert cgan_loss(half, half).item() == pytest.approx(2 * math.log(0.5), abs=1e-4)
        assert discriminator_loss(half, half).item() == pytest.approx(1.3863, abs=1e-4)
        assert generator_adversarial_loss(half).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_saturated_scores_stay_finite(self):
        loss = cgan_loss(torch.zeros(2, 1, 2, 2), torch.ones(2, 1, 2, 2))
        assert torch.isfinite(loss)

    @pytest.mark.parametrize("bad", [1.5, -0.1, float("nan")])
    def test_rejects_non_probabilities(self, bad):
        scores = torch.full((1, 1, 2, 2), bad)
        with pytest.raises(NumericError):
            cgan_loss(scores, torch.full((1, 1, 2, 2), 0.5))

    def test_l1(self):
        a = torch.zeros(1, 3, 4, 4)
        b = torch.full((1, 3, 4, 4), 0.25)
        assert l1_loss(a, b).item() == pytest.approx(0.25)
        with pytest.raises(ModelInputError):
            l1_loss(a, torch.zeros(1, 1, 4, 4))

    def test_lambda_weighting(self):
        assert total_generator_objective(1.0, 0.5, 100.0) == pytest.approx(51.0)

    def test_lambda_zero_removes_l1_gradient(self):
        gen = torch.rand(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        tgt = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        objective = total_generator_objective(
            torch.zeros((), dtype=torch.float64), l1_loss(gen, tgt), 0.0,
        )
        objective.backward()
        assert torch.count_nonzero(gen.grad) == 0

    def test_l1_gradient_is_scaled_sign(self):
        torch.manual_seed(1)
        gen = torch.rand(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        tgt = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        total_generator_objective(0.0, l1_loss(gen, tgt), 100.0).backward()
        expected = 100.0 * torch.sign(gen.detach() - tgt) / gen.numel()
        torch.testing.assert_close(gen.grad, expected)

    def test_unconditional_path_uses_constant_condition(self):
        torch.manual_seed(0)
        d = PatchDiscriminator(1, 3, ndf=8).eval()
        src = torch.randn(2, 1, 32, 32)
        img = torch.randn(2, 3, 32, 32)
        with torch.no_grad():
            uncond = discriminator_scores(d, src, img, conditional=False)
            direct = d(torch.zeros_like(src), img)
        assert torch.equal(uncond, direct)


class TestSchedule:
    """Constant for 100 epochs, then linear decay to zero at 200."""

    @pytest.mark.parametrize("epoch", [1, 50, 100])
    def test_constant_phase(self, epoch):
        assert abs(lr_at_epoch(epoch, GanObjectiveConfig()) - 2e-4) < 1e-12

    def test_decay(self):
        config = GanObjectiveConfig()
        assert abs(lr_at_epoch(150, config) - 1e-4) < 1e-12
        assert abs(lr_at_epoch(200, config)) < 1e-12

    @pytest.mark.parametrize("epoch", [0, 201])
    def test_out_of_range(self, epoch):
        with pytest.raises(ModelInputError):
            lr_at_epoch(epoch, GanObjectiveConfig())


class TestObjectiveConfig:
    def test_defaults(self):
        config = GanObjectiveConfig()
        assert config.lambda_l1 == 100.0
        assert (config.source, config.target) == (Modality.LWIR, Modality.VISIBLE)

    @pytest.mark.parametrize("overrides", [
        {"noise_mode": "gaussian"},
        {"image_size": 48},
        {"lr_constant_epochs": 300},
        {"source": Modality.VISIBLE},
        {"lambda_l1": -1.0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            GanObjectiveConfig(**overrides)


class TestNetworks:
    def test_generator_range_and_shape(self):
        torch.manual_seed(0)
        g = UNetGenerator(1, 3, ngf=8, image_size=32).eval()
        with torch.no_grad():
            out = g(torch.randn(2, 1, 32, 32))
        assert out.shape == (2, 3, 32, 32)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_eval_without_noise_is_deterministic(self):
        torch.manual_seed(0)
        g = UNetGenerator(1, 3, ngf=8, image_size=32).eval()
        x = torch.randn(1, 1, 32, 32)
        with torch.no_grad():
            assert torch.equal(g(x), g(x))

    def test_seeded_noise(self):
        torch.manual_seed(0)
        g = UNetGenerator(1, 3, ngf=8, image_size=32).eval()
        x = torch.randn(1, 1, 32, 32)
        with torch.no_grad():
            a = g(x, torch.Generator().manual_seed(1))
            b = g(x, torch.Generator().manual_seed(1))
            c = g(x, torch.Generator().manual_seed(2))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_generator_input_contract(self):
        g = UNetGenerator(1, 3, ngf=8, image_size=32)
        with pytest.raises(ModelInputError):
            g(torch.randn(1, 3, 32, 32))
        with pytest.raises(ConfigError):
            UNetGenerator(1, 3, image_size=100)

    def test_discriminator_patch_probabilities(self):
        d = PatchDiscriminator(1, 3, ndf=8).eval()
        with torch.no_grad():
            out = d(torch.randn(2, 1, 32, 32), torch.randn(2, 3, 32, 32))
        assert out.shape == (2, 1, 2, 2)
        assert bool(((out > 0) & (out < 1)).all())

    def test_discriminator_operands_must_agree(self):
        d = PatchDiscriminator(1, 3, ndf=8)
        with pytest.raises(ModelInputError):
            d(torch.randn(1, 1, 32, 32), torch.randn(1, 3, 16, 16))

    def test_value_range_conversion(self):
        images = np.linspace(0.0, 1.0, 2 * 4 * 4 * 3, dtype=np.float32).reshape(2, 4, 4, 3)
        signed = to_signed(images)
        assert signed.shape == (2, 3, 4, 4)
        assert signed.min().item() == pytest.approx(-1.0)
        np.testing.assert_allclose(to_unit(signed), images, atol=1e-6)


def _snapshot(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def _changed(module: torch.nn.Module, before: dict[str, torch.Tensor]) -> list[str]:
    return [n for n, p in module.named_parameters() if not torch.equal(p.detach(), before[n])]


class TestAlternatingSteps:
    """The D step never touches G and the G step never moves D."""

    def _setup(self):
        torch.manual_seed(0)
        g = UNetGenerator(1, 3, ngf=8, image_size=32)
        d = PatchDiscriminator(1, 3, ndf=8)
        g_opt = torch.optim.Adam(g.parameters(), lr=1e-2)
        d_opt = torch.optim.Adam(d.parameters(), lr=1e-2)
        src = torch.rand(2, 1, 32, 32) * 2 - 1
        tgt = torch.rand(2, 3, 32, 32) * 2 - 1
        return g, d, g_opt, d_opt, src, tgt

    def test_discriminator_step_leaves_generator(self):
        g, d, _, d_opt, src, tgt = self._setup()
        g_before, d_before = _snapshot(g), _snapshot(d)
        fake = generator_forward(g, src)
        loss = discriminator_step(d, d_opt, src, tgt, fake)
        assert torch.isfinite(loss)
        assert _changed(g, g_before) == []
        assert all(p.grad is None for p in g.parameters())
        assert _changed(d, d_before)

    def test_generator_step_leaves_discriminator(self):
        g, d, g_opt, _, src, tgt = self._setup()
        g_before, d_before = _snapshot(g), _snapshot(d)
        fake = generator_forward(g, src)
        adv, l1 = generator_step(d, g_opt, src, tgt, fake, 100.0)
        assert torch.isfinite(adv) and torch.isfinite(l1)
        assert _changed(d, d_before) == []
        assert _changed(g, g_before)


class TestTraining:
    def test_short_run(self):
        config = GanObjectiveConfig(epochs_total=2, lr_constant_epochs=1, **SMALL)
        result = train_translation(_pairs(4), config, seed=0)
        frame = result.losses_frame()
        assert list(frame.columns) == ["epoch", "g_l1", "g_adv", "d_loss", "lr"]
        assert list(frame["epoch"]) == [1, 2]
        assert list(frame["lr"]) == [2e-4, 0.0]
        assert np.isfinite(frame[["g_l1", "g_adv", "d_loss"]].to_numpy()).all()

    def test_both_networks_update(self):
        config = GanObjectiveConfig(epochs_total=1, lr_constant_epochs=1, **SMALL)
        torch.manual_seed(0)
        g0 = UNetGenerator(1, 3, ngf=8, image_size=32)
        d0 = PatchDiscriminator(1, 3, ndf=8)
        result = train_translation(_pairs(3), config, seed=0)
        # Same seed, same construction order: initial weights match g0/d0.
        assert not torch.equal(
            result.generator.downs[0][0].weight.detach(), g0.downs[0][0].weight,
        )
        assert not torch.equal(
            result.discriminator.model[0].weight.detach(), d0.model[0].weight,
        )

    def test_deterministic_under_seed(self):
        config = GanObjectiveConfig(epochs_total=2, lr_constant_epochs=1, **SMALL)
        a = train_translation(_pairs(3), config, seed=5).losses_frame()
        b = train_translation(_pairs(3), config, seed=5).losses_frame()
        np.testing.assert_allclose(a.to_numpy(), b.to_numpy(), rtol=1e-6)

    def test_empty_pairs(self):
        with pytest.raises(ConfigError):
            train_translation([], GanObjectiveConfig(**SMALL), seed=0)

    def test_pair_size_must_match(self):
        config = GanObjectiveConfig(epochs_total=1, lr_constant_epochs=1, **SMALL)
        with pytest.raises(ModelInputError):
            train_translation(_pairs(2, size=64), config, seed=0)

    def test_translate_returns_unit_images(self):
        config = GanObjectiveConfig(epochs_total=1, lr_constant_epochs=1, **SMALL)
        result = train_translation(_pairs(2), config, seed=0)
        sources = np.stack([p.source for p in _pairs(3, seed=1)])
        out = translate(result.generator, sources)
        assert out.shape == (3, 32, 32, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_array_equal(out, translate(result.generator, sources))

    def test_depth_to_lwir(self, full_root):
        dataset = load_slp_layout(full_root, (Modality.DEPTH, Modality.LWIR), (Cover.UNCOVERED,))
        pairs = prepare_translation_pairs(
            dataset, source=Modality.DEPTH, target=Modality.LWIR, image_size=32,
        )
        assert len(pairs) == 2
        config = GanObjectiveConfig(epochs_total=1, lr_constant_epochs=1, **SMALL)
        result = translate_any(pairs, Modality.DEPTH, Modality.LWIR, config, seed=0)
        assert (result.config.source, result.config.target) == (Modality.DEPTH, Modality.LWIR)
        assert len(result.history) == 1
        out = translate(result.generator, np.stack([p.source for p in pairs]))
        assert out.shape == (2, 32, 32, 1)

    def test_translate_any_rejects_identity(self):
        config = GanObjectiveConfig(epochs_total=1, lr_constant_epochs=1, **SMALL)
        with pytest.raises(ConfigError):
            translate_any(_pairs(2), Modality.LWIR, Modality.LWIR, config, seed=0)


@pytest.mark.slow
class TestTranslationSmoke:
    def test_l1_decreases_over_30_epochs(self, tmp_path):
        root = generate_synthetic_dataset(
            tmp_path, 5, 2, seed=3, modalities=(Modality.VISIBLE, Modality.LWIR),
            covers=(Cover.UNCOVERED, Cover.COVER1), scale=0.25,
        )
        dataset = load_slp_layout(
            root, (Modality.LWIR, Modality.VISIBLE), (Cover.UNCOVERED, Cover.COVER1),
        )
        pairs = prepare_translation_pairs(dataset, image_size=32)
        assert len(pairs) == 20
        config = GanObjectiveConfig(epochs_total=30, lr_constant_epochs=15, **SMALL)
        history = train_translation(pairs, config, seed=0).losses_frame()
        assert np.isfinite(history[["g_l1", "g_adv", "d_loss"]].to_numpy()).all()
        assert history["g_l1"].iloc[-1] < history["g_l1"].iloc[0]
