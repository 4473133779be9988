"""Conditional GAN translation between modalities (LWIR -> visible by default).

Objective: ``min_G max_D  E[log D(x, y)] + E[log(1 - D(x, G(x, z)))] + lambda * |y - G(x, z)|_1``.
The generator is trained on the non-saturating form ``-E[log D(x, G(x, z))]``.
Noise ``z`` is dropout inside the generator decoder.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch
from torch import nn

from bedpose.errors import ConfigError, ModelInputError, NumericError
from bedpose.models import Modality, TranslationPair
from bedpose.nets.pix2pix import PatchDiscriminator, UNetGenerator

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True, slots=True)
class GanObjectiveConfig:
    """Translation objective, schedule and network widths."""

    lambda_l1: float = 100.0
    noise_mode: str = "dropout_noise"
    epochs_total: int = 200
    lr_base: float = 2e-4
    lr_constant_epochs: int = 100
    batch_size: int = 1
    beta1: float = 0.5
    beta2: float = 0.999
    ngf: int = 64
    ndf: int = 64
    image_size: int = 256
    source: Modality = Modality.LWIR
    target: Modality = Modality.VISIBLE

    def __post_init__(self) -> None:
        if self.lambda_l1 < 0:
            raise ConfigError(f"gan.lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.noise_mode != "dropout_noise":
            raise ConfigError(f"gan.noise_mode must be 'dropout_noise', got {self.noise_mode!r}")
        if self.epochs_total < 1 or self.lr_base <= 0 or self.batch_size < 1:
            raise ConfigError("gan.epochs_total, gan.lr_base and gan.batch_size must be positive")
        if not 0 < self.lr_constant_epochs <= self.epochs_total:
            raise ConfigError(
                f"gan.lr_constant_epochs must be in 1..{self.epochs_total}, "
                f"got {self.lr_constant_epochs}"
            )
        if self.ngf < 1 or self.ndf < 1:
            raise ConfigError("gan.ngf and gan.ndf must be >= 1")
        if self.image_size < 32 or self.image_size & (self.image_size - 1):
            raise ConfigError(f"gan.image_size must be a power of two >= 32, got {self.image_size}")
        if self.source is self.target:
            raise ConfigError(f"translation source and target are both {self.source.value}")

    def to_header(self) -> dict[str, object]:
        return {
            "lambda_l1": self.lambda_l1,
            "epochs_total": self.epochs_total,
            "lr_base": self.lr_base,
            "lr_constant_epochs": self.lr_constant_epochs,
            "batch_size": self.batch_size,
            "ngf": self.ngf,
            "ndf": self.ndf,
            "image_size": self.image_size,
            "source": self.source.value,
            "target": self.target.value,
        }


# ---------------------------------------------------------------------------
# Losses and schedule
# ---------------------------------------------------------------------------

def _check_probabilities(scores: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(scores).all():
        raise NumericError(f"{name} contains non-finite values")
    if (scores < 0).any() or (scores > 1).any():
        raise NumericError(f"{name} outside [0, 1]")
    return scores.clamp(PROB_EPS, 1.0 - PROB_EPS)


def cgan_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """``E[log D_real] + E[log(1 - D_fake)]`` on epsilon-clamped probabilities."""
    real = _check_probabilities(d_real, "D_real")
    fake = _check_probabilities(d_fake, "D_fake")
    return torch.log(real).mean() + torch.log(1.0 - fake).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """What D minimises: the negated adversarial value."""
    return -cgan_loss(d_real, d_fake)


def generator_adversarial_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term ``-E[log D(x, G(x))]``."""
    return -torch.log(_check_probabilities(d_fake, "D_fake")).mean()


def l1_loss(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if generated.shape != target.shape:
        raise ModelInputError(
            f"L1 operands differ: {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    return (generated - target).abs().mean()


def total_generator_objective(
    adversarial: torch.Tensor | float, l1: torch.Tensor | float, lambda_l1: float,
) -> torch.Tensor | float:
    return adversarial + lambda_l1 * l1


def lr_at_epoch(epoch: int, config: GanObjectiveConfig) -> float:
    """Constant for the first ``lr_constant_epochs``, then linear decay to 0."""
    total, constant = config.epochs_total, config.lr_constant_epochs
    if not 1 <= epoch <= total:
        raise ModelInputError(f"epoch must be in 1..{total}, got {epoch}")
    if epoch <= constant:
        return config.lr_base
    return config.lr_base * (total - epoch) / (total - constant)


def discriminator_scores(
    discriminator: PatchDiscriminator,
    source: torch.Tensor,
    image: torch.Tensor,
    *,
    conditional: bool = True,
) -> torch.Tensor:
    """Patch scores for ``image``; the unconditional path feeds a constant condition."""
    condition = source if conditional else torch.zeros_like(source)
    return discriminator(condition, image)


def generator_forward(
    generator: UNetGenerator, source: torch.Tensor, noise: torch.Generator | None = None,
) -> torch.Tensor:
    """Synthetic target in [-1, 1] from a preprocessed source batch."""
    return generator(source, noise)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class EpochLosses:
    epoch: int
    g_l1: float
    g_adv: float
    d_loss: float
    lr: float


@dataclass(slots=True)
class TranslationResult:
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    config: GanObjectiveConfig
    history: list[EpochLosses] = field(default_factory=list)

    def losses_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(h.epoch, h.g_l1, h.g_adv, h.d_loss, h.lr) for h in self.history],
            columns=["epoch", "g_l1", "g_adv", "d_loss", "lr"],
        )


def to_signed(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) in [0, 1] -> (N, C, H, W) in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float() * 2 - 1


def to_unit(images: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) in [-1, 1] -> (N, H, W, C) in [0, 1]."""
    return ((images.detach().cpu().numpy().transpose(0, 2, 3, 1) + 1.0) / 2.0).clip(0.0, 1.0)


def _stack_pairs(
    pairs: Sequence[TranslationPair], config: GanObjectiveConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    size = config.image_size
    for pair in pairs:
        if pair.source.shape[:2] != (size, size) or pair.target.shape[:2] != (size, size):
            raise ModelInputError(
                f"pair {pair.subject_id}/{pair.pose_id} is not preprocessed to {size}x{size}"
            )
        if (pair.source_modality, pair.target_modality) != (config.source, config.target):
            raise ConfigError(
                f"pair is {pair.source_modality.value}->{pair.target_modality.value}, "
                f"objective is {config.source.value}->{config.target.value}"
            )
    source = to_signed(np.stack([p.source for p in pairs]))
    target = to_signed(np.stack([p.target for p in pairs]))
    return source, target


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _finite(value: torch.Tensor, name: str, epoch: int) -> float:
    v = float(value.detach())
    if not np.isfinite(v):
        raise NumericError(f"{name} became non-finite at epoch {epoch}")
    return v


def discriminator_step(
    discriminator: PatchDiscriminator,
    optimizer: torch.optim.Optimizer,
    source: torch.Tensor,
    target: torch.Tensor,
    fake: torch.Tensor,
) -> torch.Tensor:
    """One D update on real and detached fake pairs; the generator gets no gradient."""
    optimizer.zero_grad(set_to_none=True)
    loss = discriminator_loss(
        discriminator_scores(discriminator, source, target),
        discriminator_scores(discriminator, source, fake.detach()),
    )
    loss.backward()
    optimizer.step()
    return loss


def generator_step(
    discriminator: PatchDiscriminator,
    optimizer: torch.optim.Optimizer,
    source: torch.Tensor,
    target: torch.Tensor,
    fake: torch.Tensor,
    lambda_l1: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One G update on ``adversarial + lambda_l1 * L1``; only ``optimizer`` steps.

    Returns the adversarial and L1 terms.
    """
    optimizer.zero_grad(set_to_none=True)
    adversarial = generator_adversarial_loss(discriminator_scores(discriminator, source, fake))
    l1 = l1_loss(fake, target)
    total = total_generator_objective(adversarial, l1, lambda_l1)
    total.backward()
    optimizer.step()
    return adversarial, l1


def train_translation(
    pairs: Sequence[TranslationPair],
    config: GanObjectiveConfig,
    *,
    seed: int,
    device: str = "cpu",
    on_epoch: Callable[[EpochLosses], None] | None = None,
) -> TranslationResult:
    """Alternate one D step and one G step per batch for ``epochs_total`` epochs."""
    if not pairs:
        raise ConfigError("no translation pairs to train on")
    torch.manual_seed(seed)
    source_all, target_all = _stack_pairs(pairs, config)
    generator = UNetGenerator(
        config.source.channels, config.target.channels,
        ngf=config.ngf, image_size=config.image_size,
    ).to(device)
    discriminator = PatchDiscriminator(
        config.source.channels, config.target.channels, ndf=config.ndf,
    ).to(device)
    betas = (config.beta1, config.beta2)
    g_opt = torch.optim.Adam(generator.parameters(), lr=config.lr_base, betas=betas)
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=config.lr_base, betas=betas)
    order_rng = torch.Generator().manual_seed(seed)
    noise = torch.Generator().manual_seed(seed + 1)

    result = TranslationResult(generator, discriminator, config)
    n = source_all.shape[0]
    for epoch in range(1, config.epochs_total + 1):
        lr = lr_at_epoch(epoch, config)
        _set_lr(g_opt, lr)
        _set_lr(d_opt, lr)
        generator.train()
        discriminator.train()
        sums = np.zeros(3)
        batches = 0
        for idx in torch.randperm(n, generator=order_rng).split(config.batch_size):
            src = source_all[idx].to(device)
            tgt = target_all[idx].to(device)
            fake = generator_forward(generator, src, noise)
            d_loss = discriminator_step(discriminator, d_opt, src, tgt, fake)
            adv, l1 = generator_step(discriminator, g_opt, src, tgt, fake, config.lambda_l1)

            sums += (
                _finite(l1, "generator L1", epoch),
                _finite(adv, "generator adversarial loss", epoch),
                _finite(d_loss, "discriminator loss", epoch),
            )
            batches += 1

        g_l1, g_adv, d_mean = sums / batches
        losses = EpochLosses(epoch, float(g_l1), float(g_adv), float(d_mean), lr)
        result.history.append(losses)
        logger.info(
            "cGAN epoch %d/%d: L1 %.4f  G_adv %.4f  D %.4f  lr %.6f",
            epoch, config.epochs_total, g_l1, g_adv, d_mean, lr,
        )
        if on_epoch is not None:
            on_epoch(losses)
    return result


def translate_any(
    pairs: Sequence[TranslationPair],
    source: Modality,
    target: Modality,
    config: GanObjectiveConfig,
    *,
    seed: int,
    device: str = "cpu",
) -> TranslationResult:
    """Train a translator for an arbitrary ``source -> target`` modality pair."""
    return train_translation(
        pairs, replace(config, source=source, target=target), seed=seed, device=device,
    )


@torch.no_grad()
def translate(
    generator: nn.Module, sources: np.ndarray, noise: torch.Generator | None = None,
) -> np.ndarray:
    """Run a trained generator in eval mode on (N, H, W, C) images in [0, 1]."""
    generator.eval()
    device = next(generator.parameters()).device
    return to_unit(generator(to_signed(sources).to(device), noise))
