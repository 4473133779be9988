"""U-Net generator and patch discriminator for paired image translation."""

from __future__ import annotations

import math

import torch
from torch import nn

from bedpose.errors import ConfigError, ModelInputError

NOISE_DROPOUT_P = 0.5
NOISE_BLOCKS = 3


def _init_gan_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def _noise_dropout(x: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    keep = torch.full(x.shape, 1.0 - NOISE_DROPOUT_P, dtype=x.dtype)
    mask = torch.bernoulli(keep, generator=generator).to(x.device)
    return x * mask / (1.0 - NOISE_DROPOUT_P)


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections, downsampling to 1x1.

    The noise input is realised as dropout in the first decoder blocks. It is
    active in training mode, or in evaluation mode when a ``noise`` generator is
    passed to ``forward``.
    """

    def __init__(
        self, in_channels: int, out_channels: int, *, ngf: int = 64, image_size: int = 256,
    ) -> None:
        super().__init__()
        if image_size < 8 or image_size & (image_size - 1):
            raise ConfigError(f"generator image_size must be a power of two >= 8, got {image_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.image_size = image_size
        num_downs = int(math.log2(image_size))
        widths = [ngf * min(2**i, 8) for i in range(num_downs)]

        self.downs = nn.ModuleList()
        previous = in_channels
        for i, width in enumerate(widths):
            layers: list[nn.Module] = [nn.Conv2d(previous, width, 4, stride=2, padding=1)]
            if 0 < i < num_downs - 1:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            self.downs.append(nn.Sequential(*layers))
            previous = width

        self.ups = nn.ModuleList()
        for i in range(num_downs - 1):
            in_ch = widths[-1] if i == 0 else 2 * widths[num_downs - 1 - i]
            out_ch = widths[num_downs - 2 - i]
            self.ups.append(nn.Sequential(
                nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1),
                nn.BatchNorm2d(out_ch),
            ))
        self.final = nn.ConvTranspose2d(2 * widths[0], out_channels, 4, stride=2, padding=1)
        _init_gan_weights(self)

    def forward(
        self, source: torch.Tensor, noise: torch.Generator | None = None,
    ) -> torch.Tensor:
        expected = (self.in_channels, self.image_size, self.image_size)
        if source.dim() != 4 or tuple(source.shape[1:]) != expected:
            raise ModelInputError(
                f"generator expects (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(source.shape)}"
            )
        use_noise = self.training or noise is not None
        skips: list[torch.Tensor] = []
        h = source
        for down in self.downs:
            h = down(h)
            skips.append(h)
        for i, up in enumerate(self.ups):
            h = up(h)
            if i < NOISE_BLOCKS and use_noise:
                h = _noise_dropout(h, noise)
            h = torch.relu(h)
            h = torch.cat([h, skips[-(i + 2)]], dim=1)
        return torch.tanh(self.final(h))


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches of a (condition, image) pair as real or fake."""

    def __init__(
        self, condition_channels: int, image_channels: int, *, ndf: int = 64, n_layers: int = 3,
    ) -> None:
        super().__init__()
        self.condition_channels = condition_channels
        self.image_channels = image_channels
        layers: list[nn.Module] = [
            nn.Conv2d(condition_channels + image_channels, ndf, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        width = ndf
        for i in range(1, n_layers + 1):
            out = ndf * min(2**i, 8)
            stride = 2 if i < n_layers else 1
            layers += [
                nn.Conv2d(width, out, 4, stride=stride, padding=1),
                nn.BatchNorm2d(out),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            width = out
        layers.append(nn.Conv2d(width, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        _init_gan_weights(self)

    def forward(self, condition: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        """Per-patch probabilities in (0, 1)."""
        if condition.shape[-2:] != image.shape[-2:] or condition.shape[0] != image.shape[0]:
            raise ModelInputError(
                f"condition {tuple(condition.shape)} and image {tuple(image.shape)} disagree"
            )
        return torch.sigmoid(self.model(torch.cat([condition, image], dim=1)))
