"""Multi-branch high-resolution backbone with stage taps for feature fusion.

Four stages; stage ``s`` carries ``s`` parallel branches. Branch ``b`` (0-indexed
here) runs at ``heatmap_size / 2**b`` with ``C * 2**b`` channels. The trunk can be
cut after stage 2 or 3 (``forward_to_stage``) and resumed from a possibly fused
set of branch tensors (``forward_from_stage``).
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from itertools import chain
from typing import ClassVar

import torch
import torch.nn.functional as F
from torch import nn

from bedpose.errors import ConfigError, ModelInputError
from bedpose.models import NUM_JOINTS, Modality

logger = logging.getLogger(__name__)

FUSABLE_STAGES: tuple[int, ...] = (2, 3)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class BackboneConfig:
    """Shape and depth of one uni-modal backbone."""

    base_channels: int = 32
    input_channels: int = 1
    num_joints: int = NUM_JOINTS
    input_size: int = 256
    stem_channels: int = 64
    stage1_blocks: int = 4
    num_modules: tuple[int, int, int] = (1, 4, 3)
    num_blocks: int = 4

    num_stages: ClassVar[int] = 4

    _PRESETS: ClassVar[dict[str, dict[str, object]]] = {
        "w32": {"base_channels": 32},
        "w48": {"base_channels": 48},
        "tiny": {
            "base_channels": 8,
            "stem_channels": 16,
            "stage1_blocks": 1,
            "num_modules": (1, 1, 1),
            "num_blocks": 1,
        },
    }

    def __post_init__(self) -> None:
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.num_joints != NUM_JOINTS:
            raise ConfigError(f"num_joints is fixed at {NUM_JOINTS}, got {self.num_joints}")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size must be a multiple of 32, got {self.input_size}")
        if self.stem_channels < 1 or self.stage1_blocks < 1 or self.num_blocks < 1:
            raise ConfigError("stem_channels, stage1_blocks and num_blocks must be >= 1")
        if len(self.num_modules) != 3 or min(self.num_modules) < 1:
            raise ConfigError(f"num_modules needs three positive entries, got {self.num_modules}")

    @classmethod
    def preset(cls, name: str, *, input_channels: int = 1, **overrides: object) -> BackboneConfig:
        """Build a named preset (``w32``, ``w48``, ``tiny``)."""
        try:
            params = dict(cls._PRESETS[name])
        except KeyError:
            names = ", ".join(cls._PRESETS)
            raise ConfigError(
                f"unknown backbone preset {name!r} (expected one of: {names})"
            ) from None
        params.update(overrides)
        return cls(input_channels=input_channels, **params)  # type: ignore[arg-type]

    @classmethod
    def preset_names(cls) -> tuple[str, ...]:
        return tuple(cls._PRESETS)

    @property
    def heatmap_size(self) -> int:
        return self.input_size // 4

    def branch_channels(self, stage: int) -> tuple[int, ...]:
        """Channel width of each branch at ``stage``."""
        return tuple(self.base_channels * 2**b for b in range(stage))

    def branch_sizes(self, stage: int) -> tuple[int, ...]:
        """Spatial side of each branch at ``stage``."""
        return tuple(self.heatmap_size // 2**b for b in range(stage))

    def to_header(self) -> dict[str, object]:
        """Plain-dict form stored in checkpoint headers."""
        return {
            "base_channels": self.base_channels,
            "input_channels": self.input_channels,
            "num_joints": self.num_joints,
            "input_size": self.input_size,
            "stem_channels": self.stem_channels,
            "stage1_blocks": self.stage1_blocks,
            "num_modules": list(self.num_modules),
            "num_blocks": self.num_blocks,
            "num_stages": self.num_stages,
        }

    @classmethod
    def from_header(cls, header: dict[str, object]) -> BackboneConfig:
        data = {k: v for k, v in header.items() if k != "num_stages"}
        data["num_modules"] = tuple(data["num_modules"])  # type: ignore[arg-type]
        return cls(**data)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Branch feature sets
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class BranchFeatureSet:
    """Per-branch tensors emitted by stage ``stage`` (each shaped B x C_b x H_b x W_b)."""

    stage: int
    features: list[torch.Tensor]
    modality: Modality | None = None
    meta: dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.features)

    def __getitem__(self, branch: int) -> torch.Tensor:
        return self.features[branch]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(t.shape[1:]) for t in self.features]

    def replace(self, features: Sequence[torch.Tensor]) -> BranchFeatureSet:
        """Same stage and modality, new tensors."""
        return BranchFeatureSet(self.stage, list(features), self.modality)

    def check_branch_law(self, config: BackboneConfig, stage: int | None = None) -> None:
        """Raise ModelInputError unless the tensors match ``config`` at ``stage``."""
        stage = self.stage if stage is None else stage
        if self.stage != stage or len(self.features) != stage:
            raise ModelInputError(
                f"expected {stage} branch tensors for stage {stage}, "
                f"got {len(self.features)} tagged stage {self.stage}"
            )
        expected = [
            (c, s, s) for c, s in zip(config.branch_channels(stage), config.branch_sizes(stage))
        ]
        if self.shapes != expected:
            raise ModelInputError(f"stage-{stage} branch shapes {self.shapes} != {expected}")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity shortcut."""

    expansion = 1

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + x)


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block with 4x expansion."""

    expansion = 4

    def __init__(self, in_channels: int, planes: int) -> None:
        super().__init__()
        out_channels = planes * self.expansion
        self.conv1 = nn.Conv2d(in_channels, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.downsample: nn.Module = nn.Identity()
        if in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + self.downsample(x))


class ExchangeModule(nn.Module):
    """Parallel branches followed by all-to-all multi-resolution exchange."""

    def __init__(
        self, channels: Sequence[int], num_blocks: int, *, multi_scale_output: bool = True,
    ) -> None:
        super().__init__()
        self.num_branches = len(channels)
        self.branches = nn.ModuleList(
            nn.Sequential(*(BasicBlock(c) for _ in range(num_blocks))) for c in channels
        )
        outputs = self.num_branches if multi_scale_output else 1
        self.exchange = nn.ModuleList(
            nn.ModuleList(self._make_path(channels, j, i) for j in range(self.num_branches))
            for i in range(outputs)
        )

    @staticmethod
    def _make_path(channels: Sequence[int], src: int, dst: int) -> nn.Module:
        if src == dst:
            return nn.Identity()
        if src > dst:
            # Lower resolution -> 1x1 projection, upsampled in forward.
            return nn.Sequential(
                nn.Conv2d(channels[src], channels[dst], 1, bias=False),
                nn.BatchNorm2d(channels[dst]),
            )
        steps: list[nn.Module] = []
        for k in range(dst - src):
            last = k == dst - src - 1
            out_ch = channels[dst] if last else channels[src]
            layers: list[nn.Module] = [
                nn.Conv2d(channels[src], out_ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
            ]
            if not last:
                layers.append(nn.ReLU(inplace=True))
            steps.append(nn.Sequential(*layers))
        return nn.Sequential(*steps)

    def forward(self, x: list[torch.Tensor]) -> list[torch.Tensor]:
        branched = [branch(t) for branch, t in zip(self.branches, x)]
        if self.num_branches == 1:
            return branched
        out: list[torch.Tensor] = []
        for i, paths in enumerate(self.exchange):
            y = branched[i]
            for j, path in enumerate(paths):
                if j == i:
                    continue
                z = path(branched[j])
                if j > i:
                    z = F.interpolate(z, size=y.shape[-2:], mode="nearest")
                y = y + z
            out.append(F.relu(y))
        return out


def _make_transition(pre: Sequence[int], cur: Sequence[int]) -> nn.ModuleList:
    """Adapt ``len(pre)`` branches to ``len(cur)``; new branches downsample the last one."""
    layers = nn.ModuleList()
    for i, out_ch in enumerate(cur):
        if i < len(pre):
            if pre[i] == out_ch:
                layers.append(nn.Identity())
            else:
                layers.append(nn.Sequential(
                    nn.Conv2d(pre[i], out_ch, 3, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                ))
            continue
        steps: list[nn.Module] = []
        for k in range(i + 1 - len(pre)):
            in_ch = pre[-1] if k == 0 else out_ch
            steps.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ))
        layers.append(nn.Sequential(*steps))
    return layers


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

class Backbone(nn.Module):
    """Four-stage high-resolution pose network producing 14 heatmaps."""

    def __init__(self, config: BackboneConfig, modality: Modality | None = None) -> None:
        super().__init__()
        self.config = config
        self.modality = modality
        stem = config.stem_channels
        self.stem = nn.Sequential(
            nn.Conv2d(config.input_channels, stem, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem),
            nn.ReLU(inplace=True),
            nn.Conv2d(stem, stem, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem),
            nn.ReLU(inplace=True),
        )
        stage1_out = stem * Bottleneck.expansion
        self.layer1 = nn.Sequential(
            Bottleneck(stem, stem),
            *(Bottleneck(stage1_out, stem) for _ in range(config.stage1_blocks - 1)),
        )

        self.transitions = nn.ModuleList()
        self.stages = nn.ModuleList()
        previous: tuple[int, ...] = (stage1_out,)
        for stage in range(2, config.num_stages + 1):
            channels = config.branch_channels(stage)
            self.transitions.append(_make_transition(previous, channels))
            n_modules = config.num_modules[stage - 2]
            final = stage == config.num_stages
            self.stages.append(nn.Sequential(*(
                ExchangeModule(
                    channels, config.num_blocks,
                    multi_scale_output=not (final and m == n_modules - 1),
                )
                for m in range(n_modules)
            )))
            previous = channels

        self.head = nn.Conv2d(config.base_channels, config.num_joints, 1)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.001)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    # ----- parameter grouping -------------------------------------------

    def stage_modules(self, stage: int) -> list[nn.Module]:
        """Modules making up ``stage`` (1-indexed); the head belongs to stage 4."""
        if stage == 1:
            return [self.stem, self.layer1]
        modules: list[nn.Module] = [self.transitions[stage - 2], self.stages[stage - 2]]
        if stage == self.config.num_stages:
            modules.append(self.head)
        return modules

    def extractor_modules(self, stage: int) -> list[nn.Module]:
        """Modules run by ``forward_to_stage(x, stage)``."""
        return list(chain.from_iterable(self.stage_modules(s) for s in range(1, stage + 1)))

    def extractor_parameters(self, stage: int) -> Iterator[nn.Parameter]:
        for module in self.extractor_modules(stage):
            yield from module.parameters()

    def trunk_parameters(self, stage: int) -> Iterator[nn.Parameter]:
        """Parameters of stages ``stage + 1`` .. 4 (including the head)."""
        for s in range(stage + 1, self.config.num_stages + 1):
            for module in self.stage_modules(s):
                yield from module.parameters()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ----- forward passes -----------------------------------------------

    def _check_image(self, image: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        batched = image if image.dim() == 4 else image.unsqueeze(0)
        if image.dim() not in (3, 4) or tuple(batched.shape[1:]) != (
            cfg.input_channels, cfg.input_size, cfg.input_size,
        ):
            raise ModelInputError(
                f"expected image of shape ({cfg.input_channels}, {cfg.input_size}, "
                f"{cfg.input_size}), got {tuple(image.shape)}"
            )
        return batched

    def _run_stage(self, stage: int, inputs: list[torch.Tensor]) -> list[torch.Tensor]:
        transition = self.transitions[stage - 2]
        x = [layer(inputs[min(i, len(inputs) - 1)]) for i, layer in enumerate(transition)]
        return self.stages[stage - 2](x)

    def _to_stage(self, batched: torch.Tensor, stage: int) -> list[torch.Tensor]:
        y = [self.layer1(self.stem(batched))]
        for s in range(2, stage + 1):
            y = self._run_stage(s, y)
        return y

    def _from_stage(self, features: list[torch.Tensor], stage: int) -> torch.Tensor:
        y = features
        for s in range(stage + 1, self.config.num_stages + 1):
            y = self._run_stage(s, y)
        return self.head(y[0])

    def forward_full(self, image: torch.Tensor) -> torch.Tensor:
        """Image (N x S x S, optionally batched) -> 14 heatmaps of side S/4."""
        batched = self._check_image(image)
        out = self._from_stage(self._to_stage(batched, 1), 1)
        return out if image.dim() == 4 else out.squeeze(0)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward_full(image)

    def forward_to_stage(self, image: torch.Tensor, stage: int) -> BranchFeatureSet:
        """Run stages 1..``stage`` and return the per-branch outputs."""
        if stage not in FUSABLE_STAGES:
            raise ConfigError(f"fusion stage must be one of {FUSABLE_STAGES}, got {stage}")
        batched = self._check_image(image)
        return BranchFeatureSet(stage, self._to_stage(batched, stage), self.modality)

    def forward_from_stage(self, fused: BranchFeatureSet, stage: int) -> torch.Tensor:
        """Resume at stage ``stage + 1`` from a stage-``stage`` branch set."""
        fused.check_branch_law(self.config, stage)
        return self._from_stage(list(fused.features), stage)


def build_backbone(config: BackboneConfig, modality: Modality | None = None) -> Backbone:
    """Construct a backbone with normally-initialised weights."""
    if modality is not None and modality.channels != config.input_channels:
        raise ConfigError(
            f"{modality.value} images have {modality.channels} channel(s), "
            f"backbone expects {config.input_channels}"
        )
    backbone = Backbone(config, modality)
    logger.debug(
        "Built backbone C=%d N=%d (%d parameters)",
        config.base_channels, config.input_channels, backbone.num_parameters(),
    )
    return backbone
