"""Intermediate feature fusion over stage-N branch outputs of uni-modal backbones.

Fusion types:

* addition       ``O_b = sum_m O_b^m``
* concatenation  ``O_b = CNN_b(stack_m O_b^m)`` with a 1x1 reducer per branch

Strategies:

* ``frozen_plain``     pre-trained extractors frozen, plain fusion
* ``frozen_weighted``  frozen extractors, spatial dropout and learned per-channel
                       modal weights, then batch norm + ReLU
* ``end_to_end``       all stages trainable, spatial dropout, batch norm + ReLU
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

import torch
from torch import nn

from bedpose.errors import ConfigError, FusionError
from bedpose.models import Modality
from bedpose.nets.backbone import FUSABLE_STAGES, Backbone, BackboneConfig, BranchFeatureSet

logger = logging.getLogger(__name__)


class FusionType(StrEnum):
    ADDITION = "addition"
    CONCATENATION = "concatenation"


class FusionStrategy(StrEnum):
    FROZEN_PLAIN = "frozen_plain"
    FROZEN_WEIGHTED = "frozen_weighted"
    END_TO_END = "end_to_end"

    @property
    def frozen(self) -> bool:
        return self is not FusionStrategy.END_TO_END


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class FusionConfig:
    """Where and how a set of modalities is fused."""

    stage: int
    fusion_type: FusionType
    strategy: FusionStrategy
    modalities: tuple[Modality, ...]
    primary: Modality
    dropout_p: float = 0.2

    def __post_init__(self) -> None:
        if self.stage not in FUSABLE_STAGES:
            raise ConfigError(f"fusion.stage must be one of {FUSABLE_STAGES}, got {self.stage}")
        if len(self.modalities) < 2:
            raise ConfigError(f"fusion needs at least two modalities, got {len(self.modalities)}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"fusion.modalities has duplicates: {list(self.modalities)}")
        if self.primary not in self.modalities:
            raise ConfigError(
                f"fusion.primary {self.primary.value!r} is not among fusion.modalities"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"fusion.dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def primary_index(self) -> int:
        return self.modalities.index(self.primary)

    def to_header(self) -> dict[str, object]:
        return {
            "stage": self.stage,
            "fusion_type": self.fusion_type.value,
            "strategy": self.strategy.value,
            "modalities": [m.value for m in self.modalities],
            "primary": self.primary.value,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_header(cls, header: Mapping[str, object]) -> FusionConfig:
        return cls(
            stage=int(header["stage"]),  # type: ignore[arg-type]
            fusion_type=FusionType(header["fusion_type"]),
            strategy=FusionStrategy(header["strategy"]),
            modalities=tuple(
                Modality.parse(m) for m in header["modalities"]  # type: ignore[union-attr]
            ),
            primary=Modality.parse(str(header["primary"])),
            dropout_p=float(header["dropout_p"]),  # type: ignore[arg-type]
        )


# ---------------------------------------------------------------------------
# Fusion operators
# ---------------------------------------------------------------------------

def _check_compatible(inputs: Sequence[BranchFeatureSet]) -> None:
    if not inputs:
        raise FusionError("nothing to fuse: empty input list")
    first = inputs[0]
    for other in inputs[1:]:
        if other.stage != first.stage or len(other) != len(first):
            raise FusionError(
                f"cannot fuse stage {other.stage} ({len(other)} branches) with "
                f"stage {first.stage} ({len(first)} branches)"
            )
        for b, (x, y) in enumerate(zip(first, other)):
            if x.shape != y.shape:
                raise FusionError(
                    f"branch {b} shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}"
                )


def fuse_add(inputs: Sequence[BranchFeatureSet]) -> BranchFeatureSet:
    """Element-wise sum of corresponding branches across modalities."""
    _check_compatible(inputs)
    fused: list[torch.Tensor] = []
    for b in range(len(inputs[0])):
        total = inputs[0][b]
        for feats in inputs[1:]:
            total = total + feats[b]
        fused.append(total)
    return BranchFeatureSet(inputs[0].stage, fused, modality=None)


def stack_branches(inputs: Sequence[BranchFeatureSet]) -> list[torch.Tensor]:
    """Channel-stack each branch across modalities, in input order."""
    _check_compatible(inputs)
    return [torch.cat([feats[b] for feats in inputs], dim=1) for b in range(len(inputs[0]))]


class FusionReducer(nn.Module):
    """Per-branch 1x1 convolutions mapping ``|M| * n_b`` channels back to ``n_b``."""

    def __init__(self, channels: Sequence[int], num_modalities: int) -> None:
        super().__init__()
        if num_modalities < 2:
            raise ConfigError(f"reducer needs at least two modalities, got {num_modalities}")
        self.channels = tuple(channels)
        self.num_modalities = num_modalities
        self.convs = nn.ModuleList(
            nn.Conv2d(num_modalities * c, c, kernel_size=1) for c in self.channels
        )

    @torch.no_grad()
    def block_selector_(self, index: int) -> FusionReducer:
        """Identity on modality ``index``'s channel block, zero elsewhere, zero bias."""
        if not 0 <= index < self.num_modalities:
            raise FusionError(f"selector index {index} out of range 0..{self.num_modalities - 1}")
        for conv, c in zip(self.convs, self.channels):
            conv.weight.zero_()
            conv.bias.zero_()
            rows = torch.arange(c)
            conv.weight[rows, index * c + rows, 0, 0] = 1.0
        return self

    def forward(self, stacked: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(stacked) != len(self.convs):
            raise FusionError(f"reducer has {len(self.convs)} branches, got {len(stacked)}")
        out = []
        for b, (conv, x) in enumerate(zip(self.convs, stacked)):
            if x.shape[1] != conv.in_channels:
                raise FusionError(
                    f"branch {b}: reducer expects {conv.in_channels} channels, got {x.shape[1]}"
                )
            out.append(conv(x))
        return out


def fuse_concat(inputs: Sequence[BranchFeatureSet], reducer: FusionReducer) -> BranchFeatureSet:
    """Stack channels in modality order, then reduce each branch with a 1x1 conv."""
    if len(inputs) != reducer.num_modalities:
        raise FusionError(
            f"reducer built for {reducer.num_modalities} modalities, got {len(inputs)}"
        )
    return BranchFeatureSet(inputs[0].stage, reducer(stack_branches(inputs)), modality=None)


# ---------------------------------------------------------------------------
# Spatial dropout and modal weights
# ---------------------------------------------------------------------------

def spatial_dropout(
    x: torch.Tensor, p: float, *, training: bool, generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Zero whole channels with probability ``p``; survivors scaled by ``1 / (1 - p)``."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    keep = torch.full((x.shape[0], x.shape[1], 1, 1), 1.0 - p, dtype=x.dtype)
    mask = torch.bernoulli(keep, generator=generator).to(x.device)
    return x * mask / (1.0 - p)


class ModalWeights(nn.Module):
    """Learnable per-channel vectors ``w_b^m`` (unconstrained reals)."""

    def __init__(self, modalities: Sequence[Modality], channels: Sequence[int]) -> None:
        super().__init__()
        self.modalities = tuple(modalities)
        self.channels = tuple(channels)
        self.vectors = nn.ParameterDict({
            self._key(m, b): nn.Parameter(torch.zeros(c))
            for m in self.modalities
            for b, c in enumerate(self.channels)
        })

    @staticmethod
    def _key(modality: Modality, branch: int) -> str:
        return f"{modality.value}_{branch}"

    def vector(self, modality: Modality, branch: int) -> nn.Parameter:
        try:
            return self.vectors[self._key(modality, branch)]
        except KeyError:
            raise FusionError(f"no modal weights for {modality.value} branch {branch}") from None


def init_modal_weights(config: FusionConfig, channels: Sequence[int]) -> ModalWeights:
    """Ones for the primary modality, zeros for every other one."""
    weights = ModalWeights(config.modalities, channels)
    with torch.no_grad():
        for b in range(len(weights.channels)):
            weights.vector(config.primary, b).fill_(1.0)
    return weights


def apply_modal_weights(
    features: BranchFeatureSet,
    weights: ModalWeights,
    dropout_p: float,
    training: bool,
    *,
    modality: Modality | None = None,
    generator: torch.Generator | None = None,
) -> BranchFeatureSet:
    """Spatial dropout (training only) followed by per-channel scaling."""
    modality = modality or features.modality
    if modality is None:
        raise FusionError("feature set carries no modality; pass one explicitly")
    if len(features) != len(weights.channels):
        raise FusionError(
            f"modal weights cover {len(weights.channels)} branches, got {len(features)}"
        )
    out = []
    for b, x in enumerate(features):
        w = weights.vector(modality, b)
        if w.numel() != x.shape[1]:
            raise FusionError(
                f"{modality.value} branch {b}: weight length {w.numel()} != {x.shape[1]} channels"
            )
        x = spatial_dropout(x, dropout_p, training=training, generator=generator)
        out.append(x * w.view(1, -1, 1, 1))
    return BranchFeatureSet(features.stage, out, modality)


# ---------------------------------------------------------------------------
# Fused model
# ---------------------------------------------------------------------------

class FusedModel(nn.Module):
    """Per-modality extractors up to stage N, a fusion block and the primary trunk."""

    def __init__(
        self,
        config: FusionConfig,
        backbones: Mapping[Modality, Backbone],
        *,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.config = config
        self.extractors = nn.ModuleDict({m.value: backbones[m] for m in config.modalities})
        self.backbone_config = backbones[config.primary].config
        self.generator = torch.Generator().manual_seed(seed)
        channels = self.backbone_config.branch_channels(config.stage)

        self.weights: ModalWeights | None = None
        if config.strategy is FusionStrategy.FROZEN_WEIGHTED:
            self.weights = init_modal_weights(config, channels)

        self.reducer: FusionReducer | None = None
        if config.fusion_type is FusionType.CONCATENATION:
            self.reducer = FusionReducer(channels, len(config.modalities))
            self.reducer.block_selector_(config.primary_index)

        self.norms: nn.ModuleList | None = None
        if config.strategy is not FusionStrategy.FROZEN_PLAIN:
            self.norms = nn.ModuleList(nn.BatchNorm2d(c) for c in channels)

        self._freeze()

    @property
    def trunk(self) -> Backbone:
        return self.extractor(self.config.primary)

    def extractor(self, modality: Modality) -> Backbone:
        return self.extractors[modality.value]  # type: ignore[return-value]

    def _frozen_modules(self) -> list[nn.Module]:
        stage = self.config.stage
        modules: list[nn.Module] = []
        for modality in self.config.modalities:
            backbone = self.extractor(modality)
            if self.config.strategy.frozen:
                modules.extend(backbone.extractor_modules(stage))
            if modality is not self.config.primary:
                # Only the primary backbone runs stages N+1..4.
                for s in range(stage + 1, backbone.config.num_stages + 1):
                    modules.extend(backbone.stage_modules(s))
        return modules

    def _freeze(self) -> None:
        for module in self._frozen_modules():
            for p in module.parameters():
                p.requires_grad_(False)
        self.train(self.training)

    def train(self, mode: bool = True) -> FusedModel:
        super().train(mode)
        for module in self._frozen_modules():
            module.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def extract(self, images: Mapping[Modality, torch.Tensor]) -> list[BranchFeatureSet]:
        """Stage-N branch outputs for each modality, in ``config.modalities`` order."""
        missing = [m.value for m in self.config.modalities if m not in images]
        if missing:
            raise FusionError(f"missing input images for: {', '.join(missing)}")
        return [
            self.extractor(m).forward_to_stage(images[m], self.config.stage)
            for m in self.config.modalities
        ]

    def fuse_features(
        self, features: Sequence[BranchFeatureSet], *, normalize: bool = True,
    ) -> BranchFeatureSet:
        """Dropout / weighting, fusion, then (optionally) batch norm + ReLU."""
        cfg = self.config
        if cfg.strategy is FusionStrategy.FROZEN_WEIGHTED:
            assert self.weights is not None
            features = [
                apply_modal_weights(
                    f, self.weights, cfg.dropout_p, self.training,
                    modality=m, generator=self.generator,
                )
                for f, m in zip(features, cfg.modalities)
            ]
        elif cfg.strategy is FusionStrategy.END_TO_END:
            features = [
                f.replace([
                    spatial_dropout(x, cfg.dropout_p, training=self.training,
                                    generator=self.generator)
                    for x in f
                ])
                for f in features
            ]

        if self.reducer is not None:
            fused = fuse_concat(features, self.reducer)
        else:
            fused = fuse_add(features)

        if normalize and self.norms is not None:
            fused = fused.replace([torch.relu(bn(x)) for bn, x in zip(self.norms, fused)])
        return fused

    def forward(self, images: Mapping[Modality, torch.Tensor]) -> torch.Tensor:
        fused = self.fuse_features(self.extract(images))
        return self.trunk.forward_from_stage(fused, self.config.stage)


def build_fused_model(
    config: FusionConfig, backbones: Mapping[Modality, Backbone], *, seed: int = 0,
) -> FusedModel:
    """Assemble a fused model; frozen strategies freeze stages 1..N of every extractor."""
    missing = [m.value for m in config.modalities if m not in backbones]
    if missing:
        raise ConfigError(f"no backbone for fusion modality: {', '.join(missing)}")
    reference = _shape_signature(backbones[config.primary].config)
    for m in config.modalities:
        if _shape_signature(backbones[m].config) != reference:
            raise ConfigError(
                f"{m.value} backbone differs from the primary beyond its input channels"
            )
    model = FusedModel(config, backbones, seed=seed)
    logger.info(
        "Built %s/%s fusion at stage %d over %s (primary %s, %d trainable parameters)",
        config.strategy.value, config.fusion_type.value, config.stage,
        ",".join(m.value for m in config.modalities), config.primary.value,
        sum(p.numel() for p in model.trainable_parameters()),
    )
    return model


def _shape_signature(config: BackboneConfig) -> dict[str, object]:
    header = config.to_header()
    header.pop("input_channels")
    return header
