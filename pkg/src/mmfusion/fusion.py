"""Single-modality baselines and early / middle / late fusion models.

Every model is called as ``model(pet, mri)`` on ``[N,1,D,H,W]`` tensors and
returns log-probabilities ``[N,num_classes]``. Single-modality models ignore
the other input entirely, which makes them exactly insensitive to how that
modality is paired.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import tensor_nn as tnn
from .backbone import Backbone, BackboneConfig, ConfigError, build_backbone
from .tensor_nn import Linear, ShapeError

LATE_MLP_WIDTHS = (128, 64)


class FusionStrategy(str, enum.Enum):
    SINGLE_PET = "single_pet"
    SINGLE_MRI = "single_mri"
    EARLY = "early"
    MIDDLE = "middle"
    LATE = "late"

    @property
    def is_multimodal(self) -> bool:
        return self in (FusionStrategy.EARLY, FusionStrategy.MIDDLE, FusionStrategy.LATE)


@dataclass
class ExchangeConfig:
    l1_lambda: float = 0.005
    bn_threshold: float = 0.02
    exchange_points: Sequence[int] = field(default_factory=lambda: [0, 1, 2, 3])

    def __post_init__(self):
        self.exchange_points = sorted({int(i) for i in self.exchange_points})
        if self.bn_threshold <= 0:
            raise ConfigError("bn_threshold must be positive")
        if self.l1_lambda < 0:
            raise ConfigError("l1_lambda must be non-negative")
        if any(i not in range(4) for i in self.exchange_points):
            raise ConfigError(f"exchange points are block indices 0..3, got {self.exchange_points}")

    def to_dict(self) -> dict:
        return asdict(self)


def early_fuse(gm, pet):
    """Mask PET intensities with a gray-matter map (elementwise product).

    Accepts two ``Volume`` objects, numpy arrays or tensors of equal shape.
    """
    from .data.volume import Volume

    if isinstance(gm, Volume) and isinstance(pet, Volume):
        if gm.shape != pet.shape:
            raise ShapeError(f"early_fuse shape mismatch: {gm.shape} vs {pet.shape}")
        return Volume(gm.data * pet.data, pet.spacing)
    if tuple(gm.shape) != tuple(pet.shape):
        raise ShapeError(f"early_fuse shape mismatch: {tuple(gm.shape)} vs {tuple(pet.shape)}")
    return gm * pet


def channel_exchange(
    feat_a: torch.Tensor,
    feat_b: torch.Tensor,
    gamma_a: torch.Tensor,
    gamma_b: torch.Tensor,
    threshold: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace each branch's low-importance channels with the other branch's.

    Branch a takes channel c from b when ``|gamma_a[c]| < threshold`` and
    symmetrically for b; when both are below threshold the channels swap.
    Both outputs are computed from the *inputs*, so the exchange is
    simultaneous. Gradients follow the data into the sending branch.
    """
    if feat_a.shape != feat_b.shape:
        raise ShapeError(f"channel_exchange shape mismatch: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    c = feat_a.shape[1]
    if gamma_a.shape != (c,) or gamma_b.shape != (c,):
        raise ShapeError(f"gamma vectors must have length {c}")
    view = (1, c) + (1,) * (feat_a.dim() - 2)
    # compare in float64 so a float32 gamma is never rounded onto the threshold
    keep_a = (gamma_a.detach().double().abs() >= threshold).view(view)
    keep_b = (gamma_b.detach().double().abs() >= threshold).view(view)
    return torch.where(keep_a, feat_a, feat_b), torch.where(keep_b, feat_b, feat_a)


def _check_pair(pet: torch.Tensor, mri: torch.Tensor) -> None:
    if pet.shape[0] != mri.shape[0]:
        raise ShapeError(f"batch mismatch between modalities: {pet.shape[0]} vs {mri.shape[0]}")


class FusionModel(nn.Module):
    """Common interface: ``forward(pet, mri)`` and ``training_penalty()``."""

    strategy: FusionStrategy

    def __init__(self, backbone_cfg: BackboneConfig, exchange_cfg: Optional[ExchangeConfig] = None):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.exchange_cfg = exchange_cfg

    @property
    def num_classes(self) -> int:
        return self.backbone_cfg.num_classes

    def forward_with_penalty(self, pet, mri) -> tuple[torch.Tensor, torch.Tensor]:
        return self(pet, mri), pet.new_zeros(())

    def describe(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "backbone": self.backbone_cfg.to_dict(),
            "exchange": self.exchange_cfg.to_dict() if self.exchange_cfg else None,
        }


class SingleModalityModel(FusionModel):
    def __init__(self, strategy: FusionStrategy, backbone_cfg: BackboneConfig):
        super().__init__(backbone_cfg)
        self.strategy = strategy
        self.net = build_backbone(backbone_cfg)

    def forward(self, pet: torch.Tensor, mri: torch.Tensor) -> torch.Tensor:
        _check_pair(pet, mri)
        return self.net(pet if self.strategy == FusionStrategy.SINGLE_PET else mri)


class EarlyFusionModel(FusionModel):
    strategy = FusionStrategy.EARLY

    def __init__(self, backbone_cfg: BackboneConfig):
        super().__init__(backbone_cfg)
        self.net = build_backbone(backbone_cfg)

    def forward(self, pet: torch.Tensor, mri: torch.Tensor) -> torch.Tensor:
        _check_pair(pet, mri)
        return self.net(early_fuse(mri, pet))


class LateFusionModel(FusionModel):
    strategy = FusionStrategy.LATE

    def __init__(self, backbone_cfg: BackboneConfig):
        super().__init__(backbone_cfg)
        branch_cfg = BackboneConfig(**{**backbone_cfg.to_dict(), "with_head": False})
        self.pet_branch = build_backbone(branch_cfg)
        self.mri_branch = build_backbone(branch_cfg)
        widths = [2 * self.pet_branch.feature_dim, *LATE_MLP_WIDTHS, backbone_cfg.num_classes]
        self.mlp = nn.ModuleList(Linear(a, b) for a, b in zip(widths, widths[1:]))

    def fuse(self, pet_emb: torch.Tensor, mri_emb: torch.Tensor) -> torch.Tensor:
        h = torch.cat([pet_emb, mri_emb], dim=1)
        for i, layer in enumerate(self.mlp):
            h = layer(h)
            if i < len(self.mlp) - 1:
                h = tnn.relu(h)
        return tnn.log_softmax(h)

    def forward(self, pet: torch.Tensor, mri: torch.Tensor) -> torch.Tensor:
        _check_pair(pet, mri)
        return self.fuse(self.pet_branch.forward_features(pet), self.mri_branch.forward_features(mri))


class MiddleFusionModel(FusionModel):
    """Two weight-shared branches with per-branch BN and channel exchange.

    Convolution modules are the same objects in both branches; batch-norm
    layers and classification heads are per-branch. The prediction is the
    renormalized mean of the two branch log-probabilities.
    """

    strategy = FusionStrategy.MIDDLE

    def __init__(self, backbone_cfg: BackboneConfig, exchange_cfg: ExchangeConfig):
        super().__init__(backbone_cfg, exchange_cfg)
        self.pet_branch = build_backbone(backbone_cfg)
        self.mri_branch = build_backbone(backbone_cfg)
        a, b = self.pet_branch, self.mri_branch
        b.stem = a.stem
        for blk_a, blk_b in zip(a.blocks, b.blocks):
            blk_b.conv1 = blk_a.conv1
            blk_b.conv2 = blk_a.conv2
            if blk_a.shortcut_conv is not None:
                blk_b.shortcut_conv = blk_a.shortcut_conv

    def exchange_bns(self) -> list[tuple[tnn.BatchNorm3d, tnn.BatchNorm3d]]:
        return [
            (self.pet_branch.blocks[i].bn2, self.mri_branch.blocks[i].bn2)
            for i in self.exchange_cfg.exchange_points
        ]

    def l1_term(self) -> torch.Tensor:
        return sum(bn_a.weight.abs().sum() + bn_b.weight.abs().sum() for bn_a, bn_b in self.exchange_bns())

    def exchange_fraction(self) -> float:
        """Fraction of exchange-point channels currently below threshold."""
        tau = self.exchange_cfg.bn_threshold
        gammas = torch.cat([torch.cat([a.weight, b.weight]) for a, b in self.exchange_bns()])
        return float((gammas.detach().double().abs() < tau).float().mean())

    def branch_log_probs(self, pet: torch.Tensor, mri: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_pair(pet, mri)
        a, b = self.pet_branch, self.mri_branch
        ha, hb = a.stem_forward(pet), b.stem_forward(mri)
        tau = self.exchange_cfg.bn_threshold
        points = set(self.exchange_cfg.exchange_points)
        for i, (blk_a, blk_b) in enumerate(zip(a.blocks, b.blocks)):
            ra, rb = blk_a.residual(ha), blk_b.residual(hb)
            if i in points:
                ra, rb = channel_exchange(ra, rb, blk_a.bn2.weight, blk_b.bn2.weight, tau)
            ha = tnn.relu(ra + blk_a.shortcut(ha))
            hb = tnn.relu(rb + blk_b.shortcut(hb))
        return a.head(tnn.global_avg_pool(ha)), b.head(tnn.global_avg_pool(hb))

    def forward(self, pet: torch.Tensor, mri: torch.Tensor) -> torch.Tensor:
        lp_a, lp_b = self.branch_log_probs(pet, mri)
        return tnn.log_softmax(0.5 * (lp_a + lp_b))

    def forward_with_penalty(self, pet, mri):
        return self(pet, mri), self.exchange_cfg.l1_lambda * self.l1_term()


def build_model(
    strategy,
    backbone_cfg: BackboneConfig,
    exchange_cfg: Optional[ExchangeConfig] = None,
) -> FusionModel:
    strategy = FusionStrategy(strategy)
    if exchange_cfg is not None and strategy != FusionStrategy.MIDDLE:
        raise ConfigError(f"exchange config only applies to middle fusion, not {strategy.value}")
    if strategy in (FusionStrategy.SINGLE_PET, FusionStrategy.SINGLE_MRI):
        return SingleModalityModel(strategy, backbone_cfg)
    if strategy == FusionStrategy.EARLY:
        return EarlyFusionModel(backbone_cfg)
    if strategy == FusionStrategy.LATE:
        return LateFusionModel(backbone_cfg)
    return MiddleFusionModel(backbone_cfg, exchange_cfg or ExchangeConfig())


def model_from_description(desc: dict) -> FusionModel:
    exchange = ExchangeConfig(**desc["exchange"]) if desc.get("exchange") else None
    return build_model(desc["strategy"], BackboneConfig.from_dict(desc["backbone"]), exchange)


def to_batch(volumes: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack ``[D,H,W]`` arrays into an ``[N,1,D,H,W]`` tensor."""
    return torch.from_numpy(np.stack([np.asarray(v) for v in volumes])[:, None]).to(dtype)
