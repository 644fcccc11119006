"""End-to-end detector: feature enhancement, multi-resolution exchange, progressive heads."""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import MultiResolutionBackbone, N_BRANCHES
from .config import TrainConfig
from .features import FeatureEnhancer
from .heads import ProgressiveHeads
from .hierarchy import DEFAULT_HIERARCHY, ClassHierarchy


class ForgeryDetector(nn.Module):
    def __init__(self, cfg: TrainConfig, hierarchy: ClassHierarchy = DEFAULT_HIERARCHY):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.hierarchy = hierarchy
        self.enhancer = FeatureEnhancer(
            cfg.base_width,
            use_rgb=cfg.use_rgb,
            use_noise=cfg.use_noise,
            use_srm=cfg.use_srm,
            use_frequency=cfg.use_frequency,
            use_dam=cfg.use_dam,
        )
        self.backbone = MultiResolutionBackbone(
            in_channels=self.enhancer.out_channels,
            channels=cfg.base_width,
            scale_step=cfg.scale_step,
            exchange_blocks=cfg.exchange_blocks,
        )
        widths = [cfg.base_width * cfg.scale_step ** b for b in range(N_BRANCHES)]
        self.heads = ProgressiveHeads(widths, hierarchy, detach_prior=cfg.detach_prior)

    def forward(self, images: torch.Tensor):
        fused = self.enhancer(images)
        branches = self.backbone(fused)
        return self.heads(branches)

    @torch.no_grad()
    def predict(self, images: torch.Tensor):
        """Stage class indices (B,4) and the finest forged-probability map (B,H,W)."""
        was_training = self.training
        self.eval()
        try:
            mask_pyr, prob_pyr = self(images)
        finally:
            self.train(was_training)
        stage_preds = torch.stack([p.argmax(dim=-1) for p in prob_pyr.probs], dim=1)
        return stage_preds, mask_pyr.finest[:, 1], mask_pyr, prob_pyr
