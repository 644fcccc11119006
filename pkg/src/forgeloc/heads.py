"""Progressive detection and localization heads.

Stages run coarse to fine over branches 4,3,2,1. Each stage owns a
self-attention localization head and a linear classifier; stages after the
first condition their inputs on the previous stage's mask and class
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BranchFeatureSet
from .features import PositionAttention
from .hierarchy import ClassHierarchy

N_STAGES = 4
PROB_TOL = 1e-6


@dataclass
class MaskPyramid:
    """Per-stage 2-channel pixel probability maps, coarse to fine."""

    masks: list[torch.Tensor]

    def validate(self) -> None:
        if len(self.masks) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} masks, got {len(self.masks)}")
        for t, m in enumerate(self.masks):
            if m.shape[1] != 2:
                raise ValueError(f"stage {t + 1} mask must have 2 channels")
            total = m.sum(dim=1)
            if (total - 1).abs().max() > PROB_TOL:
                raise ValueError(f"stage {t + 1} pixel probabilities do not sum to 1")

    @property
    def finest(self) -> torch.Tensor:
        return self.masks[-1]


@dataclass
class ClassProbPyramid:
    """Per-stage class probabilities and the logits they came from."""

    probs: list[torch.Tensor]
    logits: list[torch.Tensor]

    def validate(self, stage_sizes) -> None:
        if len(self.probs) != N_STAGES or len(self.logits) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} stages")
        for t, (p, l) in enumerate(zip(self.probs, self.logits)):
            if p.shape[-1] != stage_sizes[t] or l.shape[-1] != stage_sizes[t]:
                raise ValueError(f"stage {t + 1} must have {stage_sizes[t]} classes")
            if (p.sum(dim=-1) - 1).abs().max() > PROB_TOL or p.min() < 0:
                raise ValueError(f"stage {t + 1} probabilities invalid")


class LocalizationHead(nn.Module):
    """Self-attention block, 1x1 projection to 2 channels, per-pixel softmax."""

    def __init__(self, channels: int, max_keys: int = 256):
        super().__init__()
        self.attention = PositionAttention(channels, max_keys=max_keys)
        self.proj = nn.Conv2d(channels, 2, 1)

    def forward(self, feat):
        h = feat + self.attention(feat)
        return torch.softmax(self.proj(h), dim=1)


def condition_features(mask_prev: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
    """Scale next-stage features by (1 + upsampled forged probability / 2)."""
    if mask_prev.dim() != 4 or mask_prev.shape[1] != 2:
        raise ValueError("previous mask must be (B,2,h,w)")
    ph, pw = mask_prev.shape[2:]
    fh, fw = feat.shape[2:]
    if ph > fh or pw > fw:
        raise ValueError(f"previous mask {ph}x{pw} must be coarser than features {fh}x{fw}")
    forged = mask_prev[:, 1:2]
    if (ph, pw) != (fh, fw):
        forged = F.interpolate(forged, size=(fh, fw), mode="bilinear", align_corners=False)
    return feat * (1 + forged / 2)


def condition_logits(logits_next: torch.Tensor, probs_prev: torch.Tensor,
                     expansion: torch.Tensor) -> torch.Tensor:
    """Fine-stage probabilities from logits modulated by lifted coarse probabilities."""
    if expansion.shape[0] != logits_next.shape[-1] or expansion.shape[1] != probs_prev.shape[-1]:
        raise ValueError(
            f"expansion {tuple(expansion.shape)} incompatible with logits "
            f"{logits_next.shape[-1]} / prior {probs_prev.shape[-1]}"
        )
    lifted = probs_prev @ expansion.to(probs_prev.dtype).T
    return torch.softmax(logits_next * (1 + lifted), dim=-1)


class StageClassifier(nn.Module):
    """Global average pool followed by a single linear layer."""

    def __init__(self, channels: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(channels, n_classes)

    def forward(self, feat):
        logits = self.linear(feat.mean(dim=(2, 3)))
        return logits, torch.softmax(logits, dim=-1)


class ProgressiveHeads(nn.Module):
    def __init__(self, branch_widths: list[int], hierarchy: ClassHierarchy,
                 detach_prior: bool = False, max_keys: int = 256):
        super().__init__()
        if len(branch_widths) != N_STAGES:
            raise ValueError("need one branch width per stage")
        self.hierarchy = hierarchy
        self.detach_prior = detach_prior
        # stage t consumes branch 4-t+1: coarse to fine
        stage_widths = list(reversed(branch_widths))
        self.localizers = nn.ModuleList(
            LocalizationHead(w, max_keys=max_keys) for w in stage_widths
        )
        self.classifiers = nn.ModuleList(
            StageClassifier(w, k) for w, k in zip(stage_widths, hierarchy.stage_sizes)
        )
        for t, mat in enumerate(hierarchy.expansions):
            self.register_buffer(f"expansion_{t}", torch.tensor(mat, dtype=torch.float32))

    def expansion(self, t: int) -> torch.Tensor:
        return getattr(self, f"expansion_{t}")

    def forward(self, branches: BranchFeatureSet):
        stage_feats = list(reversed(branches.as_list()))
        masks: list[torch.Tensor] = []
        probs: list[torch.Tensor] = []
        logits_all: list[torch.Tensor] = []
        for t, feat in enumerate(stage_feats):
            if t == 0:
                mask = self.localizers[t](feat)
                logits, p = self.classifiers[t](feat)
            else:
                prev_mask, prev_p = masks[-1], probs[-1]
                if self.detach_prior:
                    prev_mask, prev_p = prev_mask.detach(), prev_p.detach()
                mask = self.localizers[t](condition_features(prev_mask, feat))
                logits, _ = self.classifiers[t](feat)
                p = condition_logits(logits, prev_p, self.expansion(t - 1))
            masks.append(mask)
            probs.append(p)
            logits_all.append(logits)
        return MaskPyramid(masks), ClassProbPyramid(probs, logits_all)
