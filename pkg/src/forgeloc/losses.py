"""Composite training objective: per-stage classification cross-entropy,
per-stage mask binary cross-entropy, and a Sobel edge term on the finest mask."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .heads import ClassProbPyramid, MaskPyramid

EPS = 1e-12

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.contiguous()

# incremented whenever a log argument had to be clamped at EPS
_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    global _clamp_events
    tiny = p < EPS
    if tiny.any():
        _clamp_events += int(tiny.sum())
    return torch.log(p.clamp(min=EPS))


@dataclass
class LossConfig:
    edge_weight: float = 1.0
    edge_mode: str = "absolute"  # "absolute" or "literal"
    class_weights: list | None = None  # optional per-stage class weight vectors

    def __post_init__(self):
        if self.edge_weight < 0:
            raise ValueError("edge_weight must be >= 0")
        if self.edge_mode not in ("absolute", "literal"):
            raise ValueError(f"edge_mode must be 'absolute' or 'literal', got {self.edge_mode!r}")


def detection_loss(prob_pyramid: ClassProbPyramid, label_paths: torch.Tensor,
                   class_weights=None) -> torch.Tensor:
    """Sum over stages of the batch-mean negative log-likelihood of the true class."""
    if label_paths.dim() != 2 or label_paths.shape[1] != len(prob_pyramid.probs):
        raise ValueError(f"label paths must be (B,{len(prob_pyramid.probs)})")
    total = None
    batch = torch.arange(label_paths.shape[0], device=label_paths.device)
    for t, probs in enumerate(prob_pyramid.probs):
        true = label_paths[:, t]
        if true.max() >= probs.shape[-1] or true.min() < 0:
            raise ValueError(f"stage {t + 1} labels out of range")
        nll = -_safe_log(probs[batch, true])
        if class_weights is not None and class_weights[t] is not None:
            w = torch.as_tensor(class_weights[t], dtype=probs.dtype, device=probs.device)[true]
            stage = (w * nll).sum() / w.sum()
        else:
            stage = nll.mean()
        total = stage if total is None else total + stage
    return total


def downsample_mask(gt_mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Area-average then threshold at 0.5; keeps thin regions better than subsampling."""
    if factor == 1:
        return (gt_mask >= 0.5).to(gt_mask.dtype)
    pooled = F.avg_pool2d(gt_mask.unsqueeze(1), factor).squeeze(1)
    return (pooled >= 0.5).to(gt_mask.dtype)


def localization_loss(mask_pyramid: MaskPyramid, gt_mask: torch.Tensor) -> torch.Tensor:
    """Sum over stages of pixel-mean binary cross-entropy on the forged channel."""
    if gt_mask.dim() != 3:
        raise ValueError("ground-truth mask must be (B,H,W)")
    h, w = gt_mask.shape[1:]
    total = None
    for t, mask in enumerate(mask_pyramid.masks):
        mh, mw = mask.shape[2:]
        if h % mh or w % mw or (h // mh) != (w // mw):
            raise ValueError(f"stage {t + 1} resolution {mh}x{mw} incompatible with {h}x{w}")
        y = downsample_mask(gt_mask, h // mh)
        p = mask[:, 1]
        stage = -(y * _safe_log(p) + (1 - y) * _safe_log(1 - p)).mean()
        total = stage if total is None else total + stage
    return total


def sobel(mask: torch.Tensor, direction: str) -> torch.Tensor:
    """Zero-padded full correlation with the 3x3 Sobel kernel.

    The output carries the kernel radius on every side ((H+2)x(W+2)): keeping
    the full response makes the joint x/y gradient field injective, so any two
    distinct masks yield a nonzero absolute edge discrepancy.
    """
    if direction not in ("x", "y"):
        raise ValueError(f"direction must be 'x' or 'y', got {direction!r}")
    kernel = SOBEL_X if direction == "x" else SOBEL_Y
    squeeze = mask.dim() == 2
    if squeeze:
        mask = mask.unsqueeze(0)
    if mask.dim() != 3:
        raise ValueError("mask must be (H,W) or (B,H,W)")
    k = kernel.to(dtype=mask.dtype, device=mask.device).view(1, 1, 3, 3)
    out = F.conv2d(mask.unsqueeze(1), k, padding=2).squeeze(1)
    return out.squeeze(0) if squeeze else out


def edge_loss(pred_mask: torch.Tensor, gt_mask: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Sobel-gradient discrepancy on the finest forged-probability map.

    The default absolute mode averages |S(M) - S(m)|; literal mode averages the
    signed differences and can cancel to zero for distinct masks.
    """
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"resolution mismatch: {tuple(pred_mask.shape)} vs {tuple(gt_mask.shape)}")
    dx = sobel(gt_mask, "x") - sobel(pred_mask, "x")
    dy = sobel(gt_mask, "y") - sobel(pred_mask, "y")
    if cfg.edge_mode == "absolute":
        return cfg.edge_weight * (dx.abs().mean() + dy.abs().mean())
    return cfg.edge_weight * (dx.mean() + dy.mean())


def total_loss(det: torch.Tensor, loc: torch.Tensor, edge: torch.Tensor) -> torch.Tensor:
    for name, part in (("detection", det), ("localization", loc), ("edge", edge)):
        if not torch.isfinite(part).all():
            raise ValueError(f"non-finite {name} loss component: {part}")
    return det + loc + edge
