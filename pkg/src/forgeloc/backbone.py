"""Four-branch multi-resolution network: branch b runs at 1/s**(b-1) resolution
with width C*s**(b-1), and exchange blocks fuse every branch into every other."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

N_BRANCHES = 4


@dataclass
class BranchFeatureSet:
    """The four feature maps, finest (f1) to coarsest (f4), NCHW."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor

    def as_list(self) -> list[torch.Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]

    def validate(self, height: int, width: int, channels: int, scale_step: int) -> None:
        for b, feat in enumerate(self.as_list()):
            div = scale_step ** b
            expected = (height // div, width // div)
            if feat.shape[2:] != expected:
                raise ValueError(
                    f"branch {b + 1} resolution {tuple(feat.shape[2:])} != {expected}"
                )
            if feat.shape[1] != channels * scale_step ** b:
                raise ValueError(
                    f"branch {b + 1} width {feat.shape[1]} != {channels * scale_step ** b}"
                )
            if not torch.isfinite(feat).all():
                raise ValueError(f"branch {b + 1} contains non-finite values")


def _num_groups(channels: int) -> int:
    for g in (4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """conv3x3 -> group norm -> relu; collapses to a channel-mean map in frozen mode."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm = nn.GroupNorm(_num_groups(out_channels), out_channels)
        self.out_channels = out_channels
        self.frozen_average = False

    def forward(self, x):
        if self.frozen_average:
            return x.mean(dim=1, keepdim=True).expand(-1, self.out_channels, -1, -1)
        return F.relu(self.norm(self.conv(x)))


def average_resample(x: torch.Tensor, factor: int, upsample: bool, out_channels: int) -> torch.Tensor:
    """Fixed linear resampler: average pooling down / bilinear up, channel mean."""
    if factor > 1:
        if upsample:
            x = F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
        else:
            x = F.avg_pool2d(x, factor)
    return x.mean(dim=1, keepdim=True).expand(-1, out_channels, -1, -1)


class Resample(nn.Module):
    """Cross-branch path: strided convolutions down, bilinear + 1x1 projection up.

    `src_div` and `dst_div` are the resolution divisors (s**(b-1)) of the two
    branches; their ratio must be integral.
    """

    def __init__(self, in_channels: int, out_channels: int, src_div: int, dst_div: int,
                 scale_step: int):
        super().__init__()
        self.out_channels = out_channels
        self.frozen_average = False
        if dst_div >= src_div:
            self.upsample_factor = 0
            self.factor = dst_div // src_div
            if dst_div % src_div:
                raise ValueError(f"non-integer resolution ratio {dst_div}/{src_div}")
            downs = []
            ch = in_channels
            steps = 0
            f = self.factor
            while f > 1:
                if scale_step == 1 or f % scale_step:
                    raise ValueError(f"downsample factor {self.factor} not a power of {scale_step}")
                f //= scale_step
                steps += 1
            for i in range(steps):
                nxt = out_channels if i == steps - 1 else ch * scale_step
                downs.append(nn.Conv2d(ch, nxt, 3, stride=scale_step, padding=1, bias=False))
                ch = nxt
            if not downs:
                downs.append(nn.Conv2d(in_channels, out_channels, 1, bias=False))
            self.path = nn.Sequential(*downs)
        else:
            if src_div % dst_div:
                raise ValueError(f"non-integer resolution ratio {src_div}/{dst_div}")
            self.upsample_factor = src_div // dst_div
            self.factor = self.upsample_factor
            self.path = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        if self.frozen_average:
            return average_resample(x, self.factor, bool(self.upsample_factor), self.out_channels)
        if self.upsample_factor:
            # 1x1 projection commutes exactly with bilinear interpolation;
            # projecting first avoids interpolating the wide map
            return F.interpolate(self.path(x), scale_factor=self.upsample_factor,
                                 mode="bilinear", align_corners=False)
        return self.path(x)


class ExchangeBlock(nn.Module):
    """Fully connected cross-resolution fusion: each output branch is the sum of
    its own identity, its own conv block, and resampled maps from the other three."""

    def __init__(self, channels: int, scale_step: int):
        super().__init__()
        widths = [channels * scale_step ** b for b in range(N_BRANCHES)]
        divs = [scale_step ** b for b in range(N_BRANCHES)]
        self.own = nn.ModuleList([ConvBlock(w, w) for w in widths])
        self.cross = nn.ModuleDict({
            f"b{a}_to_b{b}": Resample(widths[a], widths[b], divs[a], divs[b], scale_step)
            for a in range(N_BRANCHES) for b in range(N_BRANCHES) if a != b
        })

    def set_frozen_average(self, flag: bool) -> None:
        for mod in list(self.own) + list(self.cross.values()):
            mod.frozen_average = flag

    def forward(self, branches: BranchFeatureSet) -> BranchFeatureSet:
        feats = branches.as_list()
        outs = []
        for b in range(N_BRANCHES):
            acc = feats[b] + self.own[b](feats[b])
            for a in range(N_BRANCHES):
                if a != b:
                    acc = acc + self.cross[f"b{a}_to_b{b}"](feats[a])
            outs.append(acc)
        return BranchFeatureSet(*outs)


class BranchBuilder(nn.Module):
    """Split a full-resolution map into the four-branch pyramid by strided stacks."""

    def __init__(self, in_channels: int, channels: int, scale_step: int):
        super().__init__()
        self.channels = channels
        self.scale_step = scale_step
        self.stem = ConvBlock(in_channels, channels)
        downs = []
        for b in range(1, N_BRANCHES):
            w_in = channels * scale_step ** (b - 1)
            downs.append(ConvBlock(w_in, w_in * scale_step, stride=scale_step))
        self.downs = nn.ModuleList(downs)

    def forward(self, fused: torch.Tensor) -> BranchFeatureSet:
        h, w = fused.shape[2:]
        div = self.scale_step ** 3
        if h % div or w % div:
            raise ValueError(f"spatial size {(h, w)} not divisible by scale_step**3 = {div}")
        feats = [self.stem(fused)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return BranchFeatureSet(*feats)


class MultiResolutionBackbone(nn.Module):
    def __init__(self, in_channels: int, channels: int, scale_step: int, exchange_blocks: int = 2):
        super().__init__()
        self.builder = BranchBuilder(in_channels, channels, scale_step)
        self.exchanges = nn.ModuleList(
            ExchangeBlock(channels, scale_step) for _ in range(exchange_blocks)
        )
        self.channels = channels
        self.scale_step = scale_step

    def forward(self, fused: torch.Tensor) -> BranchFeatureSet:
        branches = self.builder(fused)
        for block in self.exchanges:
            branches = block(branches)
        return branches
