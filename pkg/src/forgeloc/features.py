"""Feature extraction and fusion: RGB stem, learned noise residual, fixed
high-pass residuals, blockwise-DCT frequency branch, and dual-attention fusion
with channel thresholding and learnable branch weighting."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

# fixed high-pass residual kernels (first-order, second-order, 5x5 square),
# applied per input channel with frozen weights
_FIRST_ORDER = [[0, 0, 0], [0, -1, 1], [0, 0, 0]]
_SECOND_ORDER = [[0, 0, 0], [1, -2, 1], [0, 0, 0]]
_SQUARE_5X5 = [
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
]


def srm_kernels(dtype=torch.float32) -> torch.Tensor:
    """The three residual kernels embedded in 5x5, shape (3, 5, 5)."""
    kernels = torch.zeros(3, 5, 5, dtype=dtype)
    kernels[0, 1:4, 1:4] = torch.tensor(_FIRST_ORDER, dtype=dtype)
    kernels[1, 1:4, 1:4] = torch.tensor(_SECOND_ORDER, dtype=dtype) / 2.0
    kernels[2] = torch.tensor(_SQUARE_5X5, dtype=dtype) / 12.0
    return kernels


def _check_image(image: torch.Tensor) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (B,3,H,W) image batch, got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")


class SrmExtractor(nn.Module):
    """Fixed high-pass residuals: 3 kernels x 3 channels -> 9 output channels."""

    def __init__(self):
        super().__init__()
        weight = srm_kernels().repeat(3, 1, 1).unsqueeze(1)  # (9,1,5,5), groups=3
        self.register_buffer("weight", weight)

    @property
    def out_channels(self) -> int:
        return 9

    def forward(self, image):
        _check_image(image)
        return F.conv2d(image, self.weight.to(image.dtype), padding=2, groups=3)


class NoiseExtractor(nn.Module):
    """Residual of a shallow learned denoiser, projected to `out_channels`.

    The denoiser predicts a cleaned image; the residual (input minus
    prediction) feeds a 1x1 head, so a zero-initialized head yields an
    exactly-zero feature map.
    """

    def __init__(self, out_channels: int, hidden: int = 16):
        super().__init__()
        layers = [nn.Conv2d(3, hidden, 3, padding=1), nn.ReLU()]
        for _ in range(3):
            layers += [nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU()]
        layers += [nn.Conv2d(hidden, 3, 3, padding=1)]
        self.denoiser = nn.Sequential(*layers)
        self.head = nn.Conv2d(3, out_channels, 1)
        self.out_channels = out_channels

    def forward(self, image):
        _check_image(image)
        residual = image - self.denoiser(image)
        return self.head(residual)


def dct_matrix(n: int = 8, dtype=torch.float64) -> torch.Tensor:
    """Orthonormal type-II DCT matrix (rows are basis vectors)."""
    k = torch.arange(n, dtype=dtype).unsqueeze(1)
    x = torch.arange(n, dtype=dtype).unsqueeze(0)
    mat = torch.cos(math.pi * (2 * x + 1) * k / (2 * n))
    mat[0] *= math.sqrt(1.0 / n)
    mat[1:] *= math.sqrt(2.0 / n)
    return mat


def to_luma(image: torch.Tensor) -> torch.Tensor:
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=image.dtype, device=image.device)
    return (image * weights.view(1, 3, 1, 1)).sum(dim=1)


def blockwise_dct(luma: torch.Tensor, block: int = 8) -> torch.Tensor:
    """(B,H,W) luma -> (B, block*block, H/block, W/block) DCT coefficients."""
    if luma.dim() != 3:
        raise ValueError(f"expected (B,H,W) luma, got {tuple(luma.shape)}")
    b, h, w = luma.shape
    if h % block or w % block:
        raise ValueError(f"spatial size {(h, w)} must be a multiple of {block}")
    mat = dct_matrix(block).to(dtype=luma.dtype, device=luma.device)
    tiles = luma.reshape(b, h // block, block, w // block, block).permute(0, 1, 3, 2, 4)
    coeffs = torch.einsum("ij,bhwjk,lk->bhwil", mat, tiles, mat)
    return coeffs.permute(0, 3, 4, 1, 2).reshape(b, block * block, h // block, w // block)


class FrequencyBranch(nn.Module):
    """Blockwise-DCT magnitudes of the luma channel, projected and upsampled."""

    def __init__(self, out_channels: int, block: int = 8):
        super().__init__()
        self.block = block
        self.proj = nn.Conv2d(block * block, out_channels, 1)
        self.out_channels = out_channels

    def forward(self, image):
        _check_image(image)
        coeffs = blockwise_dct(to_luma(image), self.block)
        feat = self.proj(coeffs.abs())
        return F.interpolate(feat, scale_factor=self.block, mode="bilinear", align_corners=False)


def threshold_gate(weights: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """Soft shrinkage of channel weights: channels at or below tau are zeroed."""
    tau = torch.as_tensor(tau, dtype=weights.dtype, device=weights.device)
    if (tau < 0).any():
        raise ValueError("tau must be >= 0")
    if (tau >= 1).any():
        raise ValueError("tau must be < 1")
    return torch.clamp(torch.clamp(weights - tau, min=0) / (1 - tau), max=1.0)


class ChannelAttention(nn.Module):
    """Squeeze-excite channel weights with a learnable per-channel threshold gate."""

    def __init__(self, channels: int, squeeze_ratio: int = 4, tau_max: float = 0.9):
        super().__init__()
        hidden = max(1, channels // squeeze_ratio)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.tau_max = tau_max
        # sigmoid(-2.83) * 0.9 ~ 0.05 initial threshold
        self.raw_tau = nn.Parameter(torch.full((channels,), -2.83))

    @property
    def tau(self) -> torch.Tensor:
        return torch.sigmoid(self.raw_tau) * self.tau_max

    def forward(self, x):
        pooled = x.mean(dim=(2, 3))
        weights = torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))
        gated = threshold_gate(weights, self.tau.to(x.dtype))
        return x * gated.unsqueeze(-1).unsqueeze(-1), weights


class PositionAttention(nn.Module):
    """Spatial self-attention over projected queries/keys.

    Exact all-pairs attention when the input has at most `max_keys` positions;
    above that, keys and values are average-pooled to at most `max_keys`
    positions so the cost stays near-linear. Affinity rows always sum to 1.
    """

    def __init__(self, channels: int, max_keys: int = 256):
        super().__init__()
        inner = max(1, channels // 8)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.max_keys = max_keys

    def _pooled(self, feat):
        b, c, h, w = feat.shape
        if h * w <= self.max_keys:
            return feat
        side = max(1, int(math.isqrt(self.max_keys)))
        return F.adaptive_avg_pool2d(feat, (min(h, side), min(w, side)))

    def affinity(self, x):
        b, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)          # (B, N, d)
        k = self.key(self._pooled(x)).flatten(2)              # (B, d, M)
        return torch.softmax(torch.bmm(q, k), dim=-1)         # (B, N, M)

    def forward(self, x):
        b, c, h, w = x.shape
        aff = self.affinity(x)
        v = self.value(self._pooled(x)).flatten(2).transpose(1, 2)  # (B, M, C)
        out = torch.bmm(aff, v)                                      # (B, N, C)
        return out.transpose(1, 2).reshape(b, c, h, w)


class DualAttentionFusion(nn.Module):
    """Project concatenated branch features to a common width, then blend the
    channel-attention path, position-attention path and the projected input
    with learnable scalar weights."""

    def __init__(self, in_channels: int, channels: int, max_keys: int = 256):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, channels, 1)
        self.ca = ChannelAttention(channels)
        self.pa = PositionAttention(channels, max_keys=max_keys)
        self.lambda_ca = nn.Parameter(torch.tensor(0.1))
        self.lambda_pa = nn.Parameter(torch.tensor(0.1))
        self.lambda_res = nn.Parameter(torch.tensor(1.0))
        self.out_channels = channels

    def forward(self, f_rgb, f_noise=None):
        if f_noise is not None:
            if f_rgb.shape[2:] != f_noise.shape[2:]:
                raise ValueError(
                    f"spatial mismatch: {tuple(f_rgb.shape[2:])} vs {tuple(f_noise.shape[2:])}"
                )
            x = torch.cat([f_rgb, f_noise], dim=1)
        else:
            x = f_rgb
        f_in = self.proj(x)
        ca_out, _ = self.ca(f_in)
        pa_out = self.pa(f_in)
        return self.lambda_ca * ca_out + self.lambda_pa * pa_out + self.lambda_res * f_in


class ConcatFusion(nn.Module):
    """Plain concatenation + projection; the no-attention ablation of the fuser."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, channels, 1)
        self.out_channels = channels

    def forward(self, f_rgb, f_noise=None):
        if f_noise is not None:
            if f_rgb.shape[2:] != f_noise.shape[2:]:
                raise ValueError(
                    f"spatial mismatch: {tuple(f_rgb.shape[2:])} vs {tuple(f_noise.shape[2:])}"
                )
            x = torch.cat([f_rgb, f_noise], dim=1)
        else:
            x = f_rgb
        return self.proj(x)


class SpatialFrequencyCombiner(nn.Module):
    """Softmax-weighted sum of the spatial and frequency feature maps."""

    def __init__(self, channels: int, freq_channels: int | None = None):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(0.0))
        self.beta = nn.Parameter(torch.tensor(0.0))
        freq_channels = channels if freq_channels is None else freq_channels
        self.proj = nn.Conv2d(freq_channels, channels, 1) if freq_channels != channels else None

    def mix_weights(self):
        return torch.softmax(torch.stack([self.alpha, self.beta]), dim=0)

    def forward(self, f_spatial, f_freq):
        if f_spatial.shape[2:] != f_freq.shape[2:]:
            raise ValueError(
                f"spatial mismatch: {tuple(f_spatial.shape[2:])} vs {tuple(f_freq.shape[2:])}"
            )
        if self.proj is not None:
            f_freq = self.proj(f_freq)
        w = self.mix_weights().to(f_spatial.dtype)
        return w[0] * f_spatial + w[1] * f_freq


class FeatureEnhancer(nn.Module):
    """Full front end: stem(s), noise/high-pass branch, attention fusion, and
    the spatial/frequency combination, honoring the branch toggles."""

    def __init__(self, channels: int, use_rgb=True, use_noise=True, use_srm=False,
                 use_frequency=True, use_dam=True, max_keys: int = 256):
        super().__init__()
        if not (use_rgb or use_noise or use_srm):
            raise ValueError("at least one spatial branch must be enabled")
        self.use_rgb = use_rgb
        self.use_noise = use_noise
        self.use_srm = use_srm
        self.use_frequency = use_frequency

        in_ch = 0
        if use_rgb:
            self.rgb_stem = nn.Sequential(nn.Conv2d(3, channels, 3, padding=1), nn.ReLU())
            in_ch += channels
        if use_noise:
            self.noise = NoiseExtractor(channels)
            in_ch += channels
        if use_srm:
            self.srm = SrmExtractor()
            in_ch += self.srm.out_channels
        if use_frequency:
            self.frequency = FrequencyBranch(channels)
            self.combiner = SpatialFrequencyCombiner(channels)
        fusion_cls = DualAttentionFusion if use_dam else ConcatFusion
        if use_dam:
            self.fusion = fusion_cls(in_ch, channels, max_keys=max_keys)
        else:
            self.fusion = fusion_cls(in_ch, channels)
        self.out_channels = channels

    def forward(self, image):
        _check_image(image)
        parts = []
        if self.use_rgb:
            parts.append(self.rgb_stem(image))
        if self.use_noise:
            parts.append(self.noise(image))
        if self.use_srm:
            parts.append(self.srm(image))
        stacked = torch.cat(parts, dim=1) if len(parts) > 1 else parts[0]
        f_spatial = self.fusion(stacked)
        if self.use_frequency:
            return self.combiner(f_spatial, self.frequency(image))
        return f_spatial
