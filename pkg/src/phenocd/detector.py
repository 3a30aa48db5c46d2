"""Twin-backbone change detector: shared extractor, difference fusion
(differential attention, concat or subtract), spatial pyramid block and a
change head."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffcore as dc
from .config import DetectorConfig
from .errors import ConfigError, ShapeError


def conv_bn_relu(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    )


class Backbone(nn.Module):
    """Small two-resolution extractor producing C channels at stride 4.

    stem (s2) -> high branch (s4) and low branch (s8) -> one bilateral
    exchange -> low branch upsampled, concatenated, fused by a 1x1 conv.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.stem = conv_bn_relu(3, max(c // 2, 1), stride=2)
        self.down_hi = conv_bn_relu(max(c // 2, 1), c, stride=2)
        self.down_lo = conv_bn_relu(c, c, stride=2)
        self.lo_to_hi = nn.Sequential(nn.Conv2d(c, c, 1, bias=False), nn.BatchNorm2d(c))
        self.hi_to_lo = nn.Sequential(nn.Conv2d(c, c, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(c))
        self.hi_block = conv_bn_relu(c, c)
        self.lo_block = conv_bn_relu(c, c)
        self.fuse = conv_bn_relu(2 * c, c, k=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"extract_features: expected N x 3 x H x W, got {tuple(x.shape)}")
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ShapeError(f"extract_features: H and W must be divisible by 4, got {tuple(x.shape[-2:])}")
        hi = self.down_hi(self.stem(x))
        lo = self.down_lo(hi)
        size = hi.shape[-2:]
        hi, lo = (
            F.relu(hi + dc.upsample(self.lo_to_hi(lo), size)),
            F.relu(lo + self.hi_to_lo(hi)),
        )
        hi = self.hi_block(hi)
        lo = self.lo_block(lo)
        return self.fuse(dc.concat([hi, dc.upsample(lo, size)]))


class DifferentialAttention(nn.Module):
    """Difference branch on concatenated features, gated by channel attention
    (pooled bottleneck) and positional attention (mean/max of |f1 - f2|)."""

    def __init__(self, channels: int, reduction: int = 4, kernel: int = 7):
        super().__init__()
        c = channels
        self.diff = nn.Sequential(
            nn.Conv2d(2 * c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )
        self.channel_att = nn.Sequential(
            nn.Conv2d(2 * c, c // reduction, 1),
            nn.ReLU(),
            nn.Conv2d(c // reduction, c, 1),
        )
        self.position_att = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def attention(self, f1: torch.Tensor, f2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        joint = dc.concat([f1, f2])
        ca = torch.sigmoid(self.channel_att(dc.global_mean(joint)))
        delta = dc.absdiff(f1, f2)
        stats = dc.concat([delta.mean(dim=1, keepdim=True), delta.amax(dim=1, keepdim=True)])
        pa = torch.sigmoid(self.position_att(stats))
        return ca, pa

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        dc._same("dam", f1, f2)
        d = self.diff(dc.concat([f1, f2]))
        ca, pa = self.attention(f1, f2)
        return d * ca * pa


class ConcatFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.diff = nn.Sequential(
            nn.Conv2d(2 * c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, f1, f2):
        dc._same("concat_fusion", f1, f2)
        return self.diff(dc.concat([f1, f2]))


class SubtractFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.diff = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, f1, f2):
        return self.diff(dc.absdiff(f1, f2))


def split_channels(total: int, parts: int) -> list[int]:
    """Near-equal integer widths summing to ``total``; earlier parts get the remainder."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


class SpatialPyramid(nn.Module):
    """Pool to each scale, 1x1 conv/BN/ReLU, upsample back, concat with input.

    Branch widths split C across scales, so the output has 2C channels.
    """

    def __init__(self, channels: int, scales=(1, 2, 4)):
        super().__init__()
        self.scales = tuple(scales)
        widths = split_channels(channels, len(self.scales))
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(channels, w, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
            for w in widths
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if max(self.scales) > min(h, w):
            raise ConfigError(f"spb: scale {max(self.scales)} exceeds feature size {h}x{w}")
        outs = [x]
        for s, branch in zip(self.scales, self.branches):
            outs.append(dc.upsample(branch(F.adaptive_avg_pool2d(x, s)), (h, w)))
        return dc.concat(outs)


class Head(nn.Module):
    """conv3x3 -> ReLU -> conv1x1 producing low-resolution logits."""

    def __init__(self, cin: int, hidden: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(cin, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, cout, 1))

    def forward(self, x):
        return self.body(x)


class DetectorOutput(NamedTuple):
    prob: torch.Tensor  # N x 1 x H x W
    logits: torch.Tensor  # N x 1 x H x W, pre-sigmoid
    logits_low: torch.Tensor  # N x 1 x h x w
    change_features: torch.Tensor  # N x C x h x w
    features: tuple[torch.Tensor, torch.Tensor]


class ChangeDetector(nn.Module):
    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config = config or DetectorConfig()
        c = config.channels
        self.backbone = Backbone(c)
        if config.fusion == "dam":
            self.fusion = DifferentialAttention(c, config.reduction)
        elif config.fusion == "concat":
            self.fusion = ConcatFusion(c)
        elif config.fusion == "subtract":
            self.fusion = SubtractFusion(c)
        else:
            raise ConfigError(f"unknown fusion mode {config.fusion!r}")
        self.spb = SpatialPyramid(c, config.spb_scales) if config.use_spb else nn.Identity()
        self.head = Head(2 * c if config.use_spb else c, config.head_hidden, 1)

    def extract_features(self, image: torch.Tensor) -> torch.Tensor:
        return self.backbone(image)

    def features(self, x1: torch.Tensor, x2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x1.shape != x2.shape:
            raise ShapeError(f"detect: image shapes differ {tuple(x1.shape)} vs {tuple(x2.shape)}")
        # One pass over both dates: shared weights, shared batch statistics.
        both = self.backbone(torch.cat([x1, x2], dim=0))
        return both[: x1.shape[0]], both[x1.shape[0]:]

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> DetectorOutput:
        f1, f2 = self.features(x1, x2)
        change = self.fusion(f1, f2)
        low = self.head(self.spb(change))
        logits = dc.upsample(low, x1.shape[-2:])
        return DetectorOutput(torch.sigmoid(logits), logits, low, change, (f1, f2))

    detect = forward


def detector_variant(mode: str, config: DetectorConfig | None = None) -> ChangeDetector:
    config = config or DetectorConfig()
    return ChangeDetector(config.model_copy(update={"fusion": mode}))


def binarize(prob: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Ties at the threshold count as change."""
    return (prob >= threshold).to(torch.uint8)


def to_tensor(images) -> torch.Tensor:
    """H x W x 3 array(s) in [0, 1] to an N x 3 x H x W float tensor."""
    t = torch.as_tensor(images, dtype=torch.float32)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
