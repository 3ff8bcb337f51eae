"""Three-branch purity regression network over a stack of ``n`` heatmaps.

* area branch: a per-heatmap 3x3 convolution (shared across the ``n``
  channels) clipped to [0, 1] and globally average-pooled, one value per
  heatmap. It starts as ``1 - heatmap`` so pooling yields the exact copper
  fraction.
* mass branch: three strided convolutions down to an 8x8 map and a
  full-extent kernel; its output is added in logit space to the logit of
  the mean area purity and squashed by a logistic.
* rank branch: same encoder shape; its full-extent kernel produces logit
  corrections on top of an ordinal head that reads the predicted mass
  against learnable, ordered level thresholds, plus the mean and spread of
  the area vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DEFAULT_THRESHOLDS

LOGIT_CLIP = 1e-4


class AreaBranch(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, 3, padding=1, padding_mode="replicate")
        self.reset_identity()

    def reset_identity(self) -> None:
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[0, 0, 1, 1] = -1.0
            self.conv.bias.fill_(1.0)

    def forward(self, stack: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, n, H, W)`` impurity maps -> (copper maps, area purities ``(B, n)``)."""
        b, n, h, w = stack.shape
        maps = self.conv(stack.reshape(b * n, 1, h, w)).clamp(0.0, 1.0).reshape(b, n, h, w)
        return maps, maps.mean(dim=(2, 3))


def _encoder(cin: int, size: tuple[int, int]) -> tuple[nn.Sequential, int]:
    h, w = size
    if h % 32 or w % 32:
        raise ValueError(f"heatmap size {size} must be divisible by 32")
    first = h // 32  # stride of the first stage so three stages reach 8x8 at 128px
    enc = nn.Sequential(
        nn.Conv2d(cin, 32, kernel_size=first * 2, stride=first, padding=first // 2), nn.ReLU(inplace=True),
        nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(64, 64, 4, stride=2, padding=1), nn.ReLU(inplace=True),
    )
    with torch.no_grad():
        out = enc(torch.zeros(1, cin, h, w))
    return enc, out.shape[-1]


class MassBranch(nn.Module):
    def __init__(self, cin: int, size: tuple[int, int]):
        super().__init__()
        self.encoder, k = _encoder(cin, size)
        self.head = nn.Conv2d(64, 1, kernel_size=k)  # full-extent kernel -> 1x1
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.area_gain = nn.Parameter(torch.tensor(1.0))
        self.offset = nn.Parameter(torch.tensor(0.0))

    def forward(self, x: torch.Tensor, area_mean: torch.Tensor) -> torch.Tensor:
        a = area_mean.clamp(LOGIT_CLIP, 1 - LOGIT_CLIP)
        z = self.head(self.encoder(x)).flatten(1)[:, 0]
        return self.area_gain * torch.logit(a) + self.offset + z  # mass logit


class RankBranch(nn.Module):
    def __init__(self, cin: int, size: tuple[int, int], thresholds, sharpness: float = 500.0):
        super().__init__()
        L = len(thresholds) + 1
        self.num_levels = L
        self.encoder, k = _encoder(cin, size)
        self.head = nn.Conv2d(64, L, kernel_size=k)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.area_stats = nn.Linear(2, L)
        nn.init.zeros_(self.area_stats.weight)
        nn.init.zeros_(self.area_stats.bias)
        t = torch.tensor(thresholds, dtype=torch.float32)
        self.top = nn.Parameter(t[:1].clone())
        # thresholds stay strictly decreasing: t_j = t_1 - cumsum(softplus(gap))
        gaps = (t[:-1] - t[1:]).clamp_min(1e-4)
        self.gap_raw = nn.Parameter(torch.log(torch.expm1(gaps)))
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(sharpness)))

    def thresholds(self) -> torch.Tensor:
        return torch.cat([self.top, self.top - torch.cumsum(F.softplus(self.gap_raw), 0)])

    def forward(self, x: torch.Tensor, mass: torch.Tensor, area: torch.Tensor) -> torch.Tensor:
        t = self.thresholds()
        s = torch.sigmoid(self.log_sharpness.exp() * (mass[:, None] - t[None, :]))  # P(level <= j)
        ones = torch.ones_like(s[:, :1])
        cum = torch.cat([s, ones], dim=1)
        p = cum - torch.cat([torch.zeros_like(ones), s], dim=1)
        ordinal = torch.log(p.clamp_min(1e-9))
        stats = torch.stack([area.mean(1), area.std(1, unbiased=False)], dim=1)
        corr = self.head(self.encoder(x)).flatten(1) + self.area_stats(stats)
        return ordinal + corr


class PurityNet(nn.Module):
    def __init__(self, n: int = 16, image_size=(128, 128), thresholds=DEFAULT_THRESHOLDS,
                 fuse_features: bool = False, feature_channels: int = 32):
        super().__init__()
        self.n = int(n)
        self.image_size = tuple(int(v) for v in image_size)
        self.fuse_features = bool(fuse_features)
        self.feature_channels = feature_channels if fuse_features else 0
        self.init_thresholds = tuple(float(t) for t in thresholds)
        cin = self.n + self.feature_channels
        self.area_branch = AreaBranch()
        self.mass_branch = MassBranch(cin, self.image_size)
        self.rank_branch = RankBranch(cin, self.image_size, self.init_thresholds)

    @property
    def num_levels(self) -> int:
        return self.rank_branch.num_levels

    def topology(self) -> dict:
        return {
            "arch": "purity-3branch",
            "n": self.n,
            "image_size": list(self.image_size),
            "num_levels": self.num_levels,
            "fuse_features": self.fuse_features,
            "feature_channels": self.feature_channels,
            "init_thresholds": list(self.init_thresholds),
        }

    def branches(self) -> dict[str, nn.Module]:
        return {"area": self.area_branch, "mass": self.mass_branch, "rank": self.rank_branch}

    def set_trainable(self, **flags: bool) -> None:
        for name, module in self.branches().items():
            if name in flags:
                for p in module.parameters():
                    p.requires_grad_(bool(flags[name]))

    def forward(self, stack: torch.Tensor, seg_features: torch.Tensor | None = None) -> dict:
        if stack.dim() != 4 or stack.shape[1] != self.n:
            raise ValueError(f"expected a (B, {self.n}, H, W) stack, got {tuple(stack.shape)}")
        if tuple(stack.shape[2:]) != self.image_size:
            raise ValueError(f"stack spatial size {tuple(stack.shape[2:])} != trained {self.image_size}")
        maps, area = self.area_branch(stack)
        x = maps
        if self.fuse_features:
            if seg_features is None:
                raise ValueError("this model fuses segmentation features; pass seg_features")
            x = torch.cat([maps, seg_features], dim=1)
        mass_logit = self.mass_branch(x, area.mean(1))
        mass = torch.sigmoid(mass_logit)
        # the focal term trains the rank branch only; mass is fitted by the L1 term
        level_logits = self.rank_branch(x, mass.detach(), area)
        return {"area": area, "mass": mass, "mass_logit": mass_logit, "level_logits": level_logits}


@dataclass
class PurityOutput:
    area_purities: np.ndarray
    mass_purity: float
    level_logits: np.ndarray
    level: int


def logits_to_level(level_logits) -> int:
    """argmax + 1; ties resolve to the lower (better) level."""
    return int(np.argmax(np.asarray(level_logits))) + 1


def purity_forward(model: PurityNet, stack: np.ndarray, seg_features: np.ndarray | None = None) -> PurityOutput:
    """Inference on one ``(n, H, W)`` heatmap stack."""
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValueError(f"expected an (n, H, W) stack, got shape {stack.shape}")
    if stack.shape[0] != model.n:
        raise ValueError(f"model expects n={model.n} heatmaps, got {stack.shape[0]}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(stack.astype(np.float32))[None]
        f = None if seg_features is None else torch.from_numpy(np.asarray(seg_features, dtype=np.float32))[None]
        out = model(x, f)
    model.train(was_training)
    logits = out["level_logits"][0].numpy().astype(np.float64)
    return PurityOutput(
        area_purities=out["area"][0].numpy().astype(np.float64),
        mass_purity=float(out["mass"][0]),
        level_logits=logits,
        level=logits_to_level(logits),
    )
