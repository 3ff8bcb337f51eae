"""Segmentation subnetwork: RGB granule image -> per-pixel copper/impurity probabilities.

A compact encoder-decoder with a dilated-convolution context block at the
stride-8 bottleneck, one skip connection from the stride-2 stage and a
bilinear-upsampling decoder that ends at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import check_divisible

FEATURE_CHANNELS = 32
DOWNSAMPLE = 8


def conv_bn(cin: int, cout: int, k: int = 3, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class DilatedContext(nn.Module):
    """Parallel 1x1 / dilated 3x3 / image-pool branches fused by a 1x1 conv."""

    def __init__(self, cin: int, cout: int, rates=(2, 4)):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn(cin, cout, k=1)] + [conv_bn(cin, cout, dilation=r) for r in rates]
        )
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, h, w))
        return self.project(torch.cat(outs, dim=1))


class SegNet(nn.Module):
    def __init__(self, width: int = 16, rates=(2, 4)):
        super().__init__()
        w = width
        self.width = width
        self.rates = tuple(rates)
        self.stem = nn.Sequential(conv_bn(3, w, stride=2), conv_bn(w, w))
        self.down2 = conv_bn(w, 2 * w, stride=2)
        self.down3 = nn.Sequential(conv_bn(2 * w, 4 * w, stride=2), conv_bn(4 * w, 4 * w))
        self.context = DilatedContext(4 * w, 2 * w, rates)
        self.skip = conv_bn(w, w, k=1)
        self.decode = conv_bn(3 * w, 2 * w)
        # full-resolution head sees raw colour so boundaries stay pixel-sharp
        self.refine = nn.Sequential(nn.Conv2d(2 * w + 3, FEATURE_CHANNELS, 1), nn.ReLU(inplace=True))
        self.classifier = nn.Conv2d(FEATURE_CHANNELS, 2, 1)

    def topology(self) -> dict:
        return {
            "arch": "segnet-dilated",
            "width": self.width,
            "context_rates": list(self.rates),
            "downsample": DOWNSAMPLE,
            "skip_from": "stride2",
            "feature_channels": FEATURE_CHANNELS,
        }

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(logits, features)``, both at input resolution."""
        check_divisible(x.shape[-2:], DOWNSAMPLE)
        s2 = self.stem(x)
        s8 = self.down3(self.down2(s2))
        ctx = self.context(s8)
        up = F.interpolate(ctx, size=s2.shape[-2:], mode="bilinear", align_corners=False)
        dec = self.decode(torch.cat([up, self.skip(s2)], dim=1))
        dec = F.interpolate(dec, size=x.shape[-2:], mode="bilinear", align_corners=False)
        feats = self.refine(torch.cat([dec, x], dim=1))
        return self.classifier(feats), feats


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, 3)`` uint8 -> ``(N, 3, H, W)`` float in [-0.5, 0.5]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return t / 255.0 - 0.5


@dataclass
class SegOutput:
    probabilities: np.ndarray  # (2, H, W) or (N, 2, H, W)
    features: np.ndarray  # (C, H, W) or (N, C, H, W)


def seg_forward(model: SegNet, image: np.ndarray, batch_size: int = 16) -> SegOutput:
    """Inference-mode forward pass for one ``(H, W, 3)`` image or a batch."""
    single = image.ndim == 3
    images = image[None] if single else image
    check_divisible(images.shape[1:3], DOWNSAMPLE)
    was_training = model.training
    model.eval()
    probs, feats = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            logits, f = model(images_to_tensor(images[i:i + batch_size]))
            probs.append(torch.softmax(logits, dim=1).numpy())
            feats.append(f.numpy())
    model.train(was_training)
    p, f = np.concatenate(probs), np.concatenate(feats)
    return SegOutput(p[0], f[0]) if single else SegOutput(p, f)


def predict_heatmap(out: SegOutput | np.ndarray) -> np.ndarray:
    """Per-pixel argmax of class probabilities; exact ties go to copper (0)."""
    p = out.probabilities if isinstance(out, SegOutput) else np.asarray(out)
    return (p[..., 1, :, :] > p[..., 0, :, :]).astype(np.uint8)
