"""Small convolutional feature extractor with unit-normalized outputs."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as Fn

from .diffcore import default_dtype


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class FeatureExtractor(nn.Module):
    """Strided conv stack -> (H/stride, W/stride, d) unit features.

    ``channels`` lists the widths of the conv stages; the first ``log2(stride)``
    downsample by two with 4x4 kernels (so output pixel ``j`` is centred on
    input coordinate ``(j + .5) * stride``, matching the rasterizer's pixel
    centres), the rest are 3x3 at constant resolution, and a final 1x1
    convolution projects to ``dim``.
    """

    def __init__(self, dim: int = 64, stride: int = 8, channels=(16, 32, 64, 64), in_channels: int = 3,
                 dtype: torch.dtype | None = None):
        super().__init__()
        n_down = int(round(math.log2(stride)))
        if 2**n_down != stride:
            raise ValueError("stride must be a power of two")
        if len(channels) < n_down:
            raise ValueError("need at least log2(stride) conv stages")
        self.dim, self.stride, self.channels = int(dim), int(stride), tuple(int(c) for c in channels)
        layers = []
        prev = in_channels
        for i, c in enumerate(self.channels):
            # 4x4 stride-2 kernels keep output centres on (j + .5) * 2 of the input grid
            conv = nn.Conv2d(prev, c, 4, stride=2, padding=1) if i < n_down else nn.Conv2d(prev, c, 3, padding=1)
            layers += [conv, nn.GroupNorm(_groups(c), c), nn.ReLU()]
            prev = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, self.dim, 1)
        # the network may run in 32-bit; its output is cast back to the working precision
        self.to(dtype or default_dtype())

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``images`` (N, H, W, 3) in [0, 1] -> features (N, H/s, W/s, d)."""
        if images.shape[1] % self.stride or images.shape[2] % self.stride:
            raise ValueError(f"image size {tuple(images.shape[1:3])} not divisible by stride {self.stride}")
        x = images.permute(0, 3, 1, 2).to(self.head.weight.dtype) - 0.5
        x = self.head(self.body(x))
        x = Fn.normalize(x, dim=1, eps=1e-12)
        return x.permute(0, 2, 3, 1).to(default_dtype())

    def config(self) -> dict:
        return {"dim": self.dim, "stride": self.stride, "channels": list(self.channels)}


def extract_features(extractor: FeatureExtractor, images, batch_size: int = 32) -> np.ndarray:
    """Eval-mode feature maps for a stack of images (uint8 or float)."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    out = []
    with torch.no_grad():
        for i in range(0, len(arr), batch_size):
            x = torch.as_tensor(arr[i:i + batch_size], dtype=extractor.head.weight.dtype)
            out.append(extractor(x).cpu().numpy().astype(np.float64))
    return np.concatenate(out)
