"""Small convolutional building blocks and array <-> tensor helpers."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W, 3) images into a (B, 3, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_images(batch: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor`; returns float32 (B, H, W, 3)."""
    return batch.detach().cpu().permute(0, 2, 3, 1).numpy().astype(np.float32)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projected) shortcut.

    ``norm=True`` adds batch normalisation after each convolution.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, norm: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm1 = nn.BatchNorm2d(out_ch) if norm else nn.Identity()
        self.norm2 = nn.BatchNorm2d(out_ch) if norm else nn.Identity()
        self.act = nn.LeakyReLU(0.1)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class ResidualEncoder(nn.Module):
    """Stack of residual blocks; block ``i`` maps ``widths[i-1] -> widths[i]``
    with stride ``strides[i]``."""

    def __init__(self, in_ch: int, widths: Sequence[int], strides: Sequence[int], norm: bool = True):
        super().__init__()
        if len(widths) != len(strides):
            raise ValueError("widths and strides must have equal length")
        blocks, prev = [], in_ch
        for w, s in zip(widths, strides):
            blocks.append(ResidualBlock(prev, w, s, norm))
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = prev
        self.downsample = int(np.prod(strides))

    def forward(self, x):
        return self.blocks(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
