"""Shared convolutional building blocks: residual units, local and non-local
attention, and the stride-16 feature extractors used by every submodel.

All convolutions use zero "same" padding and LeakyReLU(0.2) activations.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LEAKY_SLOPE = 0.2


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


def deconv3x3(in_ch: int, out_ch: int) -> nn.ConvTranspose2d:
    """Stride-2 transposed conv that exactly doubles spatial size."""
    return nn.ConvTranspose2d(
        in_ch, out_ch, kernel_size=3, stride=2, padding=1, output_padding=1
    )


class ResidualUnit(nn.Module):
    """conv-act-conv with an identity skip; preserves shape."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(F.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        return x + h


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block with a residual connection.

    The affinity matrix is quadratic in the number of spatial positions, so a
    hard budget refuses inputs larger than ``max_positions``; callers apply
    this block only at stride-16 resolution where the budget is ample.
    """

    def __init__(self, channels: int, max_positions: int = 4096) -> None:
        super().__init__()
        inter = max(channels // 2, 1)
        self.inter_channels = inter
        self.max_positions = max_positions
        self.theta = nn.Conv2d(channels, inter, kernel_size=1)
        self.phi = nn.Conv2d(channels, inter, kernel_size=1)
        self.g = nn.Conv2d(channels, inter, kernel_size=1)
        self.out = nn.Conv2d(inter, channels, kernel_size=1)
        # Zero init makes the block an exact identity at the start of training.
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        n = h * w
        if n > self.max_positions:
            raise ValueError(
                f"non-local block over {n} positions exceeds budget {self.max_positions}"
            )
        theta = self.theta(x).reshape(b, self.inter_channels, n).permute(0, 2, 1)
        phi = self.phi(x).reshape(b, self.inter_channels, n)
        g = self.g(x).reshape(b, self.inter_channels, n).permute(0, 2, 1)
        affinity = torch.softmax(torch.bmm(theta, phi), dim=-1)
        y = torch.bmm(affinity, g).permute(0, 2, 1).reshape(b, self.inter_channels, h, w)
        return x + self.out(y)


class LocalAttention(nn.Module):
    """Trunk-and-mask attention: out = trunk(x) * sigmoid(mask_head(x))."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.trunk = nn.Sequential(
            ResidualUnit(channels), ResidualUnit(channels), ResidualUnit(channels)
        )
        self.mask = nn.Sequential(
            ResidualUnit(channels),
            ResidualUnit(channels),
            ResidualUnit(channels),
            nn.Conv2d(channels, channels, kernel_size=1),
            nn.Sigmoid(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.trunk(x) * self.mask(x)


class NonLocalAttention(nn.Module):
    """Local attention whose mask branch first gathers global context."""

    def __init__(self, channels: int, max_positions: int = 4096) -> None:
        super().__init__()
        self.trunk = nn.Sequential(
            ResidualUnit(channels), ResidualUnit(channels), ResidualUnit(channels)
        )
        self.mask = nn.Sequential(
            NonLocalBlock(channels, max_positions=max_positions),
            ResidualUnit(channels),
            ResidualUnit(channels),
            ResidualUnit(channels),
            nn.Conv2d(channels, channels, kernel_size=1),
            nn.Sigmoid(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.trunk(x) * self.mask(x)


class FrameFeatureExtractor(nn.Module):
    """Four stride-2 convs taking frames to stride-16 features.

    in_ch is 3 for a single frame or 6 for a frame pair stacked on channels.
    Spatial dims must be multiples of 16.
    """

    def __init__(self, in_ch: int, width: int) -> None:
        super().__init__()
        self.width = width
        chs = [in_ch, width, width, width, width]
        self.convs = nn.ModuleList(
            conv3x3(chs[i], chs[i + 1], stride=2) for i in range(4)
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not multiples of 16")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < 3:
                x = F.leaky_relu(x, LEAKY_SLOPE)
        return x
