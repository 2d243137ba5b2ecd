"""Hybrid motion compensation: four decoder heads turn the compound
representation into a predicted frame.

* a flow head drives pixel-space backward warping of the previous
  reconstruction (good for large smooth motion),
* a kernel head drives grouped modulated deformable sampling of the previous
  reconstruction's features (good for fine or irregular motion),
* a weight head blends the two predictions with independent per-pixel,
  per-channel weights in (0, 1),
* a texture head adds a synthesized residual for content that motion cannot
  explain; its input is detached so texture cannot shortcut motion learning.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import LEAKY_SLOPE, conv3x3, deconv3x3


def bilinear_warp(x: Tensor, flow: Tensor) -> Tensor:
    """Backward warp: out(p) = x(p + flow(p)) with bilinear interpolation.

    flow has 2 channels in pixel units: [dx, dy].  Sample coordinates are
    clamped to the image border (edge extension).  Zero flow reproduces the
    input bit-for-bit.
    """
    b, c, h, w = x.shape
    if flow.shape != (b, 2, h, w):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match frame")
    xs = torch.arange(w, device=x.device, dtype=x.dtype).reshape(1, 1, w)
    ys = torch.arange(h, device=x.device, dtype=x.dtype).reshape(1, h, 1)
    px = torch.clamp(xs + flow[:, 0], 0, w - 1)
    py = torch.clamp(ys + flow[:, 1], 0, h - 1)
    x0 = torch.floor(px.detach())
    y0 = torch.floor(py.detach())
    wx = (px - x0).unsqueeze(1)
    wy = (py - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)

    flat = x.reshape(b, c, h * w)

    def gather(yi: Tensor, xi: Tensor) -> Tensor:
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    top = v00 * (1 - wx) + v01 * wx
    bottom = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bottom * wy


def deformable_sample(
    feat: Tensor,
    offsets: Tensor,
    masks: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    groups: int = 4,
    kernel_size: int = 3,
) -> Tensor:
    """Grouped modulated deformable convolution.

    Each of the ``groups`` channel groups shares one offset field per kernel
    tap; every tap's sample is scaled by its modulation mask before the
    ordinary convolution weights combine taps and channels.

    feat:    (B, C, H, W), C divisible by groups
    offsets: (B, 2*groups*K*K, H, W) as (dx, dy) pairs per group and tap
    masks:   (B, groups*K*K, H, W), already in [0, 1]
    weight:  (C_out, C, K, K)
    """
    b, c, h, w = feat.shape
    k2 = kernel_size * kernel_size
    if c % groups:
        raise ValueError("channels must divide evenly into groups")
    if offsets.shape != (b, 2 * groups * k2, h, w):
        raise ValueError(f"bad offsets shape {tuple(offsets.shape)}")
    if masks.shape != (b, groups * k2, h, w):
        raise ValueError(f"bad masks shape {tuple(masks.shape)}")
    half = kernel_size // 2
    cg = c // groups
    offsets = offsets.reshape(b, groups, k2, 2, h, w)
    masks = masks.reshape(b, groups, k2, 1, h, w)
    out = None
    tap = 0
    for ky in range(kernel_size):
        for kx in range(kernel_size):
            # Build one full-channel flow field from the per-group offsets.
            flow = offsets[:, :, tap].unsqueeze(2).expand(b, groups, cg, 2, h, w)
            flow = flow.reshape(b, c, 2, h, w)
            base = torch.tensor(
                [kx - half, ky - half], device=feat.device, dtype=feat.dtype
            ).reshape(1, 1, 2, 1, 1)
            flow = flow + base
            # Warp each channel with its group's field for this tap.
            sampled = bilinear_warp(
                feat.reshape(b * c, 1, h, w),
                flow.reshape(b * c, 2, h, w),
            ).reshape(b, c, h, w)
            mod = masks[:, :, tap].expand(b, groups, cg, h, w).reshape(b, c, h, w)
            contrib = F.conv2d(sampled * mod, weight[:, :, ky : ky + 1, kx : kx + 1])
            out = contrib if out is None else out + contrib
            tap += 1
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class PixelDecoder(nn.Module):
    """Four stride-2 upsampling stages from stride-16 features to pixels."""

    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.ups = nn.ModuleList(
            [deconv3x3(in_ch, in_ch) for _ in range(4)]
        )
        self.head = conv3x3(in_ch, out_ch)

    def forward(self, x: Tensor) -> Tensor:
        for up in self.ups:
            x = F.leaky_relu(up(x), LEAKY_SLOPE)
        return self.head(x)


class HmcPrediction(NamedTuple):
    """All intermediate predictions, kept for multi-stage supervision."""

    warped: Optional[Tensor]       # flow branch output
    compensated: Optional[Tensor]  # kernel branch output
    fused: Tensor                  # weighted blend (or the single branch)
    refined: Tensor                # fused plus synthesized texture
    flow: Optional[Tensor]
    weights: Optional[Tensor]

    def stages(self) -> list[Tensor]:
        """Predictions in pipeline order, skipping disabled branches."""
        out = [t for t in (self.warped, self.compensated) if t is not None]
        out.append(self.fused)
        if self.refined is not self.fused:
            out.append(self.refined)
        return out


class HybridMotionCompensator(nn.Module):
    def __init__(
        self,
        channels: int,
        groups: int = 4,
        use_vector: bool = True,
        use_kernel: bool = True,
        use_texture: bool = True,
    ) -> None:
        super().__init__()
        if not (use_vector or use_kernel):
            raise ValueError("at least one motion branch must be enabled")
        if channels % groups:
            raise ValueError("channels must divide evenly into groups")
        self.channels = channels
        self.groups = groups
        self.use_vector = use_vector
        self.use_kernel = use_kernel
        self.use_texture = use_texture
        k2 = 9
        if use_vector:
            self.flow_decoder = PixelDecoder(channels, 2)
        if use_kernel:
            self.offset_head = conv3x3(channels, 2 * groups * k2)
            self.mask_head = conv3x3(channels, groups * k2)
            self.deform_weight = nn.Parameter(
                torch.empty(channels, channels, 3, 3)
            )
            nn.init.kaiming_uniform_(self.deform_weight, a=LEAKY_SLOPE)
            self.deform_bias = nn.Parameter(torch.zeros(channels))
            self.feature_decoder = PixelDecoder(channels, 3)
        if use_vector and use_kernel:
            self.weight_decoder = PixelDecoder(channels, 6)
        if use_texture:
            self.texture_decoder = PixelDecoder(channels, 3)

    def forward(self, g: Tensor, prev_frame: Tensor, prev_feat: Tensor) -> HmcPrediction:
        """g: compound representation at stride 16; prev_frame: last
        reconstruction in pixels; prev_feat: its stride-16 features."""
        warped = compensated = flow = weights = None
        if self.use_vector:
            flow = self.flow_decoder(g)
            warped = bilinear_warp(prev_frame, flow)
        if self.use_kernel:
            offsets = self.offset_head(g)
            masks = torch.sigmoid(self.mask_head(g))
            comp_feat = deformable_sample(
                prev_feat,
                offsets,
                masks,
                self.deform_weight,
                self.deform_bias,
                groups=self.groups,
            )
            compensated = self.feature_decoder(comp_feat)
        if self.use_vector and self.use_kernel:
            weights = torch.sigmoid(self.weight_decoder(g))
            w1, w2 = torch.chunk(weights, 2, dim=1)
            fused = w1 * warped + w2 * compensated
        else:
            fused = warped if warped is not None else compensated
        if self.use_texture:
            texture = self.texture_decoder(g.detach())
            refined = fused + texture
        else:
            refined = fused
        return HmcPrediction(warped, compensated, fused, refined, flow, weights)


def save_motion_diagnostics(pred: HmcPrediction, path: str) -> None:
    """Render flow magnitude and blend weights to an image file for debugging."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = []
    if pred.flow is not None:
        mag = pred.flow[0].detach().pow(2).sum(0).sqrt()
        panels.append(("flow magnitude (px)", mag.numpy()))
    if pred.weights is not None:
        w1, w2 = torch.chunk(pred.weights, 2, dim=1)
        panels.append(("vector weight (mean)", w1[0].detach().mean(0).numpy()))
        panels.append(("kernel weight (mean)", w2[0].detach().mean(0).numpy()))
    panels.append(("prediction (luma)", pred.refined[0].detach().mean(0).numpy()))
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, img) in zip(axes, panels):
        im = ax.imshow(img)
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
