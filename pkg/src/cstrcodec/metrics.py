"""Quality and rate metrics: PSNR, multi-scale SSIM, and BD-rate.

MS-SSIM is differentiable so it can serve directly as a training distortion;
BD-rate compares two rate-distortion curves by integrating the log-rate gap
over their overlapping quality range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

PSNR_CAP_DB = 100.0

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5


def psnr(a: Tensor, b: Tensor, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped for identical inputs."""
    mse = F.mse_loss(a, b).item()
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_val * max_val / mse))


def _gaussian_window(dtype, device) -> Tensor:
    coords = torch.arange(_WIN_SIZE, dtype=dtype, device=device) - (_WIN_SIZE - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * _WIN_SIGMA ** 2))
    return g / g.sum()


def _blur(x: Tensor, win: Tensor) -> Tensor:
    c = x.shape[1]
    w = win.reshape(1, 1, 1, -1).repeat(c, 1, 1, 1)
    x = F.conv2d(x, w, groups=c)
    return F.conv2d(x, w.transpose(2, 3), groups=c)


def _ssim_and_cs(a: Tensor, b: Tensor, max_val: float) -> tuple[Tensor, Tensor]:
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    win = _gaussian_window(a.dtype, a.device)
    mu_a = _blur(a, win)
    mu_b = _blur(b, win)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    sigma_aa = _blur(a * a, win) - mu_aa
    sigma_bb = _blur(b * b, win) - mu_bb
    sigma_ab = _blur(a * b, win) - mu_ab
    cs = (2 * sigma_ab + c2) / (sigma_aa + sigma_bb + c2)
    ssim = ((2 * mu_ab + c1) / (mu_aa + mu_bb + c1)) * cs
    return ssim.mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim(a: Tensor, b: Tensor, max_val: float = 1.0) -> Tensor:
    """Multi-scale SSIM averaged over the batch; differentiable.

    Uses the standard 5 scale weights; when the input is too small for five
    halvings it keeps as many scales as fit (at least one) and renormalizes
    the retained weights.
    """
    if a.shape != b.shape:
        raise ValueError("inputs must have the same shape")
    levels = len(MS_SSIM_WEIGHTS)
    while levels > 1 and min(a.shape[-2:]) // 2 ** (levels - 1) < _WIN_SIZE:
        levels -= 1
    if min(a.shape[-2:]) < _WIN_SIZE:
        raise ValueError(f"inputs smaller than the {_WIN_SIZE}px window")
    weights = torch.tensor(
        MS_SSIM_WEIGHTS[:levels], dtype=a.dtype, device=a.device
    )
    weights = weights / weights.sum()
    cs_stack = []
    for i in range(levels):
        ssim, cs = _ssim_and_cs(a, b, max_val)
        if i < levels - 1:
            cs_stack.append(torch.relu(cs))
            pad_h, pad_w = a.shape[-2] % 2, a.shape[-1] % 2
            a = F.avg_pool2d(a, 2, padding=(pad_h, pad_w))
            b = F.avg_pool2d(b, 2, padding=(pad_h, pad_w))
    cs_stack.append(torch.relu(ssim))
    stack = torch.stack(cs_stack, dim=0)
    return torch.prod(stack ** weights.reshape(-1, 1), dim=0).mean()


def bd_rate(
    anchor: Sequence[tuple[float, float]], test: Sequence[tuple[float, float]]
) -> float:
    """Average bitrate change of ``test`` vs ``anchor`` in percent (negative
    is better).  Each curve is a sequence of (bits_per_pixel, quality) points;
    a cubic fit of log-rate against quality is integrated over the common
    quality interval.
    """
    if len(anchor) < 4 or len(test) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")

    def prep(points):
        pts = sorted(points, key=lambda p: p[1])
        rate = np.array([p[0] for p in pts], dtype=np.float64)
        qual = np.array([p[1] for p in pts], dtype=np.float64)
        if np.any(rate <= 0):
            raise ValueError("rates must be positive")
        return np.log(rate), qual

    log_r1, q1 = prep(anchor)
    log_r2, q2 = prep(test)
    lo = max(q1.min(), q2.min())
    hi = min(q1.max(), q2.max())
    if hi <= lo:
        raise ValueError("quality ranges do not overlap")
    p1 = np.polynomial.polynomial.polyfit(q1, log_r1, 3)
    p2 = np.polynomial.polynomial.polyfit(q2, log_r2, 3)
    int1 = np.polynomial.polynomial.polyint(p1)
    int2 = np.polynomial.polynomial.polyint(p2)
    avg1 = np.polynomial.polynomial.polyval(hi, int1) - np.polynomial.polynomial.polyval(lo, int1)
    avg2 = np.polynomial.polynomial.polyval(hi, int2) - np.polynomial.polynomial.polyval(lo, int2)
    diff = (avg2 - avg1) / (hi - lo)
    return float((math.exp(diff) - 1.0) * 100.0)


def bd_quality(
    anchor: Sequence[tuple[float, float]], test: Sequence[tuple[float, float]]
) -> float:
    """Average quality change of ``test`` vs ``anchor`` at equal rate
    (positive is better), integrating cubic fits of quality against log-rate
    over the common log-rate interval.
    """
    if len(anchor) < 4 or len(test) < 4:
        raise ValueError("BD-quality needs at least 4 points per curve")

    def prep(points):
        pts = sorted(points, key=lambda p: p[0])
        rate = np.array([p[0] for p in pts], dtype=np.float64)
        qual = np.array([p[1] for p in pts], dtype=np.float64)
        if np.any(rate <= 0):
            raise ValueError("rates must be positive")
        return np.log(rate), qual

    log_r1, q1 = prep(anchor)
    log_r2, q2 = prep(test)
    lo = max(log_r1.min(), log_r2.min())
    hi = min(log_r1.max(), log_r2.max())
    if hi <= lo:
        raise ValueError("rate ranges do not overlap")
    p1 = np.polynomial.polynomial.polyfit(log_r1, q1, 3)
    p2 = np.polynomial.polynomial.polyfit(log_r2, q2, 3)
    int1 = np.polynomial.polynomial.polyint(p1)
    int2 = np.polynomial.polynomial.polyint(p2)
    avg1 = np.polynomial.polynomial.polyval(hi, int1) - np.polynomial.polynomial.polyval(lo, int1)
    avg2 = np.polynomial.polynomial.polyval(hi, int2) - np.polynomial.polynomial.polyval(lo, int2)
    return float((avg2 - avg1) / (hi - lo))


@dataclass(frozen=True)
class BdResult:
    """Bitrate change in percent and quality change at equal rate."""

    bd_rate_percent: float
    bd_quality: float


def bd_metrics(
    anchor: Sequence[tuple[float, float]], test: Sequence[tuple[float, float]]
) -> BdResult:
    return BdResult(bd_rate(anchor, test), bd_quality(anchor, test))
