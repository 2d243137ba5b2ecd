"""Learned probability models for quantized latents.

Two families cover every coded tensor:

* ``GaussianConditional``: integrated Gaussian likelihood with per-element
  mean and scale predicted by a hyper network.  Coding quantizes the scale to
  64 log-spaced levels and the fractional mean offset to 64 linear levels so
  encoder and decoder build identical frequency tables.
* ``FactorizedPrior``: a per-channel non-parametric density built from a small
  monotone network, used for the hyper latent that has no side information.

Both expose a ``forward`` for differentiable rate estimation and
``compress``/``decompress`` for bit-exact coding via the range coder.
"""

from __future__ import annotations

import math
import struct
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .rangecoder import (
    CDF_TOTAL,
    CdfTable,
    CodingError,
    freqs_to_cdf,
    quantize_pmf,
    range_decode,
    range_encode,
)

SCALE_MIN = 0.11
SCALE_MAX = 256.0
SCALE_LEVELS = 64
MEAN_LEVELS = 64
LIKELIHOOD_MIN = 1e-9

_LOG_SCALE_RATIO = math.log(SCALE_MAX / SCALE_MIN)
_LOG2 = math.log(2.0)


def quantize_noise(x: Tensor) -> Tensor:
    """Additive uniform noise on [-0.5, 0.5); the training proxy for rounding."""
    return x + torch.empty_like(x).uniform_(-0.5, 0.5)


def quantize_ste(x: Tensor) -> Tensor:
    """Round in the forward pass, identity gradient in the backward pass."""
    return x + (torch.round(x) - x).detach()


def quantize_round(x: Tensor) -> Tensor:
    """Plain rounding (ties to even); the deterministic evaluation quantizer."""
    return torch.round(x)


def quantize(x: Tensor, mode: str) -> Tensor:
    """Dispatch on mode: 'noise' and 'ste' for training, 'round' for eval."""
    if mode == "noise":
        return quantize_noise(x)
    if mode == "ste":
        return quantize_ste(x)
    if mode == "round":
        return quantize_round(x)
    raise ValueError(f"unknown quantize mode {mode!r}")


class RateEstimate(NamedTuple):
    """Differentiable code-length estimate in bits."""

    total_bits: Tensor
    per_element_bits: Tensor


def rate_bits(likelihood: Tensor) -> RateEstimate:
    per_element = -torch.log2(torch.clamp(likelihood, min=LIKELIHOOD_MIN))
    return RateEstimate(per_element.sum(), per_element)


def _std_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF via erfc; stable in both tails."""
    return 0.5 * torch.erfc(-x * (2 ** -0.5))


class GaussianConditional(nn.Module):
    """Integrated Gaussian likelihood with quantized-parameter coding tables.

    Has no learnable parameters; it carries only a lazily filled cache of
    frequency-table rows keyed by (support radius, scale level, mean level).
    """

    def __init__(self) -> None:
        super().__init__()
        self._row_cache: dict[tuple[int, int, int], np.ndarray] = {}

    def likelihood(self, y_hat: Tensor, means: Tensor, scales: Tensor) -> Tensor:
        scales = torch.clamp(scales, min=SCALE_MIN)
        values = torch.abs(y_hat - means)
        upper = _std_cdf((0.5 - values) / scales)
        lower = _std_cdf((-0.5 - values) / scales)
        return upper - lower

    def forward(
        self, y: Tensor, means: Tensor, scales: Tensor, mode: str
    ) -> tuple[Tensor, Tensor]:
        y_hat = quantize(y, mode)
        return y_hat, self.likelihood(y_hat, means, scales)

    @staticmethod
    def _scale_index(scales: Tensor) -> Tensor:
        s = torch.clamp(scales.detach(), SCALE_MIN, SCALE_MAX)
        idx = torch.round(torch.log(s / SCALE_MIN) / _LOG_SCALE_RATIO * (SCALE_LEVELS - 1))
        return idx.to(torch.int64)

    @staticmethod
    def _mean_index(means: Tensor) -> tuple[Tensor, Tensor]:
        mu_round = torch.round(means.detach())
        frac = means.detach() - mu_round
        idx = torch.round((frac + 0.5) * (MEAN_LEVELS - 1))
        idx = torch.clamp(idx, 0, MEAN_LEVELS - 1)
        return mu_round, idx.to(torch.int64)

    def _row(self, radius: int, s_idx: int, d_idx: int) -> np.ndarray:
        key = (radius, s_idx, d_idx)
        row = self._row_cache.get(key)
        if row is not None:
            return row
        sigma = SCALE_MIN * math.exp(s_idx / (SCALE_LEVELS - 1) * _LOG_SCALE_RATIO)
        delta = d_idx / (MEAN_LEVELS - 1) - 0.5
        k = torch.arange(-radius, radius + 1, dtype=torch.float64)
        centered = (k - delta) / sigma
        upper = _std_cdf(centered + 0.5 / sigma)
        lower = _std_cdf(centered - 0.5 / sigma)
        pmf = (upper - lower).numpy()
        # Fold the open tails into the edge bins so mass sums to one.
        pmf[0] += float(lower[0])
        pmf[-1] += float(1.0 - upper[-1])
        row = freqs_to_cdf(quantize_pmf(pmf))
        self._row_cache[key] = row
        return row

    def _tables(
        self, means: Tensor, scales: Tensor, radius: int
    ) -> tuple[CdfTable, Tensor]:
        mu_round, d_idx = self._mean_index(means)
        s_idx = self._scale_index(scales)
        pair = (s_idx * MEAN_LEVELS + d_idx).reshape(-1).numpy()
        uniq, inverse = np.unique(pair, return_inverse=True)
        rows = [self._row(radius, int(p) // MEAN_LEVELS, int(p) % MEAN_LEVELS) for p in uniq]
        lower = np.full(len(rows), -radius, dtype=np.int64)
        return CdfTable(rows, lower, inverse), mu_round

    def compress(self, y: Tensor, means: Tensor, scales: Tensor) -> bytes:
        """Code round(y) exactly; the payload embeds the symbol support radius."""
        y_hat = torch.round(y.detach())
        mu_round = torch.round(means.detach())
        symbols = (y_hat - mu_round).to(torch.int64).reshape(-1).numpy()
        radius = int(np.abs(symbols).max()) if symbols.size else 0
        if radius > 30000:
            raise CodingError(f"symbol radius {radius} too large to code")
        table, _ = self._tables(means, scales, radius)
        return struct.pack("<H", radius) + range_encode(symbols, table)

    def decompress(
        self, data: bytes, means: Tensor, scales: Tensor, shape: tuple[int, ...]
    ) -> Tensor:
        (radius,) = struct.unpack_from("<H", data, 0)
        table, mu_round = self._tables(means, scales, radius)
        symbols = range_decode(data[2:], table, tuple(shape))
        return torch.from_numpy(symbols).to(means.dtype) + mu_round


class FactorizedPrior(nn.Module):
    """Per-channel learned density for latents without side information.

    Each channel owns a tiny monotone network whose output is a CDF; the
    likelihood of an integer bin is the CDF difference at the bin edges.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3)) -> None:
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = 10.0
        init = math.log(math.expm1(1.0 / scale ** (1.0 / (len(dims) - 1))))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            matrix = torch.full((channels, dims[i + 1], dims[i]), init)
            self._matrices.append(nn.Parameter(matrix))
            bias = torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if i < len(dims) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits_cumulative(self, v: Tensor) -> Tensor:
        # v: (channels, 1, N) -> logits of the per-channel CDF at each value.
        for i, matrix in enumerate(self._matrices):
            v = torch.bmm(F.softplus(matrix), v) + self._biases[i]
            if i < len(self._factors):
                v = v + torch.tanh(self._factors[i]) * torch.tanh(v)
        return v

    def likelihood(self, y_hat: Tensor) -> Tensor:
        b, c, h, w = y_hat.shape
        v = y_hat.permute(1, 0, 2, 3).reshape(c, 1, b * h * w)
        lower = self._logits_cumulative(v - 0.5)
        upper = self._logits_cumulative(v + 0.5)
        # Evaluate both sigmoids on the side with small magnitude for stability.
        sign = -torch.sign(lower + upper).detach()
        likelihood = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return likelihood.reshape(c, b, h, w).permute(1, 0, 2, 3)

    def forward(self, y: Tensor, mode: str) -> tuple[Tensor, Tensor]:
        y_hat = quantize(y, mode)
        return y_hat, self.likelihood(y_hat)

    def _cdf_values(self, channel: int, values: Tensor) -> Tensor:
        # values: (N,) -> CDF evaluated for one channel, float64 output.
        v = values.reshape(1, 1, -1).to(torch.float32)
        for i, matrix in enumerate(self._matrices):
            v = torch.bmm(F.softplus(matrix[channel : channel + 1]), v)
            v = v + self._biases[i][channel : channel + 1]
            if i < len(self._factors):
                v = v + torch.tanh(self._factors[i][channel : channel + 1]) * torch.tanh(v)
        return torch.sigmoid(v.to(torch.float64)).reshape(-1)

    def _build_table(
        self, los: np.ndarray, widths: np.ndarray, channel_ids: np.ndarray
    ) -> CdfTable:
        rows = []
        with torch.no_grad():
            for c in range(self.channels):
                lo, width = int(los[c]), int(widths[c])
                k = torch.arange(lo, lo + width, dtype=torch.float64)
                upper = self._cdf_values(c, k + 0.5)
                lower = self._cdf_values(c, k - 0.5)
                pmf = (upper - lower).numpy()
                pmf[0] += float(lower[0])
                pmf[-1] += float(1.0 - upper[-1])
                rows.append(freqs_to_cdf(quantize_pmf(pmf)))
        return CdfTable(rows, los.astype(np.int64), channel_ids)

    def compress(self, y: Tensor) -> bytes:
        """Code round(y); one global support bound rides in the payload.

        A single (lo, width) pair keeps the header at six bytes regardless of
        channel count; per-channel tables simply span the shared range, and
        the frequency floor on unused bins costs well under 0.1 bit/symbol."""
        y_hat = torch.round(y.detach()).to(torch.int64)
        b, c, h, w = y_hat.shape
        if c != self.channels:
            raise CodingError("channel count mismatch")
        flat = y_hat.reshape(-1).numpy()
        lo = int(flat.min()) if flat.size else 0
        width = (int(flat.max()) - lo + 1) if flat.size else 1
        if abs(lo) > 2 ** 31 - 1 or width > 60000:
            raise CodingError("latent support too large to code")
        table = self._build_table(
            np.full(c, lo), np.full(c, width), self._channel_ids((b, c, h, w))
        )
        return struct.pack("<iH", lo, width) + range_encode(flat, table)

    def decompress(self, data: bytes, shape: tuple[int, ...]) -> Tensor:
        b, c, h, w = shape
        if c != self.channels:
            raise CodingError("channel count mismatch")
        lo, width = struct.unpack_from("<iH", data, 0)
        table = self._build_table(
            np.full(c, lo), np.full(c, width), self._channel_ids((b, c, h, w))
        )
        symbols = range_decode(data[6:], table, (b, c, h, w))
        param = self._biases[0]
        return torch.from_numpy(symbols).to(param.dtype)

    @staticmethod
    def _channel_ids(shape: tuple[int, ...]) -> np.ndarray:
        b, c, h, w = shape
        return np.broadcast_to(
            np.arange(c, dtype=np.int64)[None, :, None, None], (b, c, h, w)
        ).reshape(-1)


class MaskedConv2d(nn.Conv2d):
    """Causal convolution for autoregressive context: the center tap and all
    later (raster-order) taps are zeroed, so outputs depend only on symbols
    already decoded."""

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        mask = torch.zeros_like(self.weight)
        _, _, kh, kw = self.weight.shape
        mask[:, :, : kh // 2, :] = 1.0
        mask[:, :, kh // 2, : kw // 2] = 1.0
        self.register_buffer("_mask", mask)

    def forward(self, x: Tensor) -> Tensor:
        return self._conv_forward(x, self.weight * self._mask, self.bias)
