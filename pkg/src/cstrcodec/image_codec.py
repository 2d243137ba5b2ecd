"""Intra-frame and residual image codecs.

Both are the same architecture: an attention-augmented convolutional
autoencoder whose latent is coded with a mean-scale hyperprior.  The
hyperprior machinery (``HyperCoder``) is shared with the inter-frame feature
stream, which codes stride-16 features with the same mechanics.
"""

from __future__ import annotations

import struct
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import (
    LEAKY_SLOPE,
    LocalAttention,
    NonLocalAttention,
    conv3x3,
    deconv3x3,
)
from .entropy import (
    FactorizedPrior,
    GaussianConditional,
    MaskedConv2d,
    RangeDecoder,
    RangeEncoder,
    quantize,
)


class HyperCoder(nn.Module):
    """Mean-scale hyperprior over an arbitrary latent tensor.

    A hyper encoder summarizes the latent into a small hyper latent z coded
    with a factorized prior; the hyper decoder expands z back into per-element
    means and scales for the latent's conditional Gaussian.  Optionally an
    autoregressive context branch sharpens the parameters using already
    decoded latent elements (decoding then becomes serial over positions).
    """

    def __init__(self, latent_ch: int, hyper_ch: int, use_context: bool = False) -> None:
        super().__init__()
        self.latent_ch = latent_ch
        self.hyper_ch = hyper_ch
        self.use_context = use_context
        self.h_a = nn.Sequential(
            conv3x3(latent_ch, hyper_ch),
            nn.LeakyReLU(LEAKY_SLOPE),
            conv3x3(hyper_ch, hyper_ch, stride=2),
            nn.LeakyReLU(LEAKY_SLOPE),
            conv3x3(hyper_ch, hyper_ch, stride=2),
        )
        self.h_s = nn.Sequential(
            deconv3x3(hyper_ch, hyper_ch),
            nn.LeakyReLU(LEAKY_SLOPE),
            deconv3x3(hyper_ch, hyper_ch),
            nn.LeakyReLU(LEAKY_SLOPE),
            conv3x3(hyper_ch, 2 * latent_ch),
        )
        self.prior = FactorizedPrior(hyper_ch)
        self.gaussian = GaussianConditional()
        if use_context:
            self.context = MaskedConv2d(latent_ch, 2 * latent_ch, 5, padding=2)
            self.param_net = nn.Sequential(
                nn.Conv2d(4 * latent_ch, 4 * latent_ch, 1),
                nn.LeakyReLU(LEAKY_SLOPE),
                nn.Conv2d(4 * latent_ch, 3 * latent_ch, 1),
                nn.LeakyReLU(LEAKY_SLOPE),
                nn.Conv2d(3 * latent_ch, 2 * latent_ch, 1),
            )

    def _hyper_params(self, z_hat: Tensor, y_shape: tuple[int, ...]) -> Tensor:
        params = self.h_s(z_hat)
        # The decoder may overshoot when the latent size is not a multiple
        # of four; crop back to the latent's spatial size.
        return params[..., : y_shape[-2], : y_shape[-1]]

    def _merged_params(self, z_hat: Tensor, y_hat: Tensor) -> tuple[Tensor, Tensor]:
        params = self._hyper_params(z_hat, y_hat.shape)
        if self.use_context:
            ctx = self.context(y_hat)
            params = self.param_net(torch.cat([params, ctx], dim=1))
        return torch.chunk(params, 2, dim=1)

    def forward(self, y: Tensor, mode: str) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (y_hat, y_likelihood, z_likelihood).

        mode 'train' rates additive-noise values while the returned y_hat is
        straight-through rounded, so downstream modules always consume the
        same integers the decoder will see; 'noise', 'ste' and 'round' use a
        single quantizer for both purposes.
        """
        z = self.h_a(y)
        if mode == "train":
            _, z_lik = self.prior(z, "noise")
            z_hat = quantize(z, "ste")
            y_hat = quantize(y, "ste")
            means, scales = self._merged_params(z_hat, y_hat)
            y_lik = self.gaussian.likelihood(quantize(y, "noise"), means, scales)
        else:
            z_hat, z_lik = self.prior(z, mode)
            y_hat = quantize(y, mode)
            means, scales = self._merged_params(z_hat, y_hat)
            y_lik = self.gaussian.likelihood(y_hat, means, scales)
        return y_hat, y_lik, z_lik

    def compress(self, y: Tensor) -> tuple[bytes, bytes]:
        z = self.h_a(y)
        z_bytes = self.prior.compress(z)
        z_hat = torch.round(z)
        y_hat = torch.round(y)
        means, scales = self._merged_params(z_hat, y_hat)
        if self.use_context:
            y_bytes = self._code_serial(y_hat, means, scales)
        else:
            y_bytes = self.gaussian.compress(y, means, scales)
        return y_bytes, z_bytes

    def decompress(
        self, y_bytes: bytes, z_bytes: bytes, y_shape: tuple[int, ...]
    ) -> Tensor:
        b, c, h, w = y_shape
        z_shape = (b, self.hyper_ch, -(-h // 4), -(-w // 4))
        z_hat = self.prior.decompress(z_bytes, z_shape)
        if self.use_context:
            return self._decode_serial(y_bytes, z_hat, y_shape)
        params = self._hyper_params(z_hat, y_shape)
        means, scales = torch.chunk(params, 2, dim=1)
        return self.gaussian.decompress(y_bytes, means, scales, y_shape)

    def _code_serial(self, y_hat: Tensor, means: Tensor, scales: Tensor) -> bytes:
        """Context-mode encoding: same symbol order the serial decoder uses."""
        gc = self.gaussian
        mu_round, d_idx = gc._mean_index(means)
        s_idx = gc._scale_index(scales)
        symbols = (y_hat - mu_round).to(torch.int64)
        radius = int(symbols.abs().max()) if symbols.numel() else 0
        enc = RangeEncoder()
        b, c, h, w = y_hat.shape
        for bi in range(b):
            for i in range(h):
                for j in range(w):
                    for ci in range(c):
                        row = gc._row(
                            radius, int(s_idx[bi, ci, i, j]), int(d_idx[bi, ci, i, j])
                        )
                        k = int(symbols[bi, ci, i, j]) + radius
                        enc.encode(int(row[k]), int(row[k + 1]))
        return struct.pack("<H", radius) + enc.finish()

    def _decode_serial(
        self, y_bytes: bytes, z_hat: Tensor, y_shape: tuple[int, ...]
    ) -> Tensor:
        (radius,) = struct.unpack_from("<H", y_bytes, 0)
        dec = RangeDecoder(y_bytes[2:])
        gc = self.gaussian
        b, c, h, w = y_shape
        y_hat = torch.zeros(y_shape)
        hyper_params = self._hyper_params(z_hat, y_shape)
        with torch.no_grad():
            for bi in range(b):
                for i in range(h):
                    for j in range(w):
                        ctx = self.context(y_hat[bi : bi + 1])
                        params = self.param_net(
                            torch.cat([hyper_params[bi : bi + 1], ctx], dim=1)
                        )
                        means, scales = torch.chunk(params, 2, dim=1)
                        mu_round, d_idx = gc._mean_index(means[0, :, i, j])
                        s_idx = gc._scale_index(scales[0, :, i, j])
                        for ci in range(c):
                            row = gc._row(radius, int(s_idx[ci]), int(d_idx[ci]))
                            k = dec.decode(row.tolist()) - radius
                            y_hat[bi, ci, i, j] = k + mu_round[ci]
        return y_hat


class ImageCodecOutput(NamedTuple):
    x_hat: Tensor
    y_likelihood: Tensor
    z_likelihood: Tensor


class ImageCodec(nn.Module):
    """Stride-16 autoencoder for intra frames and for inter residuals."""

    def __init__(
        self,
        width: int = 48,
        latent_ch: Optional[int] = None,
        use_attention: bool = True,
        use_context: bool = False,
    ) -> None:
        super().__init__()
        latent = latent_ch or width
        self.latent_ch = latent

        def attn(cls, ch):
            return cls(ch) if use_attention else nn.Identity()

        self.g_a = nn.Sequential(
            conv3x3(3, width, stride=2),
            nn.LeakyReLU(LEAKY_SLOPE),
            conv3x3(width, width, stride=2),
            nn.LeakyReLU(LEAKY_SLOPE),
            attn(LocalAttention, width),
            conv3x3(width, width, stride=2),
            nn.LeakyReLU(LEAKY_SLOPE),
            conv3x3(width, latent, stride=2),
            attn(NonLocalAttention, latent),
        )
        self.g_s = nn.Sequential(
            attn(NonLocalAttention, latent),
            deconv3x3(latent, width),
            nn.LeakyReLU(LEAKY_SLOPE),
            deconv3x3(width, width),
            nn.LeakyReLU(LEAKY_SLOPE),
            attn(LocalAttention, width),
            deconv3x3(width, width),
            nn.LeakyReLU(LEAKY_SLOPE),
            deconv3x3(width, 3),
        )
        self.hyper = HyperCoder(latent, width, use_context=use_context)

    def forward(self, x: Tensor, mode: str) -> ImageCodecOutput:
        y = self.g_a(x)
        y_hat, y_lik, z_lik = self.hyper(y, mode)
        return ImageCodecOutput(self.g_s(y_hat), y_lik, z_lik)

    def compress(self, x: Tensor) -> tuple[bytes, bytes, Tensor]:
        """Returns the two payloads plus the reconstruction the decoder will
        produce, so the encoder can stay in closed loop."""
        y = self.g_a(x)
        y_bytes, z_bytes = self.hyper.compress(y)
        y_hat = torch.round(y)
        return y_bytes, z_bytes, self.g_s(y_hat)

    def decompress(self, y_bytes: bytes, z_bytes: bytes, frame_hw: tuple[int, int]) -> Tensor:
        h, w = frame_hw
        y_shape = (1, self.latent_ch, h // 16, w // 16)
        y_hat = self.hyper.decompress(y_bytes, z_bytes, y_shape)
        return self.g_s(y_hat)
