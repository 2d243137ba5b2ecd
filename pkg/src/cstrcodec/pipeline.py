"""Codec configuration, training losses, and whole-sequence coding.

Rate points are indexed 0..3 from highest to lowest bitrate.  Each point
carries three loss weights (lambda1, lambda2, lambda3): lambda1 scales the
intra frame's distortion, lambda2 the L1 distortion summed over the motion
prediction stages, lambda3 the final reconstruction distortion.  The
single-lambda pretraining objective uses 4 * lambda2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from .container import FLAG_MSSSIM, StreamHeader, unpack_header
from .entropy import pack_chunk, rate_bits, unpack_chunk
from .metrics import ms_ssim, psnr
from .model import VARIANTS, PFramePayload, VideoCodec

LAMBDA_TRIPLETS = {
    "psnr": (
        (12800.0, 32.0, 3200.0),
        (6400.0, 16.0, 1600.0),
        (3200.0, 8.0, 800.0),
        (1600.0, 4.0, 400.0),
    ),
    "msssim": (
        (128.0, 32.0, 48.0),
        (64.0, 16.0, 24.0),
        (32.0, 8.0, 12.0),
        (16.0, 4.0, 6.0),
    ),
}


@dataclass
class CodecConfig:
    width: int = 48
    groups: int = 4
    gop_length: int = 12
    metric: str = "psnr"
    lambda_index: int = 0
    variant: str = "full"
    use_context: bool = False

    def __post_init__(self) -> None:
        if self.metric not in LAMBDA_TRIPLETS:
            raise ValueError(f"metric must be one of {tuple(LAMBDA_TRIPLETS)}")
        if not 0 <= self.lambda_index < 4:
            raise ValueError("lambda_index must be 0..3")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return LAMBDA_TRIPLETS[self.metric][self.lambda_index]

    @property
    def flags(self) -> int:
        return FLAG_MSSSIM if self.metric == "msssim" else 0

    @property
    def model_id(self) -> int:
        return VARIANTS.index(self.variant)

    def build_model(self) -> VideoCodec:
        return VideoCodec.from_variant(
            self.variant,
            width=self.width,
            groups=self.groups,
            use_context=self.use_context,
        )


def distortion1(a: Tensor, b: Tensor) -> Tensor:
    """Per-stage prediction distortion: mean absolute error."""
    return (a - b).abs().mean()


def distortion2(a: Tensor, b: Tensor, metric: str) -> Tensor:
    """Reconstruction distortion: MSE for PSNR models, 1 - MS-SSIM otherwise."""
    if metric == "psnr":
        return F.mse_loss(a, b)
    return 1.0 - ms_ssim(a.clamp(0, 1), b)


def _bpp(likelihood: Tensor, num_pixels: int) -> Tensor:
    return rate_bits(likelihood).total_bits / num_pixels


def pretrain_inter_loss(
    model: VideoCodec, frames: Tensor, config: CodecConfig,
    rate_weight: float = 1.0,
) -> tuple[Tensor, dict]:
    """Motion-only objective: weighted L1 over the prediction stages plus the
    feature stream's rate.  The intra codec provides the reference frame but
    receives no gradient; the residual codec is not used at all.

    ``rate_weight`` scales the rate term only.  At initialization the feature
    latents sit far below the quantization grid and carry nothing useful, so
    the rate gradient (which coherently shrinks them) wins over the distortion
    gradient (incoherent through random decoders) and the stream dies before
    it can become informative.  Ramping the rate term in from zero lets the
    feature stream become useful first; 1.0 recovers the plain objective.
    """
    b, n, _, h, w = frames.shape
    if n < 2:
        raise ValueError("need at least two frames")
    lam_pre = 4.0 * config.lambdas[1]
    num_pixels = b * h * w
    with torch.no_grad():
        prev = model.forward_iframe(frames[:, 0], "round").x_hat.clamp(0, 1)
    state = model.initial_state(b, h, w)
    loss = frames.new_zeros(())
    logs = {"stage_d1": 0.0, "feature_bpp": 0.0, "psnr": 0.0}
    for t in range(1, n):
        x = frames[:, t]
        out = model.forward_pframe(x, prev, state, "train", use_residual=False)
        stage_d1 = sum(distortion1(s, x) for s in out.prediction.stages())
        f_bpp = _bpp(out.feature_likelihood, num_pixels) + _bpp(
            out.feature_z_likelihood, num_pixels
        )
        loss = loss + lam_pre * stage_d1 + rate_weight * f_bpp
        logs["stage_d1"] += float(stage_d1.detach()) / (n - 1)
        logs["feature_bpp"] += float(f_bpp.detach()) / (n - 1)
        logs["psnr"] += psnr(
            out.prediction.refined.detach().clamp(0, 1), x
        ) / (n - 1)
        prev = out.x_hat
        state = out.state
    return loss, logs


def total_loss(
    model: VideoCodec, frames: Tensor, config: CodecConfig,
    rate_weight: float = 1.0,
) -> tuple[Tensor, dict]:
    """Full rate-distortion objective over an intra frame and its group.

    ``rate_weight`` scales every rate term; see ``pretrain_inter_loss`` for
    why a warm start may be needed.  1.0 is the plain objective.
    """
    b, n, _, h, w = frames.shape
    lam1, lam2, lam3 = config.lambdas
    num_pixels = b * h * w
    x0 = frames[:, 0]
    intra_out = model.forward_iframe(x0, "train")
    intra_bpp = _bpp(intra_out.y_likelihood, num_pixels) + _bpp(
        intra_out.z_likelihood, num_pixels
    )
    loss = (
        lam1 * distortion2(intra_out.x_hat, x0, config.metric)
        + rate_weight * intra_bpp
    )
    logs = {
        "intra_bpp": float(intra_bpp.detach()),
        "inter_bpp": 0.0,
        "final_d2": 0.0,
        "psnr": 0.0,
    }
    prev = intra_out.x_hat
    state = model.initial_state(b, h, w)
    for t in range(1, n):
        x = frames[:, t]
        out = model.forward_pframe(x, prev, state, "train", use_residual=True)
        stage_d1 = sum(distortion1(s, x) for s in out.prediction.stages())
        final_d2 = distortion2(out.x_hat, x, config.metric)
        f_bpp = _bpp(out.feature_likelihood, num_pixels) + _bpp(
            out.feature_z_likelihood, num_pixels
        )
        r_bpp = _bpp(out.residual.y_likelihood, num_pixels) + _bpp(
            out.residual.z_likelihood, num_pixels
        )
        loss = loss + lam2 * stage_d1 + lam3 * final_d2 + rate_weight * (
            f_bpp + r_bpp
        )
        logs["inter_bpp"] += float((f_bpp + r_bpp).detach()) / max(n - 1, 1)
        logs["final_d2"] += float(final_d2.detach()) / max(n - 1, 1)
        logs["psnr"] += psnr(out.x_hat.detach().clamp(0, 1), x) / max(n - 1, 1)
        prev = out.x_hat
        state = out.state
    return loss, logs


def pad_to_multiple(frames: Tensor, multiple: int = 16) -> Tensor:
    """Reflect-pad the last two dims up to the next multiple."""
    h, w = frames.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return frames
    return F.pad(frames, (0, pad_w, 0, pad_h), mode="reflect")


def encode_video(
    model: VideoCodec, frames: Tensor, config: CodecConfig
) -> tuple[bytes, Tensor]:
    """Encode (T, 3, H, W) frames in [0, 1]; returns the stream and the
    closed-loop reconstructions the decoder will reproduce exactly."""
    if frames.dim() != 4 or frames.shape[1] != 3:
        raise ValueError("frames must be (T, 3, H, W)")
    t_total, _, true_h, true_w = frames.shape
    header = StreamHeader(
        width=true_w,
        height=true_h,
        gop_length=config.gop_length,
        model_id=config.model_id,
        lambda_index=config.lambda_index,
        flags=config.flags,
    )
    padded = pad_to_multiple(frames)
    h, w = padded.shape[-2:]
    out = bytearray(header.pack())
    model.eval()
    recons = []
    prev: Optional[Tensor] = None
    state = None
    with torch.no_grad():
        for t in range(t_total):
            x = padded[t : t + 1]
            if t % config.gop_length == 0:
                (y_b, z_b), recon = model.encode_iframe(x)
                out += pack_chunk(y_b) + pack_chunk(z_b)
                state = model.initial_state(1, h, w)
            else:
                payload, recon, state = model.encode_pframe(x, prev, state)
                for part in payload:
                    out += pack_chunk(part)
            prev = recon
            recons.append(recon[0, :, :true_h, :true_w])
    return bytes(out), torch.stack(recons)


def decode_video(model: VideoCodec, data: bytes) -> tuple[Tensor, StreamHeader]:
    """Decode a stream produced by encode_video with the same model."""
    header, offset = unpack_header(data)
    true_h, true_w = header.height, header.width
    h = true_h + (-true_h) % 16
    w = true_w + (-true_w) % 16
    model.eval()
    frames = []
    prev: Optional[Tensor] = None
    state = None
    t = 0
    with torch.no_grad():
        while offset < len(data):
            if t % header.gop_length == 0:
                y_b, offset = unpack_chunk(data, offset)
                z_b, offset = unpack_chunk(data, offset)
                recon = model.decode_iframe((y_b, z_b), (h, w))
                state = model.initial_state(1, h, w)
            else:
                parts = []
                for _ in range(4):
                    part, offset = unpack_chunk(data, offset)
                    parts.append(part)
                recon, state = model.decode_pframe(
                    PFramePayload(*parts), prev, state, (h, w)
                )
            prev = recon
            frames.append(recon[0, :, :true_h, :true_w])
            t += 1
    if not frames:
        raise ValueError("stream contains no frames")
    return torch.stack(frames), header
