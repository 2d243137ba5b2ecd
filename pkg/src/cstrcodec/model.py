"""The assembled low-delay video codec.

An intra image codec handles the first frame of every group; each following
frame is coded by the inter path: stacked-frame features are quantized and
entropy coded, aggregated over time by the recurrent module into a compound
representation, expanded by hybrid motion compensation into a prediction, and
topped up with a coded residual.  The encoder always conditions on its own
decoded output, so encoder and decoder reconstructions are identical.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
from torch import Tensor, nn

from .attention import FrameFeatureExtractor
from .hmc import HmcPrediction, HybridMotionCompensator
from .image_codec import HyperCoder, ImageCodec, ImageCodecOutput
from .ria import RecurrentAggregator, RecurrentState

VARIANTS = (
    "full",
    "vector-only",
    "kernel-only",
    "no-attention",
    "no-texture",
    "convlstm",
)


class PFrameOutput(NamedTuple):
    x_hat: Tensor
    prediction: HmcPrediction
    residual: Optional[ImageCodecOutput]
    feature_likelihood: Tensor
    feature_z_likelihood: Tensor
    state: RecurrentState


class PFramePayload(NamedTuple):
    """The four entropy-coded byte strings of one inter frame."""

    feature: bytes
    feature_z: bytes
    residual: bytes
    residual_z: bytes


class VideoCodec(nn.Module):
    def __init__(
        self,
        width: int = 48,
        groups: int = 4,
        use_attention: bool = True,
        recurrent_cell: str = "stlstm",
        use_vector: bool = True,
        use_kernel: bool = True,
        use_texture: bool = True,
        use_context: bool = False,
    ) -> None:
        super().__init__()
        self.width = width
        self.intra = ImageCodec(
            width, use_attention=use_attention, use_context=use_context
        )
        self.residual = ImageCodec(
            width, use_attention=use_attention, use_context=use_context
        )
        self.stfe = FrameFeatureExtractor(6, width)
        self.sfe = FrameFeatureExtractor(3, width)
        self.feature_hyper = HyperCoder(width, width)
        self.ria = RecurrentAggregator(width, cell=recurrent_cell)
        self.hmc = HybridMotionCompensator(
            width,
            groups=groups,
            use_vector=use_vector,
            use_kernel=use_kernel,
            use_texture=use_texture,
        )

    @classmethod
    def from_variant(cls, variant: str, **kwargs) -> "VideoCodec":
        """Build the full model or one of its ablations by name."""
        flags = {
            "full": {},
            "vector-only": {"use_kernel": False},
            "kernel-only": {"use_vector": False},
            "no-attention": {"use_attention": False},
            "no-texture": {"use_texture": False},
            "convlstm": {"recurrent_cell": "convlstm"},
        }
        if variant not in flags:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        return cls(**{**flags[variant], **kwargs})

    def initial_state(self, batch: int, height: int, width: int, **kw) -> RecurrentState:
        return self.ria.initial_state(batch, height // 16, width // 16, **kw)

    # Training path (differentiable).

    def forward_iframe(self, x: Tensor, mode: str) -> ImageCodecOutput:
        return self.intra(x, mode)

    def forward_pframe(
        self,
        x: Tensor,
        prev_recon: Tensor,
        state: RecurrentState,
        mode: str,
        use_residual: bool = True,
    ) -> PFrameOutput:
        f = self.stfe(torch.cat([x, prev_recon], dim=1))
        f_hat, f_lik, fz_lik = self.feature_hyper(f, mode)
        g, new_state = self.ria(f_hat, state)
        pred = self.hmc(g, prev_recon, self.sfe(prev_recon))
        if use_residual:
            res = self.residual(x - pred.refined, mode)
            x_hat = pred.refined + res.x_hat
        else:
            res = None
            x_hat = pred.refined
        return PFrameOutput(x_hat, pred, res, f_lik, fz_lik, new_state)

    # Coding path (deterministic, bit-exact against decode).

    def encode_iframe(self, x: Tensor) -> tuple[tuple[bytes, bytes], Tensor]:
        y_bytes, z_bytes, recon = self.intra.compress(x)
        return (y_bytes, z_bytes), torch.clamp(recon, 0, 1)

    def decode_iframe(
        self, payload: tuple[bytes, bytes], frame_hw: tuple[int, int]
    ) -> Tensor:
        y_bytes, z_bytes = payload
        return torch.clamp(self.intra.decompress(y_bytes, z_bytes, frame_hw), 0, 1)

    def encode_pframe(
        self, x: Tensor, prev_recon: Tensor, state: RecurrentState
    ) -> tuple[PFramePayload, Tensor, RecurrentState]:
        f = self.stfe(torch.cat([x, prev_recon], dim=1))
        f_bytes, fz_bytes = self.feature_hyper.compress(f)
        f_hat = torch.round(f)
        g, new_state = self.ria(f_hat, state)
        pred = self.hmc(g, prev_recon, self.sfe(prev_recon))
        ry_bytes, rz_bytes, r_recon = self.residual.compress(x - pred.refined)
        x_hat = torch.clamp(pred.refined + r_recon, 0, 1)
        payload = PFramePayload(f_bytes, fz_bytes, ry_bytes, rz_bytes)
        return payload, x_hat, new_state

    def decode_pframe(
        self,
        payload: PFramePayload,
        prev_recon: Tensor,
        state: RecurrentState,
        frame_hw: tuple[int, int],
    ) -> tuple[Tensor, RecurrentState]:
        h, w = frame_hw
        f_shape = (1, self.width, h // 16, w // 16)
        f_hat = self.feature_hyper.decompress(payload.feature, payload.feature_z, f_shape)
        g, new_state = self.ria(f_hat, state)
        pred = self.hmc(g, prev_recon, self.sfe(prev_recon))
        r_recon = self.residual.decompress(payload.residual, payload.residual_z, frame_hw)
        x_hat = torch.clamp(pred.refined + r_recon, 0, 1)
        return x_hat, new_state
