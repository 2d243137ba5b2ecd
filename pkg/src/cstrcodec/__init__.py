"""Learned low-delay video codec with recurrent temporal aggregation and
hybrid (vector + kernel) motion compensation.

The encoder codes each group of pictures as one intra frame followed by
predicted frames.  Every predicted frame sends a compact temporal feature
that a two-layer spatio-temporal LSTM folds into the running scene memory;
a hybrid compensator turns that memory into flow, deformable-kernel, and
texture predictions, and a residual codec closes the gap to the input.
Streams decode bit-exactly against the encoder's closed-loop references.
"""

from .container import StreamHeader, unpack_header
from .metrics import BdResult, bd_metrics, bd_quality, bd_rate, ms_ssim, psnr
from .model import VARIANTS, VideoCodec
from .pipeline import (
    LAMBDA_TRIPLETS,
    CodecConfig,
    decode_video,
    encode_video,
    pretrain_inter_loss,
    total_loss,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BdResult",
    "CodecConfig",
    "LAMBDA_TRIPLETS",
    "StreamHeader",
    "TrainConfig",
    "VARIANTS",
    "VideoCodec",
    "bd_metrics",
    "bd_quality",
    "bd_rate",
    "decode_video",
    "encode_video",
    "load_checkpoint",
    "ms_ssim",
    "pretrain_inter_loss",
    "psnr",
    "save_checkpoint",
    "total_loss",
    "unpack_header",
    "__version__",
]
