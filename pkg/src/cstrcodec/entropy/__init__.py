"""Entropy coding: learned probability models plus a bit-exact range coder."""

from .chunks import CorruptStreamError, pack_chunk, unpack_chunk
from .models import (
    FactorizedPrior,
    GaussianConditional,
    MaskedConv2d,
    RateEstimate,
    quantize,
    quantize_noise,
    quantize_round,
    quantize_ste,
    rate_bits,
)
from .rangecoder import (
    CDF_TOTAL,
    CdfTable,
    CodingError,
    RangeDecoder,
    RangeEncoder,
    freqs_to_cdf,
    quantize_pmf,
    range_decode,
    range_encode,
)

__all__ = [
    "CDF_TOTAL",
    "CdfTable",
    "CodingError",
    "CorruptStreamError",
    "FactorizedPrior",
    "GaussianConditional",
    "MaskedConv2d",
    "RangeDecoder",
    "RangeEncoder",
    "RateEstimate",
    "freqs_to_cdf",
    "quantize",
    "pack_chunk",
    "quantize_noise",
    "quantize_pmf",
    "quantize_round",
    "quantize_ste",
    "range_decode",
    "range_encode",
    "rate_bits",
    "unpack_chunk",
]
