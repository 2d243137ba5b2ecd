"""Bit-exact byte-oriented range coder over quantized cumulative-frequency tables.

The coder works on 32-bit integer state with 16-bit frequency totals, emitting
one byte at a time.  Encoding is deterministic: the same symbols and tables
always produce the same bytes, on any platform, because only integer
arithmetic is involved.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

PRECISION = 32
MASK = (1 << PRECISION) - 1
TOP = 1 << (PRECISION - 8)
BOTTOM = 1 << (PRECISION - 16)

#: All CDF rows are quantized so their final entry equals this total.
CDF_TOTAL = 1 << 16


class CodingError(ValueError):
    """Raised when symbols fall outside table support or a stream is malformed."""


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Quantize a probability vector to integer frequencies summing to CDF_TOTAL.

    Every bin receives frequency >= 1 so the resulting CDF is strictly
    increasing.  Deterministic: ties are resolved by bin order.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise CodingError("pmf must be a nonempty 1-D array")
    if pmf.size >= CDF_TOTAL:
        raise CodingError(f"pmf width {pmf.size} exceeds frequency budget")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise CodingError("pmf must be finite and nonnegative")
    total = pmf.sum()
    if total <= 0:
        pmf = np.full(pmf.size, 1.0 / pmf.size)
    else:
        pmf = pmf / total
    freq = np.maximum(1, np.floor(pmf * CDF_TOTAL).astype(np.int64))
    diff = CDF_TOTAL - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(freq))] += diff
    elif diff < 0:
        # Steal the excess from the largest bins, never dropping below 1.
        order = np.argsort(-freq, kind="stable")
        for i in order:
            take = min(-diff, int(freq[i]) - 1)
            freq[i] -= take
            diff += take
            if diff == 0:
                break
        if diff != 0:
            raise CodingError("cannot quantize pmf: too many bins for budget")
    return freq


def freqs_to_cdf(freq: np.ndarray) -> np.ndarray:
    """Turn integer frequencies into a CDF row: first 0, last CDF_TOTAL."""
    cdf = np.zeros(freq.size + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


@dataclass
class CdfTable:
    """Per-symbol-context cumulative distribution tables.

    cdfs:      one strictly increasing CDF row per context; row[0] == 0 and
               row[-1] == CDF_TOTAL.
    lower:     integer symbol value of bin 0 for each row.
    row_index: flat per-symbol context assignment; len == number of symbols
               to (de)code, values index into ``cdfs``.
    """

    cdfs: list[np.ndarray]
    lower: np.ndarray
    row_index: np.ndarray

    def __post_init__(self) -> None:
        self.lower = np.asarray(self.lower, dtype=np.int64)
        self.row_index = np.asarray(self.row_index, dtype=np.int64)
        if len(self.cdfs) != self.lower.size:
            raise CodingError("one lower bound required per CDF row")
        for row in self.cdfs:
            if row[0] != 0 or row[-1] != CDF_TOTAL:
                raise CodingError("CDF rows must start at 0 and end at CDF_TOTAL")
            if np.any(np.diff(row) <= 0):
                raise CodingError("CDF rows must be strictly increasing")
        if self.row_index.size and (
            self.row_index.min() < 0 or self.row_index.max() >= len(self.cdfs)
        ):
            raise CodingError("row_index out of range")

    @property
    def num_symbols(self) -> int:
        return int(self.row_index.size)


class RangeEncoder:
    """Streaming range encoder; feed (cum_lo, cum_hi) pairs, then finish()."""

    def __init__(self) -> None:
        self._low = 0
        self._range = MASK
        self._out = bytearray()

    def encode(self, cum_lo: int, cum_hi: int) -> None:
        r = self._range // CDF_TOTAL
        self._low += cum_lo * r
        self._range = (cum_hi - cum_lo) * r
        low, rng, out = self._low, self._range, self._out
        while (low ^ (low + rng)) < TOP or rng < BOTTOM:
            if (low ^ (low + rng)) < TOP:
                out.append((low >> (PRECISION - 8)) & 0xFF)
                low = (low << 8) & MASK
                rng <<= 8
                continue
            rng = (MASK + 1 - low) & (BOTTOM - 1)
            out.append((low >> (PRECISION - 8)) & 0xFF)
            low = (low << 8) & MASK
            rng <<= 8
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        low = self._low
        for _ in range(PRECISION // 8):
            self._out.append((low >> (PRECISION - 8)) & 0xFF)
            low = (low << 8) & MASK
        return bytes(self._out)


class RangeDecoder:
    """Streaming decoder; must see the same CDF rows in the same order."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = MASK
        self._code = 0
        for _ in range(PRECISION // 8):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        # Reading past the flushed tail is legal for the final symbols.
        return 0

    def decode(self, cdf_row: list[int]) -> int:
        r = self._range // CDF_TOTAL
        target = (self._code - self._low) // r
        if target >= CDF_TOTAL:
            target = CDF_TOTAL - 1
        sym = bisect_right(cdf_row, target) - 1
        cum_lo = cdf_row[sym]
        cum_hi = cdf_row[sym + 1]
        self._low += cum_lo * r
        self._range = (cum_hi - cum_lo) * r
        low, rng, code = self._low, self._range, self._code
        while (low ^ (low + rng)) < TOP or rng < BOTTOM:
            if (low ^ (low + rng)) < TOP:
                code = ((code << 8) | self._next_byte()) & MASK
                low = (low << 8) & MASK
                rng <<= 8
                continue
            rng = (MASK + 1 - low) & (BOTTOM - 1)
            code = ((code << 8) | self._next_byte()) & MASK
            low = (low << 8) & MASK
            rng <<= 8
        self._low, self._range, self._code = low, rng, code
        return sym


def range_encode(symbols: np.ndarray, table: CdfTable) -> bytes:
    """Losslessly encode a flat integer symbol array against ``table``.

    symbols[i] is coded with row table.cdfs[table.row_index[i]]; the bin index
    is symbols[i] - table.lower[row].  Symbols outside a row's support raise
    CodingError (the caller chooses supports, so this is a programming error).
    """
    symbols = np.asarray(symbols).reshape(-1)
    if symbols.size != table.num_symbols:
        raise CodingError("symbol count does not match table.row_index")
    if symbols.size == 0:
        return b""
    rows = [row.tolist() for row in table.cdfs]
    widths = [len(r) - 1 for r in rows]
    lower = table.lower.tolist()
    enc = RangeEncoder()
    sym_list = symbols.astype(np.int64).tolist()
    idx_list = table.row_index.tolist()
    for value, ri in zip(sym_list, idx_list):
        bin_i = value - lower[ri]
        if bin_i < 0 or bin_i >= widths[ri]:
            raise CodingError(f"symbol {value} outside support of row {ri}")
        row = rows[ri]
        enc.encode(row[bin_i], row[bin_i + 1])
    return enc.finish()


def range_decode(data: bytes, table: CdfTable, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of range_encode; returns an int64 array of the given shape."""
    n = int(np.prod(shape)) if shape else 1
    if n != table.num_symbols:
        raise CodingError("shape does not match table.row_index")
    if n == 0:
        return np.zeros(shape, dtype=np.int64)
    rows = [row.tolist() for row in table.cdfs]
    lower = table.lower.tolist()
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    idx_list = table.row_index.tolist()
    for i, ri in enumerate(idx_list):
        out[i] = dec.decode(rows[ri]) + lower[ri]
    return out.reshape(shape)
