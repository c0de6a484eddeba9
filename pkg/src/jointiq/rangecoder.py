"""Bit-exact byte-oriented range coder over fixed-precision CDF tables.

The coder is a 32-bit carry-propagating range coder with byte-wise
renormalization (the LZMA construction).  No floating point enters the
coding loop: symbols are coded against integer cumulative-frequency tables
whose total is exactly 2**precision, so encoder and decoder agree bit for
bit on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


@dataclass(frozen=True)
class CdfTable:
    """Cumulative frequency table: cum[0] == 0, cum[S] == 2**precision,
    strictly increasing (every symbol has frequency >= 1)."""

    precision: int
    cum: np.ndarray  # int64, length S+1

    @property
    def num_symbols(self) -> int:
        return len(self.cum) - 1

    @property
    def freq(self) -> np.ndarray:
        return np.diff(self.cum)

    def probabilities(self) -> np.ndarray:
        return self.freq / float(1 << self.precision)


def build_cdf(pmf, precision: int = 16) -> CdfTable:
    """Quantize a probability vector to integer frequencies totalling
    exactly 2**precision.

    Every symbol receives frequency >= 1 (so it stays codable), then a
    deterministic largest-remainder correction repairs the total.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    S = pmf.size
    total = 1 << precision
    if S > total:
        raise ValueError(f"alphabet of {S} symbols cannot fit in {precision} bits")
    if S == 0:
        raise ValueError("empty alphabet")
    if pmf.min() < -1e-9:
        raise ValueError("negative probability")
    if abs(pmf.sum() - 1.0) > 1e-6:
        raise ValueError(f"pmf sums to {pmf.sum():.9f}, expected 1")

    scaled = pmf * total
    freq = np.maximum(1, np.round(scaled)).astype(np.int64)
    excess = int(freq.sum()) - total
    if excess > 0:
        # shave the most over-allocated symbols first, ties by index
        order = np.lexsort((np.arange(S), -(freq - scaled)))
        for i in order:
            if excess == 0:
                break
            d = min(int(freq[i]) - 1, excess)
            freq[i] -= d
            excess -= d
        if excess:
            raise ValueError("cannot satisfy frequency floor")  # S > total, guarded above
    elif excess < 0:
        order = np.lexsort((np.arange(S), -(scaled - freq)))
        k = 0
        while excess < 0:
            freq[order[k % S]] += 1
            excess += 1
            k += 1
    cum = np.zeros(S + 1, dtype=np.int64)
    np.cumsum(freq, out=cum[1:])
    return CdfTable(precision=precision, cum=cum)


class RangeEncoder:
    """Streaming encoder; one instance per output stream."""

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._finished = False

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            out = self.out
            out.append((self.cache + carry) & 0xFF)
            ff = (0xFF + carry) & 0xFF
            for _ in range(self.cache_size - 1):
                out.append(ff)
            self.cache = (low >> 24) & 0xFF
            self.cache_size = 0
        self.cache_size += 1
        self.low = (low << 8) & _MASK32

    def encode_symbol(self, cdf: CdfTable, s: int) -> None:
        cum = cdf.cum
        lo = int(cum[s])
        fr = int(cum[s + 1]) - lo
        r = self.range >> cdf.precision
        self.low += r * lo
        self.range = r * fr
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def flush(self) -> bytes:
        """Terminate the stream; at most 4 termination bytes follow the
        deferred data bytes.  Returns the complete byte stream."""
        if not self._finished:
            for _ in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self.out)


class RangeDecoder:
    """Streaming decoder; must be fed the encoder's exact bytes and the
    identical per-symbol CDF sequence."""

    def __init__(self, data: bytes):
        if len(data) < 5:
            raise DataError("range decoder: stream shorter than preamble")
        self.data = data
        self.pos = 1  # first byte is the encoder's initial zero cache
        self.range = _MASK32
        code = 0
        for _ in range(4):
            code = (code << 8) | data[self.pos]
            self.pos += 1
        self.code = code

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise DataError("range decoder: byte exhaustion")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_symbol(self, cdf: CdfTable) -> int:
        cum = cdf.cum
        r = self.range >> cdf.precision
        v = self.code // r
        top = (1 << cdf.precision) - 1
        if v > top:
            v = top
        s = int(np.searchsorted(cum, v, side="right")) - 1
        lo = int(cum[s])
        self.code -= r * lo
        self.range = r * (int(cum[s + 1]) - lo)
        while self.range < _TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8
        return s
