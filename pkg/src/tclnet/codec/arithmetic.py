"""Finite-precision arithmetic coding with a 32-bit register.

Probabilities are turned into integer frequencies summing to 2**16 (every
symbol at least 1) before coding, so both ends derive identical intervals.
Interval renormalisation follows the classic low/high scheme with pending
underflow bits; the encoder terminates with a single 1 bit and the decoder
reads zeros past the end of the stream.
"""
from __future__ import annotations

from bisect import bisect_right
from typing import Iterable, Sequence

import numpy as np

from tclnet.errors import ContractViolationError, DecodeError

STATE_BITS = 32
FULL = 1 << STATE_BITS
MASK = FULL - 1
HALF = FULL >> 1
QUARTER = FULL >> 2
FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS


def quantize_frequencies(p) -> np.ndarray:
    """Integer frequencies summing to ``FREQ_TOTAL`` with minimum 1.

    Scale and floor, then hand the remainder to the most probable symbols
    (or take any excess from them), ties broken by lower index.
    """
    p = np.asarray(p, dtype=np.float64)
    k = p.size
    if k == 0 or k > FREQ_TOTAL:
        raise ContractViolationError(f"cannot quantize an alphabet of size {k}")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or p.sum() <= 0:
        raise ContractViolationError("probabilities must be finite, non-negative and not all zero")
    p = p / p.sum()
    # the 1e-6 snap keeps exact multiples of 2**-16 stable under 1-ulp jitter
    f = np.maximum(np.floor(p * FREQ_TOTAL + 1e-6).astype(np.int64), 1)
    diff = FREQ_TOTAL - int(f.sum())
    order = np.argsort(-p, kind="stable")
    if diff > 0:
        whole, rest = divmod(diff, k)
        f += whole
        f[order[:rest]] += 1
    elif diff < 0:
        need = -diff
        for i in order:
            take = min(int(f[i]) - 1, need)
            f[i] -= take
            need -= take
            if need == 0:
                break
    return f


def cumulative(freqs) -> list[int]:
    cum = [0]
    cum.extend(np.cumsum(freqs).tolist())
    return cum


def code_length_bits(freqs, symbol: int) -> float:
    """Ideal code length of ``symbol`` under quantized frequencies."""
    return -float(np.log2(freqs[symbol] / FREQ_TOTAL))


class BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._n = 0
        self.count = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._n += 1
        self.count += 1
        if self._n == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._n = 0

    def getvalue(self) -> bytes:
        if self._n:
            return bytes(self._bytes) + bytes([self._acc << (8 - self._n)])
        return bytes(self._bytes)


class BitReader:
    """MSB-first reader that yields zeros past ``nbits``."""

    def __init__(self, data: bytes, nbits: int):
        self.data = data
        self.nbits = min(nbits, 8 * len(data))
        self.pos = 0

    def read(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos >= self.nbits:
            return 0
        return (self.data[pos >> 3] >> (7 - (pos & 7))) & 1


class ArithmeticEncoder:
    def __init__(self):
        self.low = 0
        self.high = MASK
        self.pending = 0
        self.out = BitWriter()

    def _emit(self, bit: int) -> None:
        self.out.write(bit)
        for _ in range(self.pending):
            self.out.write(bit ^ 1)
        self.pending = 0

    def encode(self, cum: Sequence[int], symbol: int) -> None:
        total = cum[-1]
        lo_c, hi_c = cum[symbol], cum[symbol + 1]
        if hi_c <= lo_c:
            raise ContractViolationError(f"symbol {symbol} has zero frequency")
        width = self.high - self.low + 1
        self.high = self.low + width * hi_c // total - 1
        self.low = self.low + width * lo_c // total
        while True:
            if self.high < HALF:
                self._emit(0)
            elif self.low >= HALF:
                self._emit(1)
                self.low -= HALF
                self.high -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.pending += 1
                self.low -= QUARTER
                self.high -= QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1

    def finish(self) -> tuple[bytes, int]:
        """Terminate and return ``(bytes, bit_count)``.

        After renormalisation ``low < HALF <= high``, so a lone 1 followed by
        the decoder's implicit zeros lands inside the final interval.
        """
        self.out.write(1)
        return self.out.getvalue(), self.out.count


class ArithmeticDecoder:
    def __init__(self, data: bytes, nbits: int):
        self.reader = BitReader(data, nbits)
        self.nbits = nbits
        self.low = 0
        self.high = MASK
        self.shifts = 0
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self.reader.read()

    def decode(self, cum: Sequence[int], position: int | None = None) -> int:
        total = cum[-1]
        width = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // width
        symbol = bisect_right(cum, value) - 1
        if not 0 <= symbol < len(cum) - 1:
            raise DecodeError("code value outside the coding interval", position)
        self.high = self.low + width * cum[symbol + 1] // total - 1
        self.low = self.low + width * cum[symbol] // total
        while True:
            if self.high < HALF:
                pass
            elif self.low >= HALF:
                self.low -= HALF
                self.high -= HALF
                self.code -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.low -= QUARTER
                self.high -= QUARTER
                self.code -= QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
            self.code = (self.code << 1) | self.reader.read()
            self.shifts += 1
        # each shift matches one emitted bit, except trailing underflow bits
        # that the terminator leaves implicit; a long overrun means a bad stream
        if self.shifts > self.nbits + STATE_BITS:
            raise DecodeError("bitstream exhausted", position)
        return symbol


def encode_with_frequencies(symbols: Iterable[int], freq_rows) -> tuple[bytes, int]:
    """Encode ``symbols[i]`` with ``freq_rows[i]`` (or one shared row)."""
    enc = ArithmeticEncoder()
    shared = None
    rows = freq_rows
    if isinstance(freq_rows, np.ndarray) and freq_rows.ndim == 1:
        shared = cumulative(freq_rows)
    for i, s in enumerate(symbols):
        enc.encode(shared if shared is not None else cumulative(rows[i]), int(s))
    return enc.finish()


def decode_with_frequencies(data: bytes, nbits: int, count: int, freq_rows) -> list[int]:
    dec = ArithmeticDecoder(data, nbits)
    shared = None
    if isinstance(freq_rows, np.ndarray) and freq_rows.ndim == 1:
        shared = cumulative(freq_rows)
    return [dec.decode(shared if shared is not None else cumulative(freq_rows[i]), i) for i in range(count)]
