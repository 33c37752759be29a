"""n-bit uniform scalar quantizer over a per-message [z_min, z_max] range."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tclnet.errors import InvalidParameterError


@dataclass(frozen=True)
class QuantizedSymbols:
    symbols: np.ndarray
    n_bits: int
    z_min: float
    z_max: float

    def __post_init__(self):
        if not 1 <= self.n_bits <= 8:
            raise InvalidParameterError(f"n_bits={self.n_bits} outside [1, 8]")
        if not self.z_max > self.z_min:
            raise InvalidParameterError(f"z_max={self.z_max} must exceed z_min={self.z_min}")
        symbols = np.asarray(self.symbols, dtype=np.int64)
        if symbols.ndim != 1:
            raise InvalidParameterError("symbols must be a vector")
        if symbols.size and (symbols.min() < 0 or symbols.max() > self.levels - 1):
            raise InvalidParameterError(f"symbols outside [0, {self.levels - 1}]")
        object.__setattr__(self, "symbols", symbols)

    @property
    def levels(self) -> int:
        return 1 << self.n_bits

    @property
    def delta(self) -> float:
        return (self.z_max - self.z_min) / (self.levels - 1)

    def __len__(self) -> int:
        return len(self.symbols)


def _f32_down(x: float) -> float:
    y = np.float32(x)
    if float(y) > x:
        y = np.nextafter(y, np.float32(-np.inf))
    return float(y)


def _f32_up(x: float) -> float:
    y = np.float32(x)
    if float(y) < x:
        y = np.nextafter(y, np.float32(np.inf))
    return float(y)


def quantize(z, n_bits: int) -> QuantizedSymbols:
    """``floor((z - z_min) / delta)`` with ``delta = (z_max - z_min) / (2^n - 1)``.

    The range is widened outward to float32-representable values so the
    header can carry it exactly; the latent maximum always maps to ``2^n - 1``.
    A constant latent gets ``z_max = z_min + 1`` and all-zero symbols.
    """
    if not 1 <= n_bits <= 8:
        raise InvalidParameterError(f"n_bits={n_bits} outside [1, 8]")
    z = np.asarray(getattr(z, "values", z), dtype=np.float64).ravel()
    top = (1 << n_bits) - 1
    if z.size == 0:
        return QuantizedSymbols(np.zeros(0, np.int64), n_bits, 0.0, 1.0)
    if not np.all(np.isfinite(z)):
        raise InvalidParameterError("latent has non-finite values")
    z_min, z_max = _f32_down(z.min()), _f32_up(z.max())
    if z_max <= z_min:
        return QuantizedSymbols(np.zeros(z.size, np.int64), n_bits, z_min, _f32_up(z_min + 1.0))
    delta = (z_max - z_min) / top
    q = np.clip(np.floor((z - z_min) / delta), 0, top).astype(np.int64)
    # division round-off can leave q one step low; pull it back within delta
    low = z - (q * delta + z_min) > delta
    q[low] = np.minimum(q[low] + 1, top)
    q[z == z.max()] = top
    return QuantizedSymbols(q, n_bits, z_min, z_max)


def dequantize(q: QuantizedSymbols) -> np.ndarray:
    """``symbol * delta + z_min``."""
    return q.symbols.astype(np.float64) * q.delta + q.z_min
