"""Bit-exact container for one compressed latent.

Layout (little-endian): magic ``TCLP``, version u16, n_bits u8, c_fixed u16
(``round(c * 65535)``), Z u32, z_min f32, z_max f32, bit lengths of b_l and
b_f as u32, the selection bitmask (``ceil(Z/8)`` bytes, LSB-first), then the
b_l bytes and the b_f bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from tclnet.codec.entropy import SelectionIndicator
from tclnet.errors import FormatError, InvalidParameterError

MAGIC = b"TCLP"
VERSION = 1
_HEADER = struct.Struct("<4sHBHIffII")
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class BitStream:
    data: bytes
    nbits: int

    def __post_init__(self):
        if self.nbits < 0 or len(self.data) != (self.nbits + 7) // 8:
            raise InvalidParameterError(f"{len(self.data)} bytes cannot hold exactly {self.nbits} bits")
        pad = (-self.nbits) % 8
        if pad and self.data[-1] & ((1 << pad) - 1):
            raise InvalidParameterError("trailing pad bits must be zero")

    @classmethod
    def empty(cls) -> BitStream:
        return cls(b"", 0)


def c_to_fixed(c: float) -> int:
    if not 0.0 <= c <= 1.0:
        raise InvalidParameterError(f"c={c} outside [0, 1]")
    return int(np.floor(c * 65535 + 0.5))


@dataclass(frozen=True)
class CompressedPayload:
    n_bits: int
    c_fixed: int
    z_min: float
    z_max: float
    indicator: SelectionIndicator
    b_l: BitStream
    b_f: BitStream

    @property
    def z(self) -> int:
        return len(self.indicator.bits)

    @property
    def c(self) -> float:
        return self.c_fixed / 65535

    @property
    def stream_bits(self) -> int:
        """Entropy-coded bits only, without header or indicator."""
        return self.b_l.nbits + self.b_f.nbits

    @property
    def total_bits(self) -> int:
        return 8 * len(encode_payload(self))


def encode_payload(p: CompressedPayload) -> bytes:
    z = p.z
    if np.float32(p.z_min) != p.z_min or np.float32(p.z_max) != p.z_max:
        raise InvalidParameterError("z_min/z_max must be float32-representable")
    head = _HEADER.pack(MAGIC, VERSION, p.n_bits, p.c_fixed, z, p.z_min, p.z_max, p.b_l.nbits, p.b_f.nbits)
    return head + p.indicator.pack() + p.b_l.data + p.b_f.data


def decode_payload(raw: bytes) -> CompressedPayload:
    raw = bytes(raw)
    if len(raw) < HEADER_BYTES:
        raise FormatError(f"payload of {len(raw)} bytes is shorter than the {HEADER_BYTES}-byte header")
    magic, version, n_bits, c_fixed, z, z_min, z_max, n_l, n_f = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported payload version {version}")
    if not 1 <= n_bits <= 8:
        raise FormatError(f"n_bits={n_bits} outside [1, 8]")
    if not np.isfinite(z_min) or not np.isfinite(z_max) or not z_max > z_min:
        raise FormatError("invalid quantizer range")
    ind_len = (z + 7) // 8
    l_len, f_len = (n_l + 7) // 8, (n_f + 7) // 8
    expected = HEADER_BYTES + ind_len + l_len + f_len
    if len(raw) != expected:
        raise FormatError(f"payload is {len(raw)} bytes, header declares {expected}")
    pos = HEADER_BYTES
    ind_raw = raw[pos : pos + ind_len]
    if z % 8 and ind_raw[-1] >> (z % 8):
        raise FormatError("indicator pad bits are not zero")
    indicator = SelectionIndicator.unpack(ind_raw, z, c_fixed / 65535)
    pos += ind_len
    try:
        b_l = BitStream(raw[pos : pos + l_len], n_l)
        b_f = BitStream(raw[pos + l_len :], n_f)
    except InvalidParameterError as exc:
        raise FormatError(str(exc)) from None
    return CompressedPayload(n_bits, c_fixed, float(z_min), float(z_max), indicator, b_l, b_f)
