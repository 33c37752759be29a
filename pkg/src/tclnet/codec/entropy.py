"""Shannon entropies and LM/FM symbol selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tclnet.errors import InvalidParameterError


def entropy_bits(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def factorized_entropy(fm) -> float:
    """Entropy of the factorized model's marginal, in bits per symbol."""
    return entropy_bits(getattr(fm, "pi", fm))


def context_entropies(dists) -> np.ndarray:
    """Per-position entropy of each next-token distribution (rows of ``dists``)."""
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim != 2:
        d = d.reshape(len(d), -1)
    logs = np.zeros_like(d)
    np.log2(d, out=logs, where=d > 0)
    return -(d * logs).sum(axis=1)


@dataclass(frozen=True)
class SelectionIndicator:
    """``bits[k]`` is True when symbol ``k`` is coded by the context model."""

    bits: np.ndarray
    c: float

    @property
    def lm_positions(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def fm_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)

    def pack(self) -> bytes:
        """LSB-first: bit k lives in byte k // 8 at bit k % 8."""
        return np.packbits(self.bits.astype(np.uint8), bitorder="little").tobytes()

    @classmethod
    def unpack(cls, raw: bytes, count: int, c: float) -> SelectionIndicator:
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count, bitorder="little").astype(bool)
        return cls(bits, c)


def fm_count(c: float, z: int) -> int:
    # guard against c*Z landing a hair under an integer, e.g. 0.29999999999999999*10
    return int(np.floor(c * z + 1e-9))


def select_symbols(h_l, h_f: float, c: float, z: int | None = None) -> SelectionIndicator:
    """Route the ``floor(c*Z)`` symbols with the smallest ``H_f - H_l,k`` to the FM.

    Differences are sorted descending with a stable sort, so among equal
    differences the lower index goes to the LM first.
    """
    if not 0.0 <= c <= 1.0:
        raise InvalidParameterError(f"c={c} outside [0, 1]")
    h_l = np.asarray(h_l, dtype=np.float64)
    if z is None:
        z = len(h_l)
    if len(h_l) != z:
        raise InvalidParameterError(f"{len(h_l)} entropies for {z} symbols")
    # round so float noise between equivalent models cannot reorder ties
    diff = np.round(h_f - h_l, 9)
    order = np.argsort(-diff, kind="stable")
    n_lm = z - fm_count(c, z)
    bits = np.zeros(z, dtype=bool)
    bits[order[:n_lm]] = True
    return SelectionIndicator(bits, c)
