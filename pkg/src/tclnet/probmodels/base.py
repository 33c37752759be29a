"""Alphabets, byte tokenization, the provider contract and the factorized model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from tclnet.errors import FormatError, InvalidParameterError


@dataclass(frozen=True)
class Alphabet:
    n_bits: int

    def __post_init__(self):
        if not 1 <= self.n_bits <= 8:
            raise InvalidParameterError(f"n_bits={self.n_bits} outside [1, 8]")

    @property
    def size(self) -> int:
        return 1 << self.n_bits


def ascii_tokenize(symbols, n_bits: int | None = None) -> bytes:
    """Symbol value k becomes byte k."""
    values = getattr(symbols, "symbols", symbols)
    n_bits = getattr(symbols, "n_bits", n_bits)
    if n_bits is None or not 1 <= n_bits <= 8:
        raise InvalidParameterError(f"n_bits={n_bits} outside [1, 8]")
    values = np.asarray(values, dtype=np.int64)
    if values.size and (values.min() < 0 or values.max() >= 1 << n_bits):
        raise InvalidParameterError(f"symbol outside the {n_bits}-bit alphabet")
    return values.astype(np.uint8).tobytes()


def ascii_detokenize(tokens: bytes, n_bits: int) -> np.ndarray:
    arr = np.frombuffer(bytes(tokens), dtype=np.uint8).astype(np.int64)
    if arr.size and arr.max() >= 1 << n_bits:
        bad = int(arr[np.argmax(arr >= 1 << n_bits)])
        raise FormatError(f"token {bad} is outside the {n_bits}-bit alphabet")
    return arr


class ProviderSession(Protocol):
    def advance(self, tokens: Sequence[int]) -> np.ndarray:
        """Consume ``tokens`` and return the next-symbol distribution over the alphabet."""


class ProbabilityProvider(Protocol):
    """Anything that maps a token prefix to a next-symbol distribution.

    ``context_free`` providers ignore the prefix, which lets their symbols be
    coded and decoded independently of one another.
    """

    alphabet: Alphabet
    context_free: bool

    def session(self, length: int | None = None) -> ProviderSession: ...

    def vocab_distributions(self, tokens: Sequence[int]) -> np.ndarray:
        """Teacher-forced distributions, one row per position, over the model vocabulary."""


def restrict_to_alphabet(p: np.ndarray, size: int) -> np.ndarray:
    """Drop out-of-alphabet mass and renormalise what remains proportionally."""
    inside = np.asarray(p[..., :size], dtype=np.float64)
    return inside / inside.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class FactorizedModel:
    pi: np.ndarray
    alphabet: Alphabet

    context_free = True

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.shape != (self.alphabet.size,):
            raise InvalidParameterError(f"pi has shape {pi.shape}, alphabet size {self.alphabet.size}")
        if np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-9:
            raise InvalidParameterError("pi must be strictly positive and sum to 1")
        object.__setattr__(self, "pi", pi)

    def session(self, length: int | None = None) -> _FmSession:
        return _FmSession(self.pi)

    def vocab_distributions(self, tokens) -> np.ndarray:
        return np.broadcast_to(self.pi, (len(tokens), self.alphabet.size))

    def to_dict(self) -> dict:
        return {"n_bits": self.alphabet.n_bits, "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> FactorizedModel:
        return cls(np.asarray(doc["pi"], dtype=np.float64), Alphabet(int(doc["n_bits"])))

    @classmethod
    def uniform(cls, alphabet: Alphabet) -> FactorizedModel:
        return cls(np.full(alphabet.size, 1.0 / alphabet.size), alphabet)


class _FmSession:
    def __init__(self, pi):
        self.pi = pi

    def advance(self, tokens) -> np.ndarray:
        return self.pi


def fit_fm(corpus, alphabet: Alphabet) -> FactorizedModel:
    """Laplace-smoothed marginal: ``(count_i + 1) / (total + size)``."""
    corpus = list(corpus)
    if not corpus:
        raise InvalidParameterError("cannot fit a factorized model on an empty corpus")
    counts = np.zeros(alphabet.size, dtype=np.int64)
    for seq in corpus:
        arr = np.frombuffer(seq, dtype=np.uint8) if isinstance(seq, (bytes, bytearray)) else np.asarray(seq)
        if arr.size and arr.max() >= alphabet.size:
            raise InvalidParameterError("corpus token outside the alphabet")
        counts += np.bincount(arr.astype(np.int64), minlength=alphabet.size)
    pi = (counts + 1) / (counts.sum() + alphabet.size)
    return FactorizedModel(pi, alphabet)


def fm_next(fm: FactorizedModel, prefix=()) -> np.ndarray:
    return fm.pi
