"""Hybrid lossless coding: a context model for some symbols, the factorized model for the rest.

Context rule. FM positions are coded with an empty context, so their stream
can be decoded before anything else. LM positions are coded in position
order; before position k the provider session is advanced with every symbol
between the previous LM position and k, so it always sees the full true
prefix, FM and LM symbols alike. Encoder and decoder issue identical
``advance`` calls.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tclnet.codec.arithmetic import (
    ArithmeticDecoder,
    ArithmeticEncoder,
    code_length_bits,
    cumulative,
    quantize_frequencies,
)
from tclnet.codec.entropy import SelectionIndicator, context_entropies, factorized_entropy, select_symbols
from tclnet.codec.payload import BitStream, CompressedPayload, c_to_fixed
from tclnet.codec.quantize import QuantizedSymbols
from tclnet.errors import ContractViolationError, DecodeError, IncompatibleModelError
from tclnet.probmodels.base import restrict_to_alphabet


def alphabet_frequencies(p, size: int) -> np.ndarray:
    """Quantized frequencies over the alphabet from a provider output."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < size:
        raise ContractViolationError(f"provider returned {p.shape[-1]} probabilities for a {size}-symbol alphabet")
    if p.shape[-1] > size:
        p = restrict_to_alphabet(p, size)
    return quantize_frequencies(p)


def _steps(tokens, positions):
    """Yield ``(position, new_context_tokens)`` in coding order."""
    last = 0
    for k in positions:
        yield int(k), tokens[last:k]
        last = int(k)


def encode_positions(tokens, positions, provider, size: int, length: int | None = None) -> tuple[BitStream, float]:
    """Code ``tokens[k]`` for ``k`` in ``positions`` (ascending). Returns the stream and its ideal bits."""
    positions = list(positions)
    if not positions:
        return BitStream.empty(), 0.0
    enc = ArithmeticEncoder()
    ideal = 0.0
    if provider.context_free:
        freqs = alphabet_frequencies(provider.session(length).advance([]), size)
        cum = cumulative(freqs)
        for k in positions:
            enc.encode(cum, int(tokens[k]))
            ideal += code_length_bits(freqs, int(tokens[k]))
    else:
        sess = provider.session(length)
        for k, chunk in _steps(tokens, positions):
            freqs = alphabet_frequencies(sess.advance(chunk), size)
            enc.encode(cumulative(freqs), int(tokens[k]))
            ideal += code_length_bits(freqs, int(tokens[k]))
    data, nbits = enc.finish()
    return BitStream(data, nbits), ideal


def decode_positions(stream: BitStream, tokens: np.ndarray, positions, provider, size: int, length: int | None = None) -> None:
    """Fill ``tokens[k]`` for ``k`` in ``positions``; ``tokens`` must already hold every earlier FM symbol."""
    positions = list(positions)
    if not positions:
        if stream.nbits:
            raise DecodeError("stream carries bits but no positions use it")
        return
    dec = ArithmeticDecoder(stream.data, stream.nbits)
    if provider.context_free:
        cum = cumulative(alphabet_frequencies(provider.session(length).advance([]), size))
        for k in positions:
            tokens[k] = dec.decode(cum, k)
        return
    sess = provider.session(length)
    for k, chunk in _steps(tokens, positions):
        cum = cumulative(alphabet_frequencies(sess.advance(chunk), size))
        tokens[k] = dec.decode(cum, k)


def estimate_ideal_bits(symbols, provider, size: int, positions=None) -> float:
    """Model cross-entropy under the coder's quantized frequencies, in bits."""
    tokens = np.asarray(symbols, dtype=np.int64)
    positions = range(len(tokens)) if positions is None else positions
    total = 0.0
    if provider.context_free:
        freqs = alphabet_frequencies(provider.session(len(tokens)).advance([]), size)
        return float(sum(code_length_bits(freqs, int(tokens[k])) for k in positions))
    sess = provider.session(len(tokens))
    for k, chunk in _steps(tokens, positions):
        total += code_length_bits(alphabet_frequencies(sess.advance(chunk), size), int(tokens[k]))
    return total


def selection_entropies(tokens, context_provider, fm) -> tuple[np.ndarray, float]:
    """Per-position context entropies (over the provider's full output) and the FM entropy."""
    h_l = context_entropies(context_provider.vocab_distributions(tokens)) if len(tokens) else np.zeros(0)
    return h_l, factorized_entropy(fm)


@dataclass(frozen=True)
class HybridResult:
    payload: CompressedPayload
    ideal_bits_l: float
    ideal_bits_f: float

    @property
    def ideal_bits(self) -> float:
        return self.ideal_bits_l + self.ideal_bits_f


def hybrid_encode(q: QuantizedSymbols, context_provider, fm, c: float) -> HybridResult:
    size = q.levels
    if fm.alphabet.size != size:
        raise IncompatibleModelError(f"factorized model has {fm.alphabet.size} symbols, latent uses {size}")
    tokens = q.symbols
    z = len(tokens)
    c_fixed = c_to_fixed(c)
    n_fm = int(np.floor(c * z + 1e-9))
    if n_fm in (0, z):
        # all-LM or all-FM: the selection is forced, skip the entropy pass
        indicator = SelectionIndicator(np.full(z, n_fm == 0), c)
    else:
        h_l, h_f = selection_entropies(tokens, context_provider, fm)
        indicator = select_symbols(h_l, h_f, c, z)
    b_f, ideal_f = encode_positions(tokens, indicator.fm_positions, fm, size, z)
    b_l, ideal_l = encode_positions(tokens, indicator.lm_positions, context_provider, size, z)
    payload = CompressedPayload(q.n_bits, c_fixed, q.z_min, q.z_max, indicator, b_l, b_f)
    return HybridResult(payload, ideal_l, ideal_f)


def hybrid_decode(payload: CompressedPayload, context_provider, fm) -> QuantizedSymbols:
    size = 1 << payload.n_bits
    if fm.alphabet.size != size:
        raise IncompatibleModelError(f"factorized model has {fm.alphabet.size} symbols, payload uses {size}")
    z = payload.z
    tokens = np.zeros(z, dtype=np.int64)
    # FM symbols first: context-free, so their stream decodes independently
    decode_positions(payload.b_f, tokens, payload.indicator.fm_positions, fm, size, z)
    decode_positions(payload.b_l, tokens, payload.indicator.lm_positions, context_provider, size, z)
    return QuantizedSymbols(tokens, payload.n_bits, payload.z_min, payload.z_max)
