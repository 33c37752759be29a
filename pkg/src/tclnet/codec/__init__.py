from tclnet.codec.arithmetic import (
    FREQ_TOTAL,
    ArithmeticDecoder,
    ArithmeticEncoder,
    decode_with_frequencies,
    encode_with_frequencies,
    quantize_frequencies,
)
from tclnet.codec.entropy import SelectionIndicator, context_entropies, entropy_bits, factorized_entropy, select_symbols
from tclnet.codec.hybrid import HybridResult, estimate_ideal_bits, hybrid_decode, hybrid_encode
from tclnet.codec.payload import BitStream, CompressedPayload, decode_payload, encode_payload
from tclnet.codec.quantize import QuantizedSymbols, dequantize, quantize

__all__ = [
    "FREQ_TOTAL",
    "ArithmeticDecoder",
    "ArithmeticEncoder",
    "BitStream",
    "CompressedPayload",
    "HybridResult",
    "QuantizedSymbols",
    "SelectionIndicator",
    "context_entropies",
    "decode_payload",
    "decode_with_frequencies",
    "dequantize",
    "encode_payload",
    "encode_with_frequencies",
    "entropy_bits",
    "estimate_ideal_bits",
    "factorized_entropy",
    "hybrid_decode",
    "hybrid_encode",
    "quantize",
    "quantize_frequencies",
    "select_symbols",
]
