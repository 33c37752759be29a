from tclnet.probmodels.base import (
    Alphabet,
    FactorizedModel,
    ascii_detokenize,
    ascii_tokenize,
    fit_fm,
    fm_next,
    restrict_to_alphabet,
)
from tclnet.probmodels.llm import LlmProvider, build_prompt, llm_next, logprobs_to_distribution
from tclnet.probmodels.lm import ByteLM, LmConfig, LmProvider, cross_entropy_bits, lm_forward, load_lm, save_lm, train_lm

__all__ = [
    "Alphabet",
    "ByteLM",
    "FactorizedModel",
    "LlmProvider",
    "LmConfig",
    "LmProvider",
    "ascii_detokenize",
    "ascii_tokenize",
    "build_prompt",
    "cross_entropy_bits",
    "fit_fm",
    "fm_next",
    "llm_next",
    "lm_forward",
    "load_lm",
    "logprobs_to_distribution",
    "restrict_to_alphabet",
    "save_lm",
    "train_lm",
]
