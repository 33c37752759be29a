"""External next-token provider reached over a small JSON-over-HTTP protocol.

Request:  POST /v1/next_token {"prompt": str, "context_bytes": base64, "alphabet_bits": int}
Response: {"logprobs": {"<byte value>": float, ...}}
"""
from __future__ import annotations

import base64
import math
import os
import time

import httpx
import numpy as np

from tclnet.errors import ProtocolError, ProviderUnavailableError
from tclnet.probmodels.base import Alphabet

FLOOR = 2.0 ** -16
ENV_URL = "TCLNET_LLM_URL"
DEFAULT_URL = "http://127.0.0.1:8765"

PROMPT_TEMPLATE = (
    "You are a probability estimator, not a text generator. "
    "The data is a sequence of {len} byte symbols, each in [0,{size_minus_1}]. "
    "Given the symbols so far, output the probability of each possible next symbol."
)


def build_prompt(alphabet: Alphabet, sequence_length: int) -> str:
    return PROMPT_TEMPLATE.format(len=int(sequence_length), size_minus_1=alphabet.size - 1)


def logprobs_to_distribution(logprobs: dict, alphabet: Alphabet, floor: float = FLOOR) -> np.ndarray:
    """Map a sparse byte -> logprob table onto the alphabet.

    Entries outside the alphabet are dropped and the rest renormalised, which
    spreads their mass proportionally. Alphabet symbols the provider left out
    get ``floor`` before renormalising.
    """
    if not isinstance(logprobs, dict):
        raise ProtocolError("logprobs must be an object")
    p = np.full(alphabet.size, floor)
    for key, value in logprobs.items():
        try:
            tok = int(key)
        except (TypeError, ValueError):
            raise ProtocolError(f"logprobs key {key!r} is not a byte value") from None
        if not 0 <= tok <= 255:
            raise ProtocolError(f"logprobs key {tok} outside [0, 255]")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value) or value > 0:
            raise ProtocolError(f"logprob for {tok} is not a valid log-probability: {value!r}")
        if tok < alphabet.size:
            p[tok] = math.exp(value)
    total = p.sum()
    if total <= 0:
        return np.full(alphabet.size, 1.0 / alphabet.size)
    return p / total


class LlmProvider:
    """Provider backed by an HTTP endpoint.

    ``client`` may be any ``httpx.Client`` (tests pass an in-process one);
    otherwise a client is created for ``url`` or ``$TCLNET_LLM_URL``.
    """

    context_free = False

    def __init__(
        self,
        alphabet: Alphabet,
        url: str | None = None,
        client: httpx.Client | None = None,
        retries: int = 2,
        timeout: float = 10.0,
        backoff: float = 0.05,
        floor: float = FLOOR,
        max_connections: int = 4,
    ):
        self.alphabet = alphabet
        self.url = url or os.environ.get(ENV_URL, DEFAULT_URL)
        self.retries = retries
        self.backoff = backoff
        self.floor = floor
        self.client = client or httpx.Client(
            base_url=self.url, timeout=timeout, limits=httpx.Limits(max_connections=max_connections)
        )

    def next_distribution(self, prompt: str, prefix) -> np.ndarray:
        body = {
            "prompt": prompt,
            "context_bytes": base64.b64encode(bytes(bytearray(prefix))).decode("ascii"),
            "alphabet_bits": self.alphabet.n_bits,
        }
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.client.post("/v1/next_token", json=body)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code != 200:
                    raise ProtocolError(f"provider answered HTTP {resp.status_code}")
                else:
                    try:
                        doc = resp.json()
                    except ValueError:
                        raise ProtocolError("provider response is not JSON") from None
                    if not isinstance(doc, dict) or "logprobs" not in doc:
                        raise ProtocolError("provider response lacks 'logprobs'")
                    return logprobs_to_distribution(doc["logprobs"], self.alphabet, self.floor)
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise ProviderUnavailableError(f"provider at {self.url} unavailable after {self.retries + 1} attempts: {last}")

    def session(self, length: int | None = None) -> LlmSession:
        return LlmSession(self, length)

    def vocab_distributions(self, tokens) -> np.ndarray:
        tokens = list(tokens)
        sess = self.session(len(tokens))
        rows = [sess.advance([])]
        for t in tokens[:-1]:
            rows.append(sess.advance([t]))
        return np.stack(rows[: len(tokens)]) if tokens else np.zeros((0, self.alphabet.size))


class LlmSession:
    def __init__(self, provider: LlmProvider, length: int | None):
        self.provider = provider
        self.prefix: list[int] = []
        self.prompt = build_prompt(provider.alphabet, length if length is not None else 0)

    def advance(self, tokens) -> np.ndarray:
        self.prefix.extend(int(t) for t in tokens)
        return self.provider.next_distribution(self.prompt, self.prefix)


def llm_next(provider: LlmProvider, prompt: str, prefix) -> np.ndarray:
    return provider.next_distribution(prompt, prefix)
