"""Decoder-only byte language model used as the context model of the lossless stage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from tclnet.errors import InvalidParameterError
from tclnet.nn import AttentionBlock, init_weights, load_checkpoint, save_checkpoint
from tclnet.probmodels.base import Alphabet

VOCAB = 256


@dataclass(frozen=True)
class LmConfig:
    embed: int = 64
    blocks: int = 2
    heads: int = 4
    ffn: int = 256
    max_len: int = 1024

    def __post_init__(self):
        for name in ("embed", "blocks", "heads", "ffn", "max_len"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"lm {name} must be positive")
        if self.embed % self.heads:
            raise InvalidParameterError(f"embed={self.embed} not divisible by heads={self.heads}")

    @classmethod
    def full_scale(cls, max_len: int = 1024) -> LmConfig:
        return cls(embed=256, blocks=4, heads=8, ffn=1024, max_len=max_len)


class ByteLM(nn.Module):
    """Causal transformer over byte tokens.

    The input at step 0 is a learned start embedding that lives outside the
    256-entry token table, so every byte value stays a plain symbol.
    """

    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(VOCAB, cfg.embed)
        self.start = nn.Parameter(torch.zeros(cfg.embed))
        self.pos = nn.Embedding(cfg.max_len, cfg.embed)
        self.blocks = nn.ModuleList(AttentionBlock(cfg.embed, cfg.heads, cfg.ffn, causal=True) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(cfg.embed)
        self.head = nn.Linear(cfg.embed, VOCAB)
        init_weights(self)
        for emb in (self.tok, self.pos):
            nn.init.normal_(emb.weight, std=0.02)
        nn.init.normal_(self.start, std=0.02)
        # start from a uniform next-token distribution
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _inputs(self, tokens: torch.Tensor, offset: int, with_start: bool) -> torch.Tensor:
        x = self.tok(tokens)
        if with_start:
            start = self.start.expand(tokens.shape[0], 1, -1)
            x = torch.cat([start, x], dim=1)
        pos = torch.arange(offset, offset + x.shape[1], device=x.device)
        return x + self.pos(pos)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits ``[B, N, 256]``; row k is conditioned on tokens before k."""
        if tokens.shape[1] > self.cfg.max_len:
            raise InvalidParameterError(f"sequence length {tokens.shape[1]} exceeds max_len={self.cfg.max_len}")
        if tokens.shape[1] == 0:
            raise InvalidParameterError("empty token sequence")
        x = self._inputs(tokens[:, :-1], 0, with_start=True)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))

    def step(self, tokens: torch.Tensor, caches: list[dict], offset: int, with_start: bool) -> torch.Tensor:
        x = self._inputs(tokens, offset, with_start)
        for blk, cache in zip(self.blocks, caches):
            x = blk(x, cache=cache)
        return self.head(self.norm(x[:, -1:]))[:, 0]


class LmSession:
    """Incremental next-token distributions with a key/value cache.

    ``advance(tokens)`` appends ``tokens`` to the known prefix and returns the
    256-way distribution of the token that follows. Encoder and decoder issue
    the same ``advance`` calls, so they see the same floating-point results.
    """

    def __init__(self, model: ByteLM):
        self.model = model
        self.caches = [{} for _ in model.blocks]
        self.length = 0
        self.started = False

    @torch.no_grad()
    def advance(self, tokens) -> np.ndarray:
        toks = torch.as_tensor(list(tokens), dtype=torch.long)[None]
        with_start = not self.started
        offset = self.length + (0 if with_start else 1)
        if self.length + toks.shape[1] + 1 > self.model.cfg.max_len:
            raise InvalidParameterError(f"context exceeds max_len={self.model.cfg.max_len}")
        if not with_start and toks.shape[1] == 0:
            raise InvalidParameterError("advance needs at least one new token after the first call")
        logits = self.model.step(toks, self.caches, offset, with_start)
        self.started = True
        self.length += toks.shape[1]
        return torch.softmax(logits[0].double(), dim=-1).numpy()


class LmProvider:
    """Adapts a trained :class:`ByteLM` to the provider contract."""

    context_free = False

    def __init__(self, model: ByteLM, alphabet: Alphabet):
        self.model = model.eval()
        self.alphabet = alphabet

    def session(self, length: int | None = None) -> LmSession:
        return LmSession(self.model)

    def vocab_distributions(self, tokens) -> np.ndarray:
        return lm_forward(self.model, tokens)


@torch.no_grad()
def lm_forward(model: ByteLM, tokens) -> np.ndarray:
    """Teacher-forced distributions ``[len(tokens), 256]`` in float64."""
    toks = torch.as_tensor(np.frombuffer(bytes(tokens), np.uint8).astype(np.int64) if isinstance(tokens, (bytes, bytearray)) else list(tokens), dtype=torch.long)
    if toks.numel() > model.cfg.max_len:
        raise InvalidParameterError(f"sequence length {toks.numel()} exceeds max_len={model.cfg.max_len}")
    if toks.numel() == 0:
        return np.zeros((0, VOCAB))
    model.eval()
    logits = model(toks[None])[0]
    return torch.softmax(logits.double(), dim=-1).numpy()


@dataclass
class LmTrainResult:
    model: ByteLM
    losses: list[float]


def _as_array(seq) -> np.ndarray:
    if isinstance(seq, (bytes, bytearray)):
        return np.frombuffer(bytes(seq), np.uint8).astype(np.int64)
    return np.asarray(seq, dtype=np.int64)


def train_lm(corpus, cfg: LmConfig | None = None, iters: int = 500, batch: int = 16, lr: float = 1e-3, seed: int = 0) -> LmTrainResult:
    """Adam on mean next-token cross-entropy, reported in bits per token.

    Each iteration draws ``batch`` sequences with replacement and crops them
    to the shortest one drawn, keeping every row anchored at the start token.
    """
    cfg = cfg or LmConfig()
    seqs = [_as_array(s)[: cfg.max_len] for s in corpus]
    seqs = [s for s in seqs if s.size]
    if not seqs:
        raise InvalidParameterError("cannot train on an empty corpus")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = ByteLM(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    ln2 = float(np.log(2.0))
    for _ in range(iters):
        pick = torch.randint(len(seqs), (batch,), generator=gen).tolist()
        n = min(seqs[i].size for i in pick)
        toks = torch.as_tensor(np.stack([seqs[i][:n] for i in pick]))
        logits = model(toks)
        loss = nn.functional.cross_entropy(logits.reshape(-1, VOCAB), toks.reshape(-1)) / ln2
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    return LmTrainResult(model, losses)


def cross_entropy_bits(model: ByteLM, seqs) -> float:
    """Mean bits per token over ``seqs``."""
    total, count = 0.0, 0
    for s in seqs:
        arr = _as_array(s)
        if not arr.size:
            continue
        p = lm_forward(model, arr)
        total -= float(np.log2(p[np.arange(arr.size), arr]).sum())
        count += arr.size
    return total / max(count, 1)


def save_lm(directory, model: ByteLM, stem: str = "lm") -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.json").write_text(json.dumps(asdict(model.cfg), sort_keys=True))
    return save_checkpoint(directory / f"{stem}.tclw", model)


def load_lm(directory, stem: str = "lm") -> tuple[ByteLM, str]:
    directory = Path(directory)
    cfg = LmConfig(**json.loads((directory / f"{stem}.json").read_text()))
    model = ByteLM(cfg)
    digest = load_checkpoint(directory / f"{stem}.tclw", model)
    return model.eval(), digest
