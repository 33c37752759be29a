"""Layer primitives, windowed attention, gradient checking and checkpoints.

Tensors are torch tensors; autograd provides reverse-mode gradients and
``grad_check`` compares them against central finite differences.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tclnet.errors import ContractViolationError, FormatError, InvalidParameterError

CHECKPOINT_MAGIC = b"TCLW"
CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class AttentionConfig:
    window: int
    heads: int
    dim: int
    causal: bool = False

    def __post_init__(self):
        if self.window < 1 or self.heads < 1 or self.dim < 1:
            raise InvalidParameterError("window, heads and dim must be positive")
        if self.dim % self.heads:
            raise InvalidParameterError(f"dim={self.dim} is not divisible by heads={self.heads}")


# ---------------------------------------------------------------------------
# functional ops

def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Same-padded cross-correlation; ``x`` is ``[C,H,W]`` or ``[B,C,H,W]``."""
    kh, kw = kernel.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidParameterError(f"kernel {kh}x{kw} must have odd dimensions")
    if x.shape[-3] != kernel.shape[1]:
        raise InvalidParameterError(f"input has {x.shape[-3]} channels, kernel expects {kernel.shape[1]}")
    return F.conv2d(x, kernel, bias, padding=(kh // 2, kw // 2))


def batch_norm(x, gamma, beta, running_mean, running_var, mode: str = "train") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise InvalidParameterError(f"unknown batch-norm mode {mode!r}")
    return F.batch_norm(
        x, running_mean, running_var, gamma, beta,
        training=mode == "train", momentum=BN_MOMENTUM, eps=BN_EPS,
    )


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return F.relu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "gelu":
        return F.gelu(x)
    raise InvalidParameterError(f"unknown activation {kind!r}")


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise InvalidParameterError(f"trailing dim {x.shape[-1]} does not match weight input dim {weight.shape[1]}")
    return F.linear(x, weight, bias)


def attention_mix(q, k, v, mask=None, bias=None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d) + bias) v with ``mask`` (True = blocked) applied.

    Shapes are ``[..., heads, n_q, d]`` for q and ``[..., heads, n_k, d]`` for k, v.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def causal_mask(n_q: int, n_k: int, device=None) -> torch.Tensor:
    """Mask for ``n_q`` new queries appended after ``n_k - n_q`` cached keys."""
    past = n_k - n_q
    q_pos = torch.arange(n_q, device=device)[:, None] + past
    k_pos = torch.arange(n_k, device=device)[None, :]
    return k_pos > q_pos


# ---------------------------------------------------------------------------
# modules

def init_weights(module: nn.Module) -> None:
    """Kaiming-uniform for convs and dense layers, N(0, 0.02) for attention projections."""
    for m in module.modules():
        if isinstance(m, AttentionBlock):
            for lin in (m.qkv, m.proj):
                nn.init.normal_(lin.weight, std=0.02)
                nn.init.zeros_(lin.bias)
        elif isinstance(m, (nn.Conv2d, nn.Linear)) and not getattr(m, "_attention_projection", False):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SameConv2d(nn.Conv2d):
    """Conv2d with odd kernel and shape-preserving zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, bias: bool = True):
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        if kh % 2 == 0 or kw % 2 == 0:
            raise InvalidParameterError(f"kernel {kh}x{kw} must have odd dimensions")
        super().__init__(in_channels, out_channels, (kh, kw), padding=(kh // 2, kw // 2), bias=bias)


class CBR(nn.Sequential):
    """Conv + batch norm + ReLU; ``relu=False`` leaves the output signed."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, relu: bool = True):
        layers = [
            SameConv2d(in_channels, out_channels, kernel_size),
            nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM),
        ]
        if relu:
            layers.append(nn.ReLU())
        super().__init__(*layers)


class AttentionBlock(nn.Module):
    """Pre-norm transformer block over token sequences ``[B, N, dim]``.

    ``forward`` accepts an additive attention bias, a key-padding mask and,
    for causal use, a key/value cache that is extended in place.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, causal: bool = False):
        super().__init__()
        AttentionConfig(window=1, heads=heads, dim=dim)
        self.dim, self.heads, self.causal = dim, heads, causal
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))
        for lin in (self.qkv, self.proj):
            lin._attention_projection = True

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def mix(self, x, bias=None, key_mask=None, cache=None) -> torch.Tensor:
        """The attention mixing step alone: heads concatenated, before projection."""
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        mask = None
        if self.causal:
            mask = causal_mask(q.shape[2], k.shape[2], device=x.device)
        if key_mask is not None:
            km = key_mask[:, None, None, :]
            mask = km if mask is None else (mask | km)
        out = attention_mix(q, k, v, mask=mask, bias=bias)
        b, _, n, _ = out.shape
        return out.transpose(1, 2).reshape(b, n, self.dim)

    def forward(self, x, bias=None, key_mask=None, cache=None) -> torch.Tensor:
        x = x + self.proj(self.mix(self.norm1(x), bias=bias, key_mask=key_mask, cache=cache))
        return x + self.ffn(self.norm2(x))


class WindowAttention2d(nn.Module):
    """Non-overlapping window attention over ``[B, C, H, W]`` feature maps.

    H and W are zero-padded to multiples of the window; padded positions are
    masked out as keys and cropped from the output. Each window carries a
    learned relative-position bias per head.
    """

    def __init__(self, cfg: AttentionConfig, ffn_ratio: int = 2):
        super().__init__()
        self.cfg = cfg
        self.block = AttentionBlock(cfg.dim, cfg.heads, ffn_ratio * cfg.dim, causal=cfg.causal)
        w = cfg.window
        self.rel_bias = nn.Parameter(torch.zeros((2 * w - 1) ** 2, cfg.heads))
        coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
        self.register_buffer("rel_index", rel[0] * (2 * w - 1) + rel[1], persistent=False)

    def _bias(self) -> torch.Tensor:
        n = self.cfg.window ** 2
        return self.rel_bias[self.rel_index.view(-1)].view(n, n, -1).permute(2, 0, 1)

    def _partition(self, x):
        b, c, h, w = x.shape
        ws = self.cfg.window
        ph, pw = (-h) % ws, (-w) % ws
        valid = torch.ones(1, 1, h, w, dtype=torch.bool, device=x.device)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
            valid = F.pad(valid, (0, pw, 0, ph), value=False)
        hp, wp = h + ph, w + pw
        tokens = (
            x.view(b, c, hp // ws, ws, wp // ws, ws)
            .permute(0, 2, 4, 3, 5, 1)
            .reshape(-1, ws * ws, c)
        )
        key_mask = ~(
            valid.view(1, 1, hp // ws, ws, wp // ws, ws)
            .permute(0, 2, 4, 3, 5, 1)
            .reshape(-1, ws * ws)
        )
        key_mask = key_mask.repeat(b, 1) if (ph or pw) else None
        return tokens, key_mask, (b, c, h, w, hp, wp)

    def _merge(self, tokens, dims):
        b, _, h, w, hp, wp = dims
        ws = self.cfg.window
        c = tokens.shape[-1]
        out = tokens.view(b, hp // ws, wp // ws, ws, ws, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, hp, wp)
        return out[:, :, :h, :w]

    def mix(self, x: torch.Tensor) -> torch.Tensor:
        """Mixing step on the raw map (no norm, no projection); for probing."""
        tokens, key_mask, dims = self._partition(x)
        return self._merge(self.block.mix(tokens, bias=self._bias(), key_mask=key_mask), dims)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.dim:
            raise InvalidParameterError(f"expected {self.cfg.dim} channels, got {x.shape[1]}")
        tokens, key_mask, dims = self._partition(x)
        return self._merge(self.block(tokens, bias=self._bias(), key_mask=key_mask), dims)


def windowed_self_attention(x: torch.Tensor, cfg: AttentionConfig, weights: nn.Module | None = None) -> torch.Tensor:
    """Apply a window-attention block to a map ``[B,C,H,W]`` or a sequence ``[B,N,C]``.

    For sequences the window is the whole sequence. ``weights`` is the module
    holding the parameters; a freshly initialised one is built when omitted.
    """
    if x.dim() == 4:
        module = weights if weights is not None else WindowAttention2d(cfg).to(x.dtype)
        return module(x)
    if x.dim() == 3:
        module = weights if weights is not None else AttentionBlock(cfg.dim, cfg.heads, 2 * cfg.dim, cfg.causal).to(x.dtype)
        return module(x)
    raise InvalidParameterError(f"unsupported input rank {x.dim()}")


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` re-evaluates a scalar loss from ``tensors`` (leaf tensors with
    ``requires_grad``). Relative error is ``|a - f| / max(1, |a|, |f|)``. With
    ``max_coords`` set, that many coordinates per tensor are sampled.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise InvalidParameterError(f"eps={eps} outside [1e-7, 1e-4]")
    if any(t.dtype != torch.float64 for t in tensors):
        raise InvalidParameterError("grad_check requires float64 tensors")
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(tensors), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            if not torch.all(torch.isfinite(g)):
                raise ContractViolationError("non-finite analytic gradient")
            flat, gflat = t.view(-1), g.reshape(-1)
            n = flat.numel()
            idx = range(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                a = gflat[i].item()
                if not math.isfinite(fd):
                    raise ContractViolationError("non-finite finite-difference estimate")
                worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst


# ---------------------------------------------------------------------------
# optimisation

def adam_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update (bias-corrected), matching ``torch.optim.Adam``."""
    b1, b2 = betas
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    ms = state.setdefault("m", [torch.zeros_like(p) for p in params])
    vs = state.setdefault("v", [torch.zeros_like(p) for p in params])
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, ms, vs):
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def cosine_lr(step: int, warmup: int, total: int, lr_max: float, lr_min: float) -> float:
    """Linear warm-up to ``lr_max`` at ``step == warmup``, then cosine decay to ``lr_min`` at ``total``."""
    if step > total:
        raise InvalidParameterError(f"step {step} beyond total {total}")
    if warmup > 0 and step < warmup:
        return lr_max * step / warmup
    span = total - warmup
    progress = 1.0 if span <= 0 else (step - warmup) / span
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# checkpoints

def _checkpoint_tensors(module_or_state) -> dict[str, torch.Tensor]:
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    return {k: v for k, v in state.items() if not k.endswith("num_batches_tracked")}


def checkpoint_bytes(module_or_state) -> bytes:
    """Serialise named tensors: magic, version u16, count u32, then per entry
    name-length u16, UTF-8 name, rank u8, dims u32 each, float32 data."""
    tensors = _checkpoint_tensors(module_or_state)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        encoded = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_checkpoint(raw: bytes) -> dict[str, torch.Tensor]:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 10
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(raw):
                raise FormatError(f"checkpoint truncated inside tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = torch.from_numpy(arr.copy())
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(raw):
        raise FormatError("trailing bytes after checkpoint table")
    return out


def save_checkpoint(path, module: nn.Module) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    raw = checkpoint_bytes(module)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path, module: nn.Module) -> str:
    raw = Path(path).read_bytes()
    tensors = parse_checkpoint(raw)
    current = module.state_dict()
    expected = set(_checkpoint_tensors(current))
    if set(tensors) != expected:
        missing, extra = expected - set(tensors), set(tensors) - expected
        raise FormatError(f"checkpoint does not match model (missing={sorted(missing)}, extra={sorted(extra)})")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(current[name].shape):
            raise FormatError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(current[name].shape)}")
    module.load_state_dict({k: v.to(current[k].dtype) for k, v in tensors.items()}, strict=False)
    return hashlib.sha256(raw).hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameters_of(modules: Iterable[nn.Module]) -> list[torch.Tensor]:
    return [p for m in modules for p in m.parameters()]
