"""Hybrid Transformer-CNN autoencoder for angle-delay CSI.

Every block here maps a ``[B, 2, n_a, n_t]`` map to one of identical shape, so
the residual connections compose freely.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from tclnet.errors import InvalidParameterError
from tclnet.nn import CBR, AttentionConfig, SameConv2d, WindowAttention2d, cosine_lr, init_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransConvConfig:
    r: int = 8
    window: int = 4
    heads: int = 2
    in_channels: int = 2

    def __post_init__(self):
        if self.r <= 2:
            raise InvalidParameterError(f"expanded channels r={self.r} must exceed 2")
        AttentionConfig(self.window, self.heads, self.r_g)

    @property
    def r_l(self) -> int:
        return math.ceil(self.r / 2)

    @property
    def r_g(self) -> int:
        return self.r // 2

    def attention(self) -> AttentionConfig:
        return AttentionConfig(window=self.window, heads=self.heads, dim=self.r_g)


@dataclass(frozen=True)
class LossyModelConfig:
    n_a: int = 16
    n_t: int = 16
    cr_num: int = 1
    cr_den: int = 4
    r: int = 8
    window: int = 4
    heads: int = 2
    width: int = 8

    def __post_init__(self):
        if self.n_a < 1 or self.n_t < 1:
            raise InvalidParameterError("n_a and n_t must be positive")
        if self.cr_den <= 0 or self.cr_num <= 0 or self.cr_num > self.cr_den:
            raise InvalidParameterError(f"compression ratio {self.cr_num}/{self.cr_den} must lie in (0, 1]")
        TransConvConfig(self.r, self.window, self.heads)

    @property
    def cr(self) -> Fraction:
        return Fraction(self.cr_num, self.cr_den)

    @property
    def csi_size(self) -> int:
        """Real-valued CSI elements, 2 * n_a * n_t."""
        return 2 * self.n_a * self.n_t

    @property
    def latent_len(self) -> int:
        # round-half-up on an exact rational, so 2*16*16/4 is exactly 128
        return max(1, math.floor(self.csi_size * self.cr + Fraction(1, 2)))

    @property
    def transconv(self) -> TransConvConfig:
        return TransConvConfig(self.r, self.window, self.heads)

    def to_json(self) -> str:
        doc = {"n_a": self.n_a, "n_t": self.n_t, "cr_num": self.cr_num, "cr_den": self.cr_den,
               "r": self.r, "window": self.window, "heads": self.heads}
        if self.width != 8:
            doc["width"] = self.width
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> LossyModelConfig:
        return cls(**json.loads(text))


class TransConv(nn.Module):
    """Parallel local-conv / windowed-attention block with two residual paths."""

    def __init__(self, cfg: TransConvConfig):
        super().__init__()
        self.cfg = cfg
        self.expand = SameConv2d(cfg.in_channels, cfg.r, 1)
        self.local = nn.Sequential(SameConv2d(cfg.r_l, cfg.r_l, 3), nn.ReLU(), SameConv2d(cfg.r_l, cfg.r_l, 3))
        self.glob = WindowAttention2d(cfg.attention())
        self.fuse = SameConv2d(cfg.r, cfg.in_channels, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.cfg.in_channels:
            raise InvalidParameterError(f"TransConv expects {self.cfg.in_channels} channels, got {f.shape[1]}")
        expanded = self.expand(f)
        f_l, f_g = expanded[:, : self.cfg.r_l], expanded[:, self.cfg.r_l :]
        f_l = self.local(f_l) + f_l
        f_g = self.glob(f_g)
        return self.fuse(torch.cat([f_l, f_g], dim=1)) + f


class TCBlock(nn.Module):
    """Decoder refinement block: two conv+TransConv branches, 1x1 fusion, skip."""

    def __init__(self, cfg: LossyModelConfig):
        super().__init__()
        w, tc = cfg.width, cfg.transconv
        self.branch1 = nn.Sequential(CBR(2, w, 7), CBR(w, w, (1, 9)), CBR(w, 2, (9, 1), relu=False), TransConv(tc))
        self.branch2 = nn.Sequential(CBR(2, w, 5), CBR(w, w, (1, 11)), CBR(w, 2, (11, 1), relu=False), TransConv(tc))
        self.fuse = CBR(4, 2, 1, relu=False)

    def forward(self, x):
        return self.fuse(torch.cat([self.branch1(x), self.branch2(x)], dim=1)) + x


class Encoder(nn.Module):
    def __init__(self, cfg: LossyModelConfig):
        super().__init__()
        w, tc = cfg.width, cfg.transconv
        self.cfg = cfg
        self.branch1 = nn.Sequential(CBR(2, w, 9), CBR(w, w, (1, 11)), CBR(w, 2, (11, 1), relu=False), TransConv(tc))
        self.branch2 = nn.Sequential(CBR(2, 2, 9, relu=False), TransConv(tc))
        self.fuse = CBR(4, 2, 1, relu=False)
        self.refine = TransConv(tc)
        self.fc = nn.Linear(cfg.csi_size, cfg.latent_len)

    def forward(self, x):
        _check_map(x, self.cfg)
        y = self.fuse(torch.cat([self.branch1(x), self.branch2(x)], dim=1))
        return self.fc(self.refine(y).flatten(1))


class Decoder(nn.Module):
    def __init__(self, cfg: LossyModelConfig, blocks: int = 3):
        super().__init__()
        self.cfg = cfg
        self.fc = nn.Linear(cfg.latent_len, cfg.csi_size)
        self.head = nn.Sequential(CBR(2, 2, 9, relu=False), TransConv(cfg.transconv))
        self.blocks = nn.Sequential(*[TCBlock(cfg) for _ in range(blocks)])

    def forward(self, z):
        if z.shape[-1] != self.cfg.latent_len:
            raise InvalidParameterError(f"latent length {z.shape[-1]} != {self.cfg.latent_len}")
        x = self.fc(z).view(-1, 2, self.cfg.n_a, self.cfg.n_t)
        return torch.sigmoid(self.blocks(self.head(x)))


class LossyAutoencoder(nn.Module):
    def __init__(self, cfg: LossyModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        init_weights(self)
        zero_init_residuals(self)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def zero_init_residuals(model: nn.Module) -> None:
    """Start every residual block as the identity.

    The normalised CSI occupies a narrow band around its zero level, so
    unit-scale branch outputs at initialisation swamp the signal.
    """
    for m in model.modules():
        if isinstance(m, TransConv):
            nn.init.zeros_(m.fuse.weight)
            nn.init.zeros_(m.fuse.bias)
        elif isinstance(m, TCBlock):
            nn.init.zeros_(m.fuse[1].weight)


def _check_map(x: torch.Tensor, cfg: LossyModelConfig) -> None:
    if tuple(x.shape[1:]) != (2, cfg.n_a, cfg.n_t):
        raise InvalidParameterError(f"input shape {tuple(x.shape[1:])} != (2, {cfg.n_a}, {cfg.n_t})")


@dataclass
class LatentVector:
    values: np.ndarray
    model_id: str = ""


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x.data if hasattr(x, "data") else x))
    return t.unsqueeze(0) if t.dim() == 3 else t


def encode(x, model: LossyAutoencoder, model_id: str = "") -> LatentVector:
    """Latent of one ``RealCsiTensor`` (or ``[2, n_a, n_t]`` array)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        z = model.encoder(_as_batch(x).to(dtype))
    return LatentVector(z[0].double().numpy(), model_id)


def decode(z_hat, model: LossyAutoencoder) -> np.ndarray:
    """Reconstructed ``[2, n_a, n_t]`` array in (0, 1)."""
    values = np.asarray(getattr(z_hat, "values", z_hat), dtype=np.float64)
    if values.shape != (model.cfg.latent_len,):
        raise InvalidParameterError(f"latent length {values.shape} != ({model.cfg.latent_len},)")
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model.decoder(torch.as_tensor(values).to(dtype)[None])
    return out[0].double().numpy()


@dataclass
class TrainResult:
    model: LossyAutoencoder
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def calibrate_output(model: LossyAutoencoder, samples: np.ndarray) -> None:
    """Start the decoder output at the data's per-channel mean and spread.

    The decoder head ends in batch norm, so at initialisation the sigmoid
    sees unit-variance logits while normalised CSI sits in a narrow band.
    Setting the head's affine terms to ``logit(mean)`` and ``std / (m (1 - m))``
    (the sigmoid slope at the mean) removes that mismatch before training.
    """
    x = np.asarray(samples, dtype=np.float64)
    mean = np.clip(x.mean(axis=(0, 2, 3)), 1e-3, 1 - 1e-3)
    std = x.std(axis=(0, 2, 3))
    slope = mean * (1 - mean)
    bn = model.decoder.head[0][1]
    with torch.no_grad():
        bn.bias.copy_(torch.as_tensor(np.log(mean / (1 - mean))))
        bn.weight.copy_(torch.as_tensor(np.maximum(std / slope, 1e-3)))


def init_lossy(samples: np.ndarray, cfg: LossyModelConfig, seed: int = 0, dtype=torch.float32) -> LossyAutoencoder:
    """The untrained model ``train_lossy`` starts from."""
    samples = np.asarray(samples)
    if samples.ndim != 4 or len(samples) == 0:
        raise InvalidParameterError("training needs a non-empty [N, 2, n_a, n_t] array")
    torch.manual_seed(seed)
    model = LossyAutoencoder(cfg)
    _check_map(torch.as_tensor(samples[:1]), cfg)
    calibrate_output(model, samples)
    return model.to(dtype)


def train_lossy(
    samples: np.ndarray,
    cfg: LossyModelConfig,
    epochs: int = 500,
    warmup: int = 20,
    seed: int = 0,
    lr_max: float = 2e-3,
    lr_min: float = 5e-5,
    batch_size: int = 32,
    dtype=torch.float32,
) -> TrainResult:
    """MSE training with Adam and warm-up + cosine annealing (stepped per epoch).

    ``samples`` is ``[N, 2, n_a, n_t]`` in [0, 1].
    """
    samples = np.asarray(samples)
    model = init_lossy(samples, cfg, seed, dtype)
    data = torch.as_tensor(samples).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=lr_max)
    gen = torch.Generator().manual_seed(seed)
    result = TrainResult(model)
    for epoch in range(1, epochs + 1):
        lr = cosine_lr(epoch, warmup, epochs, lr_max, lr_min)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = torch.randperm(len(data), generator=gen)
        total = 0.0
        for start in range(0, len(data), batch_size):
            batch = data[order[start : start + batch_size]]
            if len(batch) < 2:
                continue
            loss = torch.mean((model(batch) - batch) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        result.losses.append(total / len(data))
        result.lrs.append(lr)
        if epoch % 50 == 0 or epoch == epochs:
            log.info("epoch %d/%d loss %.6g lr %.3g", epoch, epochs, result.losses[-1], lr)
    model.eval()
    return result


def reconstruct(model: LossyAutoencoder, samples: np.ndarray) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model(torch.as_tensor(np.asarray(samples)).to(dtype)).double().numpy()


# ---------------------------------------------------------------------------
# MAC / FLOP accounting: 2*kh*kw*cin*cout*H*W per conv, 2*din*dout per dense
# position, and for attention per window of n tokens with dim d:
# qkv 2*3*d*d*n + scores 2*n*n*d + weighting 2*n*n*d + proj 2*d*d*n + ffn.

def _conv_flops(conv: nn.Conv2d, h: int, w: int) -> int:
    kh, kw = conv.kernel_size
    return 2 * kh * kw * conv.in_channels * conv.out_channels * h * w


def _attention_flops(module: WindowAttention2d, h: int, w: int) -> int:
    cfg = module.cfg
    ws = cfg.window
    n = ws * ws
    windows = math.ceil(h / ws) * math.ceil(w / ws)
    d = cfg.dim
    ffn = module.block.ffn[0].out_features
    per_window = 2 * 3 * d * d * n + 2 * n * n * d * 2 + 2 * d * d * n + 2 * 2 * d * ffn * n
    return windows * per_window


def count_macs(model: nn.Module | None, h: int | None = None, w: int | None = None) -> int:
    """FLOP estimate by the accounting rule above; ``None`` counts as an empty model."""
    if model is None:
        return 0
    if isinstance(model, LossyModelConfig):
        model = LossyAutoencoder(model)
    cfg = getattr(model, "cfg", None)
    if h is None or w is None:
        h, w = (cfg.n_a, cfg.n_t) if isinstance(cfg, LossyModelConfig) else (1, 1)
    total = 0
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            total += _conv_flops(m, h, w)
        elif isinstance(m, nn.Linear) and not getattr(m, "_attention_projection", False):
            if not _inside_attention(model, m):
                total += 2 * m.in_features * m.out_features
        elif isinstance(m, WindowAttention2d):
            total += _attention_flops(m, h, w)
    return total


def _inside_attention(root: nn.Module, target: nn.Module) -> bool:
    for m in root.modules():
        if isinstance(m, WindowAttention2d) and any(sub is target for sub in m.modules()):
            return True
    return False


def config_as_dict(cfg: LossyModelConfig) -> dict:
    return asdict(cfg)


def save_model(directory, model: LossyAutoencoder, stem: str = "lossy") -> str:
    from tclnet.nn import save_checkpoint

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.json").write_text(model.cfg.to_json())
    return save_checkpoint(directory / f"{stem}.tclw", model)


def load_model(directory, stem: str = "lossy") -> tuple[LossyAutoencoder, str]:
    from tclnet.nn import load_checkpoint

    directory = Path(directory)
    cfg = LossyModelConfig.from_json((directory / f"{stem}.json").read_text())
    model = LossyAutoencoder(cfg)
    digest = load_checkpoint(directory / f"{stem}.tclw", model)
    model.eval()
    return model, digest
