"""Finite-difference checks for every layer type and the full toy model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from tclnet import nn as tnn
from tclnet.lossy import LossyAutoencoder, LossyModelConfig, TCBlock, TransConv, TransConvConfig

LINEAR_TOL = 1e-5
NONLINEAR_TOL = 1e-4


@dataclass(frozen=True)
class GradCheckRow:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _leaf(shape, gen, scale=1.0):
    return (scale * torch.randn(*shape, generator=gen, dtype=torch.float64)).requires_grad_()


def _probe(out: torch.Tensor, gen) -> torch.Tensor:
    # fixed random projection so every output coordinate carries gradient
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    return w


def _module_check(module: torch.nn.Module, x: torch.Tensor, gen, max_coords: int | None) -> float:
    module = module.double()
    params = [p for p in module.parameters()]
    with torch.no_grad():
        for p in params:
            # lift zero-initialised tensors so their gradients are exercised
            if torch.count_nonzero(p) == 0:
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    w = _probe(module(x), gen)
    return tnn.grad_check(lambda: (module(x) * w).sum(), [x, *params], max_coords=max_coords)


def _cases(seed: int, full_coords: int) -> list[tuple[str, float, Callable[[], float]]]:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)

    def dense():
        x, w, b = _leaf((3, 5), gen), _leaf((4, 5), gen), _leaf((4,), gen)
        p = _probe(tnn.dense(x, w, b), gen)
        return tnn.grad_check(lambda: (tnn.dense(x, w, b) * p).sum(), [x, w, b])

    def conv():
        x, k, b = _leaf((2, 2, 5, 6), gen), _leaf((3, 2, 3, 3), gen), _leaf((3,), gen)
        p = _probe(tnn.conv2d(x, k, b), gen)
        return tnn.grad_check(lambda: (tnn.conv2d(x, k, b) * p).sum(), [x, k, b])

    def batch_norm():
        x, g, b = _leaf((4, 3, 2, 2), gen), _leaf((3,), gen), _leaf((3,), gen)
        rm, rv = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
        p = _probe(x, gen)
        # running stats are buffers: pass copies so repeated evaluations stay identical
        fn = lambda: (tnn.batch_norm(x, g, b, rm.clone(), rv.clone(), "train") * p).sum()
        return tnn.grad_check(fn, [x, g, b])

    def act(kind):
        def run():
            x = _leaf((4, 6), gen)
            p = _probe(x, gen)
            return tnn.grad_check(lambda: (tnn.activation(x, kind) * p).sum(), [x])
        return run

    def attention():
        q, k, v = _leaf((2, 2, 5, 4), gen), _leaf((2, 2, 5, 4), gen), _leaf((2, 2, 5, 4), gen)
        bias = _leaf((2, 5, 5), gen)
        p = _probe(q, gen)
        return tnn.grad_check(lambda: (tnn.attention_mix(q, k, v, bias=bias) * p).sum(), [q, k, v, bias])

    def causal_block():
        return _module_check(tnn.AttentionBlock(8, 2, 16, causal=True), _leaf((2, 5, 8), gen), gen, None)

    def window_block():
        cfg = tnn.AttentionConfig(window=2, heads=2, dim=4)
        return _module_check(tnn.WindowAttention2d(cfg), _leaf((1, 4, 3, 5), gen), gen, 40)

    def transconv():
        return _module_check(TransConv(TransConvConfig(r=4, window=2, heads=1)), _leaf((2, 2, 4, 4), gen), gen, 40)

    def tcblock():
        cfg = LossyModelConfig(n_a=8, n_t=8, r=4, window=2, heads=1, width=4)
        return _module_check(TCBlock(cfg), _leaf((2, 2, 8, 8), gen), gen, 12)

    def full_model():
        cfg = LossyModelConfig()
        model = LossyAutoencoder(cfg)
        return _module_check(model, _leaf((2, 2, cfg.n_a, cfg.n_t), gen, 0.3), gen, full_coords)

    return [
        ("dense", LINEAR_TOL, dense),
        ("conv2d", LINEAR_TOL, conv),
        ("batch_norm", NONLINEAR_TOL, batch_norm),
        ("relu", NONLINEAR_TOL, act("relu")),
        ("sigmoid", NONLINEAR_TOL, act("sigmoid")),
        ("gelu", NONLINEAR_TOL, act("gelu")),
        ("attention_mix", NONLINEAR_TOL, attention),
        ("causal_attention_block", NONLINEAR_TOL, causal_block),
        ("window_attention", NONLINEAR_TOL, window_block),
        ("transconv", NONLINEAR_TOL, transconv),
        ("tcblock", NONLINEAR_TOL, tcblock),
        ("lossy_autoencoder", NONLINEAR_TOL, full_model),
    ]


def run_grad_checks(seed: int = 0, full_coords: int = 4, only: list[str] | None = None) -> list[GradCheckRow]:
    """Run every check; ``full_coords`` coordinates are sampled per tensor of the full model."""
    rows = []
    for name, tol, fn in _cases(seed, full_coords):
        if only is None or name in only:
            rows.append(GradCheckRow(name, fn(), tol))
    return rows


def format_table(rows: list[GradCheckRow]) -> str:
    lines = [f"{'layer':<24} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in rows:
        lines.append(f"{r.name:<24} {r.max_rel_error:>12.3e} {r.tolerance:>8.0e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
