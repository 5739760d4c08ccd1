from __future__ import annotations

import torch
from torch import nn

from . import functional as F

INIT_STD = 0.02


def trunc_normal_(t: torch.Tensor, std: float = INIT_STD, generator: torch.Generator | None = None) -> torch.Tensor:
    with torch.no_grad():
        return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return F.layer_norm(x, self.gain, self.bias)


class MLP(nn.Module):
    def __init__(self, dims: list[int]):
        super().__init__()
        self.layers = nn.ModuleList(Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        return F.mlp(x, [(l.weight, l.bias) for l in self.layers])


class Embedding(nn.Module):
    def __init__(self, n: int, d: int):
        super().__init__()
        self.table = nn.Parameter(torch.empty(n, d))

    def forward(self, idx):
        return F.embed(idx, self.table)


class Attention(nn.Module):
    """Multi-head attention; self-attention when called with kv = q."""

    def __init__(self, d_model: int, n_heads: int, d_kv: int | None = None):
        super().__init__()
        d_kv = d_kv or d_model
        self.n_heads = n_heads
        self.wq = nn.Parameter(torch.empty(d_model, d_model))
        self.wk = nn.Parameter(torch.empty(d_model, d_kv))
        self.wv = nn.Parameter(torch.empty(d_model, d_kv))
        self.wo = nn.Parameter(torch.empty(d_model, d_model))
        self.bo = nn.Parameter(torch.zeros(d_model))

    def forward(self, q, kv, key_mask=None):
        return F.attention(q, kv, self.wq, self.wk, self.wv, self.wo, self.bo, self.n_heads, key_mask)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Truncated normal weights, zero biases, unit gains; deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        with torch.no_grad():
            if leaf in ("bias", "bo"):
                p.zero_()
            elif leaf == "gain":
                p.fill_(1.0)
            elif leaf == "table":
                p.normal_(0.0, INIT_STD, generator=gen)
            else:
                trunc_normal_(p, generator=gen)


class TransformerBlock(nn.Module):
    """Pre-norm block: self-attention, then one cross-attention per context, then an MLP."""

    def __init__(self, d_model: int, n_heads: int, contexts: dict[str, int]):
        super().__init__()
        self.norm_self = LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.context_names = list(contexts)
        self.norms = nn.ModuleDict({k: LayerNorm(d_model) for k in contexts})
        self.cross = nn.ModuleDict({k: Attention(d_model, n_heads, d) for k, d in contexts.items()})
        self.norm_mlp = LayerNorm(d_model)
        self.mlp = MLP([d_model, 2 * d_model, d_model])

    def forward(self, x, token_mask=None, contexts=None):
        contexts = contexts or {}
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, token_mask)
        for name in self.context_names:
            kv, mask = contexts[name]
            x = x + self.cross[name](self.norms[name](x), kv, mask)
        return x + self.mlp(self.norm_mlp(x))
