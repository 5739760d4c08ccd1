"""Differentiable building blocks on torch tensors.

Thin, explicit definitions so every op can be checked against finite
differences; modules in :mod:`caslayout.nn.modules` hold the parameters.
"""
from __future__ import annotations

import math

import torch

MASK_FILL = -1e9


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """y = x W^T + b with W of shape (out, in)."""
    _check(
        x.shape[-1] == weight.shape[-1],
        f"linear: input {tuple(x.shape)} does not match weight {tuple(weight.shape)}",
    )
    y = x @ weight.transpose(-1, -2)
    if bias is not None:
        _check(bias.shape == weight.shape[:1], f"linear: bias {tuple(bias.shape)} vs weight {tuple(weight.shape)}")
        y = y + bias
    return y


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        _check(gain.shape == x.shape[-1:], f"layer_norm: gain {tuple(gain.shape)} vs input {tuple(x.shape)}")
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Tanh-approximated GELU, 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))), as one fused kernel."""
    return torch.nn.functional.gelu(x, approximate="tanh")


def mlp(x: torch.Tensor, layers: list[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Stack of linear layers with GELU between them (none after the last)."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = gelu(x)
    return x


def embed(index: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise ValueError(f"embed: index out of range for table with {table.shape[0]} rows")
    return table[index]


def attention(
    q_src: torch.Tensor,
    kv_src: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    wo: torch.Tensor,
    bo: torch.Tensor | None,
    n_heads: int,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention.

    q_src: (B, Nq, Dq), kv_src: (B, Nk, Dk).  ``key_mask`` is boolean, True for
    usable keys, shaped (B, Nk) or (B, Nq, Nk).  Queries without any usable
    key get a zero update.
    """
    _check(q_src.dim() == 3 and kv_src.dim() == 3, "attention expects (batch, tokens, dim) inputs")
    _check(q_src.shape[0] == kv_src.shape[0], "attention: batch sizes differ")
    width = wq.shape[0]
    _check(width % n_heads == 0, f"attention: width {width} not divisible by {n_heads} heads")
    _check(wq.shape[1] == q_src.shape[-1], f"attention: query dim {q_src.shape[-1]} vs wq {tuple(wq.shape)}")
    _check(wk.shape[1] == kv_src.shape[-1], f"attention: key dim {kv_src.shape[-1]} vs wk {tuple(wk.shape)}")
    b, nq, _ = q_src.shape
    nk = kv_src.shape[1]
    if nk == 0:
        return q_src.new_zeros(b, nq, wo.shape[0])
    hd = width // n_heads
    q = linear(q_src, wq).view(b, nq, n_heads, hd).transpose(1, 2)
    k = linear(kv_src, wk).view(b, nk, n_heads, hd).transpose(1, 2)
    v = linear(kv_src, wv).view(b, nk, n_heads, hd).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    if key_mask is not None:
        if key_mask.dim() == 2:
            key_mask = key_mask[:, None, :].expand(b, nq, nk)
        _check(key_mask.shape == (b, nq, nk), f"attention: mask {tuple(key_mask.shape)} vs ({b}, {nq}, {nk})")
        scores = scores.masked_fill(~key_mask[:, None, :, :], MASK_FILL)
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(b, nq, width)
    out = linear(out, wo, bo)
    if key_mask is not None:
        out = out * key_mask.any(-1, keepdim=True).to(out.dtype)
    return out


def timestep_embedding(t: torch.Tensor | int, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features: first half sin(t * f_k), second half cos(t * f_k)."""
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, weight_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean categorical cross-entropy over positions where ``weight_mask`` is set."""
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target[..., None]).squeeze(-1)
    if weight_mask is None:
        return nll.mean()
    w = weight_mask.to(nll.dtype)
    return (nll * w).sum() / w.sum().clamp_min(1.0)


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) per element."""
    return 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar)
