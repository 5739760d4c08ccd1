"""Named parameter store with a decoupled-weight-decay Adam update."""
from __future__ import annotations

import math
from typing import Mapping

import torch
from torch import nn


class ParamStore:
    """Named parameters plus per-parameter first/second moments.

    Iteration order follows ``named_parameters`` of the wrapped modules, so it
    is deterministic for a fixed model definition.
    """

    def __init__(self, params: Mapping[str, torch.Tensor] | nn.Module, seed: int = 0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if isinstance(params, nn.Module):
            params = dict(params.named_parameters())
        self.params = dict(params)
        self.seed = seed
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}

    def state(self) -> dict[str, torch.Tensor]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        out["adam.step"] = torch.tensor([self.step_count], dtype=torch.int64)
        return out

    def load_state(self, state: Mapping[str, torch.Tensor]) -> None:
        for k in self.params:
            self.m[k] = state[f"adam.m.{k}"].clone()
            self.v[k] = state[f"adam.v.{k}"].clone()
        self.step_count = int(state["adam.step"][0])


def adamw_step(store: ParamStore, grads: Mapping[str, torch.Tensor] | None, lr: float,
               weight_decay: float = 0.0) -> ParamStore:
    """One AdamW update in place; raises on non-finite gradients before touching anything."""
    grads = store.grads() if grads is None else grads
    missing = set(store.params) - set(grads)
    if missing:
        raise KeyError(f"missing gradients for {sorted(missing)}")
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    store.step_count += 1
    b1, b2 = store.betas
    t = store.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads[name]
            p.mul_(1.0 - lr * weight_decay)
            store.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            store.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (store.v[name] / c2).sqrt_().add_(store.eps)
            p.addcdiv_(store.m[name], denom, value=-lr / c1)
    return store


def decayed_lr(lr: float, step: int, decay: float, steps_per_epoch: int) -> float:
    """Learning rate shrunk by ``decay`` (fractional) once per epoch."""
    return lr * math.pow(1.0 - decay, step // steps_per_epoch)
