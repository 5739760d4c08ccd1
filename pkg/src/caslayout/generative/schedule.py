"""Forward noising table and the ancestral reverse loop."""
from __future__ import annotations

from typing import Callable

import torch


class NoiseSchedule:
    """Linear-beta DDPM schedule with gamma(t) the cumulative signal retention.

    gamma[0] = 1 (clean data) and gamma[t] = prod_{k<=t} (1 - beta_k) for t = 1..T.
    Betas are stretched by 1000 / T so short schedules still end near pure noise.
    """

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ValueError("T must be positive")
        self.T = int(T)
        scale = 1000.0 / T
        betas = torch.linspace(beta_start * scale, beta_end * scale, T, dtype=torch.float64).clamp(max=0.999)
        self.betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
        self.alphas = 1.0 - self.betas
        self.gamma = torch.cumprod(self.alphas, 0)
        g_prev = torch.cat([torch.ones(1, dtype=torch.float64), self.gamma[:-1]])
        # posterior q(x_{t-1} | x_t, x_0) variance; zero at t = 1
        self.posterior_var = torch.zeros_like(self.gamma)
        self.posterior_var[1:] = self.betas[1:] * (1.0 - g_prev[1:]) / (1.0 - self.gamma[1:])

    def to_dict(self) -> dict:
        return {"T": self.T}

    def check_t(self, t: torch.Tensor) -> None:
        if int(t.min()) < 0 or int(t.max()) > self.T:
            raise ValueError(f"timestep out of range [0, {self.T}]")


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim())).to(like.dtype)


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor,
             target: torch.Tensor | None = None) -> torch.Tensor:
    """sqrt(g) x0 + sqrt(1 - g) eps on target entries; other entries pass through untouched."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} differs from x0 {tuple(x0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    schedule.check_t(t)
    if t.dim() == 0:
        t = t.expand(x0.shape[0]) if x0.dim() else t
    g = _bcast(schedule.gamma[t], x0)
    xt = g.sqrt() * x0 + (1.0 - g).sqrt() * eps
    if target is None:
        return xt
    return torch.where(target, xt, x0)


def reverse_step(schedule: NoiseSchedule, xt: torch.Tensor, t: int, eps_hat: torch.Tensor,
                 noise: torch.Tensor | None) -> torch.Tensor:
    beta = float(schedule.betas[t])
    alpha = float(schedule.alphas[t])
    g = float(schedule.gamma[t])
    mean = (xt - beta / (1.0 - g) ** 0.5 * eps_hat) / alpha**0.5
    if t > 1 and noise is not None:
        mean = mean + float(schedule.posterior_var[t]) ** 0.5 * noise
    return mean


def ddpm_loop(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    schedule: NoiseSchedule,
    x_known: torch.Tensor,
    target: torch.Tensor,
    generator: torch.Generator,
    guide: Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Ancestral sampling t = T..1 with epsilon prediction.

    Entries outside ``target`` are held at ``x_known`` throughout.  ``guide`` may
    return an additive shift for x_t given (x_t, t, eps_hat).
    """
    x = torch.where(target, torch.randn(x_known.shape, generator=generator, dtype=x_known.dtype), x_known)
    for t in range(schedule.T, 0, -1):
        with torch.no_grad():
            eps_hat = eps_fn(x, t)
        if guide is not None:
            x = torch.where(target, x + guide(x, t, eps_hat), x_known)
            with torch.no_grad():
                eps_hat = eps_fn(x, t)
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype) if t > 1 else None
        x = torch.where(target, reverse_step(schedule, x, t, eps_hat, noise), x_known)
    return x
