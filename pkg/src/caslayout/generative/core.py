"""Losses, samplers and training loops for the stage denoisers and the relation VAE."""
from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import torch

from ..config import TrainConfig
from ..nn import functional as F
from ..nn.optim import ParamStore, adamw_step, decayed_lr
from ..relations import CATEGORIES
from .batch import FieldLayout, StageBatch, completion_mask, drop_architecture, permute_batch, rotate_batch
from .models import RelationVAE, StageDenoiser
from .schedule import NoiseSchedule, ddpm_loop, q_sample


def _finite(loss: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"{what} is not finite")
    return loss


def with_latent(batch: StageBatch, layout: FieldLayout, z: torch.Tensor) -> StageBatch:
    """Write node latents (already in normalized units) into the rl slice of x0."""
    x0 = batch.x0.clone()
    x0[..., layout.slices["rl"]] = z * batch.active.unsqueeze(-1).to(z.dtype)
    return replace(batch, x0=x0)


def model_input(batch: StageBatch, layout: FieldLayout, xt: torch.Tensor) -> torch.Tensor:
    """Noisy targets, known values elsewhere, zeros for unknown fields."""
    return torch.where(batch.target(layout), xt, batch.x_known(layout))


# --------------------------------------------------------------------------- diffusion losses


def eps_loss(model: StageDenoiser, batch: StageBatch, schedule: NoiseSchedule, generator: torch.Generator,
             latent: torch.Tensor | None = None, t: torch.Tensor | None = None,
             eps: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean squared noise error over target entries; also returns the auxiliary OBB output."""
    layout = model.layout
    if latent is not None:
        batch = with_latent(batch, layout, latent)
    B = len(batch)
    if t is None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(batch.x0.shape, generator=generator)
    target = batch.target(layout)
    xt = q_sample(schedule, batch.x0, t, eps, target)
    eps_hat, aux = model(model_input(batch, layout, xt), batch, t, latent)
    w = target.to(eps.dtype)
    loss = ((eps_hat - eps) ** 2 * w).sum() / w.sum().clamp_min(1.0)
    return _finite(loss, "noise loss"), aux


def recon_loss(aux: torch.Tensor, batch: StageBatch, layout: FieldLayout) -> torch.Tensor:
    """(1/m) sum ||B_i - B_hat_i||^2 over architectural slots, averaged over scenes; 0 when m = 0."""
    arch = (batch.kind == 1).to(aux.dtype)
    m = arch.sum(1)
    per = (((aux - batch.arch_obb(layout)) ** 2).sum(-1) * arch).sum(1)
    per = torch.where(m > 0, per / m.clamp_min(1.0), torch.zeros_like(per))
    return per.mean()


@torch.no_grad()
def ddpm_sample(model: StageDenoiser, batch: StageBatch, schedule: NoiseSchedule, generator: torch.Generator,
                latent: torch.Tensor | None = None, guide: Callable | None = None) -> torch.Tensor:
    """Reverse-diffuse the batch's target fields; every other entry is returned bit-equal."""
    layout = model.layout
    if latent is not None:
        batch = with_latent(batch, layout, latent)
    target = batch.target(layout)
    x_known = batch.x_known(layout)

    def eps_fn(x, t):
        return model(x, batch, torch.full((len(batch),), t), latent)[0]

    return ddpm_loop(eps_fn, schedule, x_known, target, generator, guide)


# --------------------------------------------------------------------------- VAE


def vae_encode(vae: RelationVAE, batch: StageBatch, generator: torch.Generator | None = None,
               sample: bool = True) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(mu, logvar, z); z = mu when ``sample`` is off."""
    mu, logvar = vae.encode(batch)
    if not sample:
        return mu, logvar, mu
    noise = torch.randn(mu.shape, generator=generator)
    return mu, logvar, mu + torch.exp(0.5 * logvar) * noise


def vae_decode(vae: RelationVAE, z: torch.Tensor, batch: StageBatch) -> dict[str, torch.Tensor]:
    """Per-category subcategory distributions (index 0 = None) for every ordered pair."""
    return {c: torch.softmax(v, -1) for c, v in vae.decode(z, batch).items()}


def candidate_pairs(batch: StageBatch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Index triples (b, i, j) of ordered pairs with at least one candidate category."""
    return torch.nonzero(batch.rel_mask.any(-1), as_tuple=True)


def relation_ce(vae: RelationVAE, z: torch.Tensor, batch: StageBatch) -> torch.Tensor:
    """Mean cross-entropy over all candidate (pair, category) slots."""
    pairs = candidate_pairs(batch)
    if pairs[0].numel() == 0:
        return z.sum() * 0.0
    logits = vae.decode(z, batch, pairs)
    mask = batch.rel_mask[pairs]
    target = batch.rel_target[pairs]
    total = 0.0
    for k, c in enumerate(CATEGORIES):
        nll = -torch.log_softmax(logits[c], -1).gather(-1, target[:, k : k + 1]).squeeze(-1)
        total = total + (nll * mask[:, k]).sum()
    return total / mask.sum()


def kl_term(mu: torch.Tensor, logvar: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    per_node = F.gaussian_kl(mu, logvar).sum(-1)
    a = active.to(per_node.dtype)
    return (per_node * a).sum() / a.sum().clamp_min(1.0)


def vae_loss(vae: RelationVAE, batch: StageBatch, generator: torch.Generator | None = None,
             kl_weight: float = 0.001, sample: bool = True) -> dict[str, torch.Tensor]:
    mu, logvar, z = vae_encode(vae, batch, generator, sample)
    ce = relation_ce(vae, z, batch)
    kl = kl_term(mu, logvar, batch.active)
    total = _finite(ce + kl_weight * kl, "VAE loss")
    return {"total": total, "ce": ce, "kl": kl, "z": z, "mu": mu}


@torch.no_grad()
def relation_accuracy(vae: RelationVAE, batch: StageBatch) -> tuple[int, int]:
    """Correct and total candidate (pair, category) slots under deterministic encoding."""
    mu, _ = vae.encode(batch)
    pairs = candidate_pairs(batch)
    logits = vae.decode(mu, batch, pairs)
    mask, target = batch.rel_mask[pairs], batch.rel_target[pairs]
    correct = total = 0
    for k, c in enumerate(CATEGORIES):
        pred = logits[c].argmax(-1)
        correct += int(((pred == target[:, k]) & mask[:, k]).sum())
        total += int(mask[:, k].sum())
    return correct, total


def cotrain_loss(vae: RelationVAE, stage4: StageDenoiser, batch: StageBatch, schedule: NoiseSchedule,
                 generator: torch.Generator, kl_weight: float = 0.001, freeze_vae: bool = False) -> dict:
    """VAE loss plus stage-4 noise and reconstruction losses, weighted 1:1.

    The stage-4 denoiser is conditioned on the sampled latents, so its error
    reaches the VAE encoder unless ``freeze_vae`` is set.
    """
    if freeze_vae:
        with torch.no_grad():
            mu, logvar, z = vae_encode(vae, batch, generator, sample=False)
            parts = {"ce": relation_ce(vae, z, batch), "kl": kl_term(mu, logvar, batch.active)}
        parts["vae"] = parts["ce"] + kl_weight * parts["kl"]
    else:
        v = vae_loss(vae, batch, generator, kl_weight)
        z = v["z"]
        parts = {"ce": v["ce"], "kl": v["kl"], "vae": v["total"]}
    eps, aux = eps_loss(stage4, batch, schedule, generator, latent=z)
    rec = recon_loss(aux, batch, stage4.layout)
    parts.update(eps=eps, recon=rec, diffusion=eps + rec)
    parts["total"] = (parts["diffusion"] if freeze_vae else parts["vae"] + parts["diffusion"])
    return parts


# --------------------------------------------------------------------------- training


def augment_batch(batch: StageBatch, layout: FieldLayout, cfg: TrainConfig, generator: torch.Generator) -> StageBatch:
    B, N = batch.x0.shape[:2]
    if cfg.floorless_prob:
        batch = drop_architecture(batch, layout, torch.rand(B, generator=generator) < cfg.floorless_prob)
    if cfg.rotate:
        batch = rotate_batch(batch, layout, torch.randint(0, 4, (B,), generator=generator))
    if cfg.permute:
        perm = torch.argsort(torch.rand(B, N, generator=generator), dim=1)
        batch = permute_batch(batch, perm)
    if cfg.completion_prob:
        use = torch.rand(B, 1, generator=generator) < cfg.completion_prob
        keep = torch.rand(B, N, generator=generator) < torch.rand(B, 1, generator=generator)
        batch = completion_mask(batch, use & keep)
    return batch


class Optimizer:
    """ParamStore plus the epoch-wise learning-rate decay and gradient clipping."""

    def __init__(self, module: torch.nn.Module, cfg: TrainConfig, seed: int = 0):
        self.store = ParamStore(module, seed=seed)
        self.cfg = cfg
        self.step = 0
        self.shadow = ({k: p.detach().clone() for k, p in self.store.params.items()} if cfg.ema else None)

    def update(self) -> float:
        cfg = self.cfg
        params = list(self.store.params.values())
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        lr = decayed_lr(cfg.lr, self.step, cfg.lr_decay, cfg.steps_per_epoch)
        adamw_step(self.store, None, lr, cfg.weight_decay)
        self.store.zero_grad()
        self.step += 1
        if self.shadow is not None:
            with torch.no_grad():
                for k, p in self.store.params.items():
                    self.shadow[k].lerp_(p, 1.0 - cfg.ema)
        return lr

    def finish(self) -> None:
        """Swap the averaged weights into the module (no-op without EMA)."""
        if self.shadow is None:
            return
        with torch.no_grad():
            for k, p in self.store.params.items():
                p.copy_(self.shadow[k])


def _batches(n: int, cfg: TrainConfig, generator: torch.Generator):
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.steps):
        yield torch.randint(0, n, (bs,), generator=generator)


def train_stage(model: StageDenoiser, data: StageBatch, schedule: NoiseSchedule, cfg: TrainConfig, seed: int = 0,
                vae: RelationVAE | None = None, log: Callable | None = None,
                deadline: float | None = None) -> list[float]:
    """Fit one stage denoiser; stages 3 and 4 draw their latents from a frozen ``vae``."""
    gen = torch.Generator().manual_seed(seed)
    opt = Optimizer(model, cfg, seed)
    layout = model.layout
    history = []
    for step, idx in enumerate(_batches(len(data), cfg, gen)):
        batch = augment_batch(data.index(idx).trim_edges(), layout, cfg, gen)
        latent = None
        if model.stage >= 3:
            if vae is None:
                raise ValueError(f"stage {model.stage} training needs a relation VAE")
            with torch.no_grad():
                mu, _ = vae.encode(batch)
            latent = mu / layout.latent_scale
            if model.stage == 3:
                batch = with_latent(batch, layout, latent)
                latent = None
        eps, aux = eps_loss(model, batch, schedule, gen, latent=latent)
        loss = eps + recon_loss(aux, batch, layout)
        loss.backward()
        opt.update()
        history.append(float(loss.detach()))
        if log is not None:
            log(step, {"loss": history[-1]})
        if deadline is not None and time.monotonic() > deadline:
            break
    opt.finish()
    return history


def train_vae(vae: RelationVAE, data: StageBatch, cfg: TrainConfig, kl_weight: float = 0.001, seed: int = 0,
              log: Callable | None = None, deadline: float | None = None) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    opt = Optimizer(vae, cfg, seed)
    vcfg = replace(cfg, completion_prob=0.0)
    history = []
    for step, idx in enumerate(_batches(len(data), cfg, gen)):
        batch = augment_batch(data.index(idx).trim_edges(), vae.layout, vcfg, gen)
        parts = vae_loss(vae, batch, gen, kl_weight)
        parts["total"].backward()
        opt.update()
        history.append(float(parts["total"].detach()))
        if log is not None:
            log(step, {k: float(parts[k].detach()) for k in ("total", "ce", "kl")})
        if deadline is not None and time.monotonic() > deadline:
            break
    opt.finish()
    return history


def cotrain(vae: RelationVAE, stage4: StageDenoiser, data: StageBatch, schedule: NoiseSchedule, cfg: TrainConfig,
            kl_weight: float = 0.001, seed: int = 0, freeze_vae: bool = False,
            log: Callable | None = None, deadline: float | None = None) -> list[dict]:
    gen = torch.Generator().manual_seed(seed)
    opt_d = Optimizer(stage4, cfg, seed)
    opt_v = None if freeze_vae else Optimizer(vae, cfg, seed + 1)
    history = []
    for step, idx in enumerate(_batches(len(data), cfg, gen)):
        batch = augment_batch(data.index(idx).trim_edges(), stage4.layout, cfg, gen)
        parts = cotrain_loss(vae, stage4, batch, schedule, gen, kl_weight, freeze_vae)
        parts["total"].backward()
        opt_d.update()
        if opt_v is not None:
            opt_v.update()
        rec = {k: float(v.detach()) for k, v in parts.items() if k not in ("z", "mu")}
        history.append(rec)
        if log is not None:
            log(step, rec)
        if deadline is not None and time.monotonic() > deadline:
            break
    opt_d.finish()
    if opt_v is not None:
        opt_v.finish()
    return history
