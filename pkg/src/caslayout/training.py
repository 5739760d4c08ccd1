"""Corpus-level training: tensorize scenes, fit each cascade piece, assemble a CascadeModels."""
from __future__ import annotations

import logging
import time
from typing import Callable, Sequence

import torch

from .config import RunConfig, TrainConfig
from .generative.batch import FieldLayout, StageBatch, attach_graphs, stage_batch
from .generative.core import cotrain, train_stage, train_vae
from .generative.models import RelationVAE, StageDenoiser
from .generative.schedule import NoiseSchedule
from .nn.modules import init_parameters
from .pipeline import CascadeModels, build_stage, build_vae
from .relations import RelationGraph
from .scene import Scene, Vocabulary
from .sparse import ZoneTable, extract_sparse

log = logging.getLogger(__name__)


def check_corpus(scenes: Sequence[Scene], config: RunConfig) -> list[Scene]:
    scenes = list(scenes)
    if not scenes:
        raise ValueError("training corpus is empty")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"corpus item {i} is {type(s).__name__}, not a Scene")
        if s.n_max != config.n_max:
            raise ValueError(f"scene {i} has n_max {s.n_max}, config expects {config.n_max}")
        if tuple(s.floor.shape) != tuple(config.grid):
            raise ValueError(f"scene {i} floor grid {s.floor.shape} differs from config grid {tuple(config.grid)}")
        missing = [e.id for e in s.furniture if not e.placed or e.feature is None]
        if missing:
            raise ValueError(f"scene {i} has incomplete furniture {missing}")
    return scenes


def corpus_batch(scenes: Sequence[Scene], stage: int, layout: FieldLayout, vocab: Vocabulary,
                 graphs: Sequence[RelationGraph] | None = None, table: ZoneTable | None = None) -> StageBatch:
    """One big batch of the whole corpus with sparse graphs and decoder targets attached."""
    table = table or ZoneTable.default()
    graphs = list(graphs) if graphs is not None else [extract_sparse(s, table) for s in scenes]
    return attach_graphs(stage_batch(list(scenes), stage, layout, vocab), list(scenes), graphs, table=table)


def _deadline(seconds: float | None) -> float | None:
    return None if seconds is None else time.monotonic() + seconds


def _logger(name: str, every: int = 100) -> Callable:
    def fn(step, rec):
        if step % every == 0:
            log.info("%s step %d %s", name, step, {k: round(v, 4) for k, v in rec.items()})
    return fn


def fit_vae(scenes, config: RunConfig, vocab: Vocabulary, mode: str | None = None, seed: int | None = None,
            max_seconds: float | None = None, train: TrainConfig | None = None,
            graphs=None) -> RelationVAE:
    seed = config.seed if seed is None else seed
    vae = build_vae(config, vocab, mode)
    init_parameters(vae, seed)
    data = corpus_batch(scenes, 1, vae.layout, vocab, graphs)
    train_vae(vae, data, train or config.train, config.vae.kl_weight, seed, _logger("vae"), _deadline(max_seconds))
    return vae


def latent_scale(vae: RelationVAE, data: StageBatch) -> float:
    """Spread of the deterministic latents over real nodes; stage 3 works in these units."""
    with torch.no_grad():
        mu, _ = vae.encode(data)
    vals = mu[data.active]
    return float(vals.std()) if vals.numel() > 1 and float(vals.std()) > 1e-6 else 1.0


def fit_stage(stage: int, scenes, config: RunConfig, vocab: Vocabulary, vae: RelationVAE | None = None,
              seed: int | None = None, max_seconds: float | None = None,
              train: TrainConfig | None = None) -> StageDenoiser:
    seed = config.seed if seed is None else seed
    if stage >= 3 and vae is None:
        raise ValueError(f"stage {stage} needs a trained relation VAE")
    scale = 1.0
    if stage == 3:
        scale = latent_scale(vae, corpus_batch(scenes, 1, vae.layout, vocab))
    model = build_stage(stage, config, vocab, scale)
    init_parameters(model, seed + stage)
    data = corpus_batch(scenes, stage, model.layout, vocab)
    vae_in = vae.eval() if vae is not None else None
    train_stage(model, data, _schedule(config), train or config.train, seed + stage, vae_in,
                _logger(f"stage{stage}"), _deadline(max_seconds))
    return model


def _schedule(config: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(config.T)


def fit_cotrain(scenes, config: RunConfig, vocab: Vocabulary, vae: RelationVAE | None = None,
                seed: int | None = None, freeze_vae: bool = False, max_seconds: float | None = None,
                train: TrainConfig | None = None) -> tuple[RelationVAE, StageDenoiser]:
    """Joint training of the relation VAE and the placement stage (gradients flow through z)."""
    seed = config.seed if seed is None else seed
    if vae is None:
        if freeze_vae:
            raise ValueError("freeze_vae needs a pretrained VAE")
        vae = build_vae(config, vocab)
        init_parameters(vae, seed)
    stage4 = build_stage(4, config, vocab)
    init_parameters(stage4, seed + 4)
    data = corpus_batch(scenes, 4, stage4.layout, vocab)
    cotrain(vae, stage4, data, _schedule(config), train or config.train, config.vae.kl_weight, seed, freeze_vae,
            _logger("cotrain"), _deadline(max_seconds))
    return vae, stage4


def fit_cascade(scenes, config: RunConfig, vocab: Vocabulary | None = None, stages: Sequence[int] = (1, 2, 3, 4),
                max_seconds: float | None = None) -> CascadeModels:
    """Co-train VAE and stage 4, then fit stages 1 to 3 against the trained VAE.

    ``max_seconds`` is split evenly across the pieces being trained.
    """
    vocab = vocab or Vocabulary(config.vocabulary)
    scenes = check_corpus(scenes, config)
    pieces = len(stages) if 4 in stages else len(stages) + 1
    share = None if max_seconds is None else max_seconds / max(pieces, 1)
    if 4 in stages:
        vae, s4 = fit_cotrain(scenes, config, vocab, max_seconds=share)
        models = {4: s4}
    else:
        vae = fit_vae(scenes, config, vocab, max_seconds=share)
        models = {}
    for k in sorted(set(stages) - {4}):
        models[k] = fit_stage(k, scenes, config, vocab, vae if k == 3 else None, max_seconds=share)
    return CascadeModels(config, vocab, dict(sorted(models.items())), vae.eval())


__all__ = [
    "check_corpus",
    "corpus_batch",
    "fit_vae",
    "fit_stage",
    "fit_cotrain",
    "fit_cascade",
    "latent_scale",
]
