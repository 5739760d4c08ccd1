"""scikit-learn style wrappers: relation extraction, the relation VAE and the full cascade.

Inputs are lists of :class:`~caslayout.scene.Scene`; hyperparameters are plain
constructor arguments so ``get_params`` / ``set_params`` / ``clone`` work.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import pipeline
from .config import ModelConfig, RunConfig, TrainConfig, VaeConfig
from .generative.core import relation_accuracy, vae_decode
from .relations import CATEGORIES, SUBCATEGORIES, RelationEdge, RelationGraph, extract_dense
from .scene import Scene, Vocabulary
from .sparse import ZoneTable, extract_sparse
from .training import check_corpus, corpus_batch, fit_cascade, fit_vae


def check_scenes(X, name: str = "X") -> list[Scene]:
    """Validate a non-empty sequence of scenes sharing one slot count."""
    if isinstance(X, Scene):
        raise TypeError(f"{name} must be a sequence of scenes, got a single Scene")
    X = list(X)
    if not X:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(X):
        if not isinstance(s, Scene):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, not a Scene")
    if len({s.n_max for s in X}) != 1:
        raise ValueError(f"{name}: all scenes must share n_max")
    return X


def check_graphs(graphs, X: Sequence[Scene]) -> list[RelationGraph]:
    graphs = list(graphs)
    if len(graphs) != len(X):
        raise ValueError(f"got {len(graphs)} graphs for {len(X)} scenes")
    for i, g in enumerate(graphs):
        if not isinstance(g, RelationGraph):
            raise TypeError(f"graphs[{i}] is {type(g).__name__}, not a RelationGraph")
    return graphs


class RelationExtractor(TransformerMixin, BaseEstimator):
    """Scenes to relation graphs; stateless, so ``fit`` only validates."""

    def __init__(self, sparse: bool = True, zone_table: dict | None = None):
        self.sparse = sparse
        self.zone_table = zone_table

    def fit(self, X, y=None):
        check_scenes(X)
        self.table_ = ZoneTable.from_dict(self.zone_table) if self.zone_table else ZoneTable.default()
        return self

    def transform(self, X) -> list[RelationGraph]:
        check_is_fitted(self, "table_")
        X = check_scenes(X)
        if self.sparse:
            return [extract_sparse(s, self.table_) for s in X]
        return [extract_dense(s) for s in X]


def _run_config(est) -> RunConfig:
    return RunConfig(
        seed=est.random_state,
        n_max=est.n_max,
        T=getattr(est, "T", 100),
        model=ModelConfig(getattr(est, "d_model", 64), est.n_heads, getattr(est, "n_blocks", 3)),
        vae=VaeConfig(est.vae_d_model, est.n_heads, est.vae_blocks, est.vae_blocks, est.latent_dim,
                      est.kl_weight, getattr(est, "mode", "inout")),
        train=TrainConfig(steps=est.steps, batch_size=est.batch_size, lr=est.lr),
    )


class RelationVAEEstimator(TransformerMixin, BaseEstimator):
    """Relation graph autoencoder.

    ``fit(X, graphs=None)`` trains on the scenes' sparse graphs unless graphs
    are given; ``transform`` returns deterministic per-slot latents (B, N, d);
    ``predict`` decodes graphs back; ``score`` is relation reconstruction
    accuracy over candidate (pair, category) slots.
    """

    def __init__(self, mode: str = "inout", n_max: int = 16, vae_d_model: int = 64, n_heads: int = 4,
                 vae_blocks: int = 3, latent_dim: int = 32, kl_weight: float = 0.001, steps: int = 1500,
                 batch_size: int = 64, lr: float = 1e-3, max_seconds: float | None = None, random_state: int = 0):
        self.mode = mode
        self.n_max = n_max
        self.vae_d_model = vae_d_model
        self.n_heads = n_heads
        self.vae_blocks = vae_blocks
        self.latent_dim = latent_dim
        self.kl_weight = kl_weight
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.max_seconds = max_seconds
        self.random_state = random_state

    def _config(self) -> RunConfig:
        cfg = _run_config(self)
        return replace(cfg, train=replace(cfg.train, floorless_prob=0.0, completion_prob=0.0))

    def _batch(self, X, graphs=None):
        X = check_scenes(X)
        graphs = check_graphs(graphs, X) if graphs is not None else None
        return corpus_batch(X, 1, self.vae_.layout, self.vocab_, graphs)

    def fit(self, X, y=None, graphs=None):
        X = check_scenes(X)
        if X[0].n_max != self.n_max:
            raise ValueError(f"scenes have n_max {X[0].n_max}, estimator expects {self.n_max}")
        self.vocab_ = Vocabulary()
        graphs = check_graphs(graphs, X) if graphs is not None else None
        self.vae_ = fit_vae(X, self._config(), self.vocab_, self.mode, self.random_state, self.max_seconds,
                            graphs=graphs)
        return self

    def transform(self, X, graphs=None) -> np.ndarray:
        check_is_fitted(self, "vae_")
        batch = self._batch(X, graphs)
        with torch.no_grad():
            mu, _ = self.vae_.encode(batch)
        return mu.numpy()

    def predict(self, X, graphs=None) -> list[RelationGraph]:
        """Most likely relation per candidate slot, decoded from z = mu."""
        check_is_fitted(self, "vae_")
        X = check_scenes(X)
        batch = self._batch(X, graphs)
        with torch.no_grad():
            mu, _ = self.vae_.encode(batch)
            probs = vae_decode(self.vae_, mu, batch)
        out = []
        for b, scene in enumerate(X):
            edges = []
            for k, cat in enumerate(CATEGORIES):
                pred = probs[cat][b].argmax(-1)
                idx = torch.nonzero(batch.rel_mask[b, :, :, k] & (pred > 0)).tolist()
                for i, j in idx:
                    sub = SUBCATEGORIES[cat][int(pred[i, j]) - 1]
                    edges.append(RelationEdge(scene.elements[i].id, scene.elements[j].id, cat, sub))
            out.append(RelationGraph(tuple(e.id for e in scene.elements if not e.is_empty), tuple(edges)))
        return out

    def score(self, X, y=None, graphs=None) -> float:
        check_is_fitted(self, "vae_")
        correct, total = relation_accuracy(self.vae_, self._batch(X, graphs))
        return correct / total if total else 1.0


class CascadeLayoutModel(BaseEstimator):
    """The four-stage cascade with its relation VAE.

    ``fit`` co-trains the VAE with the placement stage, then fits the type,
    attribute and latent stages.  ``predict`` runs full generation on empty
    rooms; the other applications are exposed as methods.
    """

    def __init__(self, n_max: int = 16, T: int = 100, d_model: int = 64, n_heads: int = 4, n_blocks: int = 3,
                 vae_d_model: int = 64, vae_blocks: int = 3, latent_dim: int = 32, kl_weight: float = 0.001,
                 steps: int = 2000, batch_size: int = 64, lr: float = 1e-3, stages: tuple = (1, 2, 3, 4),
                 max_seconds: float | None = None, random_state: int = 0):
        self.n_max = n_max
        self.T = T
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.vae_d_model = vae_d_model
        self.vae_blocks = vae_blocks
        self.latent_dim = latent_dim
        self.kl_weight = kl_weight
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.stages = stages
        self.max_seconds = max_seconds
        self.random_state = random_state

    def fit(self, X, y=None):
        cfg = _run_config(self)
        X = check_corpus(check_scenes(X), cfg)
        self.models_ = fit_cascade(X, cfg, Vocabulary(), tuple(self.stages), self.max_seconds)
        return self

    @classmethod
    def from_models(cls, models: pipeline.CascadeModels) -> "CascadeLayoutModel":
        c = models.config
        est = cls(n_max=c.n_max, T=c.T, d_model=c.model.d_model, n_heads=c.model.n_heads, n_blocks=c.model.n_blocks,
                  vae_d_model=c.vae.d_model, vae_blocks=c.vae.n_enc, latent_dim=c.vae.latent_dim,
                  kl_weight=c.vae.kl_weight, steps=c.train.steps, batch_size=c.train.batch_size, lr=c.train.lr,
                  stages=tuple(sorted(models.stages)), random_state=c.seed)
        est.models_ = models
        return est

    def predict(self, X, rng=0) -> list[Scene]:
        check_is_fitted(self, "models_")
        return pipeline.generate_many(check_scenes(X), self.models_, rng)

    def rearrange(self, X, rng=0) -> list[Scene]:
        check_is_fitted(self, "models_")
        return pipeline.rearrange_many(check_scenes(X), self.models_, rng)

    def complete(self, X, rng=0) -> list[Scene]:
        check_is_fitted(self, "models_")
        return [pipeline.complete(s, self.models_, rng) for s in check_scenes(X)]

    def graph_conditioned(self, objects, graphs, rooms, rng=0) -> list[Scene]:
        check_is_fitted(self, "models_")
        rooms = check_scenes(rooms, "rooms")
        return pipeline.graph_conditioned_many(objects, check_graphs(graphs, rooms), rooms, self.models_, rng)
