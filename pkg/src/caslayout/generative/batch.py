"""Scenes to padded tensors: node vectors, masks, floor grids and relation targets."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from ..relations import ARCH_DISTANCE, CATEGORIES, SUBCATEGORIES, SYMMETRY, RelationGraph
from ..scene import FEATURE_DIM, LATENT_DIM, Scene, Vocabulary, encode_stage
from ..sparse import ZoneIndex, ZoneTable, assign_zones

FIELD_ORDER = ("c", "feat", "s", "t", "r", "rl")
EDGE_TYPES = tuple((c, s) for c in CATEGORIES for s in SUBCATEGORIES[c])
EDGE_TYPE_INDEX = {k: i for i, k in enumerate(EDGE_TYPES)}
N_CLASSES = tuple(len(SUBCATEGORIES[c]) + 1 for c in CATEGORIES)  # +1 for None
T_SCALE = 2.0


class FieldLayout:
    """Normalized flat node vector: one-hots at +-1, log sizes, half-scaled positions."""

    def __init__(self, vocab_size: int, latent_scale: float = 1.0, latent_dim: int = LATENT_DIM):
        self.dims = {"c": vocab_size, "feat": FEATURE_DIM, "s": 3, "t": 3, "r": 2, "rl": latent_dim}
        self.slices = {}
        start = 0
        for f in FIELD_ORDER:
            self.slices[f] = slice(start, start + self.dims[f])
            start += self.dims[f]
        self.D = start
        self.latent_scale = float(latent_scale)
        self.field_of_dim = torch.tensor([i for i, f in enumerate(FIELD_ORDER) for _ in range(self.dims[f])])

    def encode(self, f: str, v: np.ndarray) -> np.ndarray:
        if f in ("c", "feat"):
            return 2.0 * v - 1.0
        if f == "s":
            return np.log(v)
        if f == "t":
            return v / T_SCALE
        if f == "rl":
            return v / self.latent_scale
        return v

    def decode(self, f: str, v: np.ndarray) -> np.ndarray:
        if f in ("c", "feat"):
            return (v + 1.0) / 2.0
        if f == "s":
            return np.exp(np.clip(v, -5.0, 3.0))
        if f == "t":
            return v * T_SCALE
        if f == "rl":
            return v * self.latent_scale
        return v

    def expand(self, per_field: torch.Tensor) -> torch.Tensor:
        """(..., 6) field mask to (..., D) element mask."""
        return per_field[..., self.field_of_dim]


@dataclass
class StageBatch:
    stage: int
    x0: torch.Tensor  # (B, N, D) normalized truth where available, else 0
    known_f: torch.Tensor  # (B, N, 6) bool
    target_f: torch.Tensor  # (B, N, 6) bool
    active: torch.Tensor  # (B, N) bool
    kind: torch.Tensor  # (B, N) 0 empty, 1 architectural, 2 furniture
    floor: torch.Tensor  # (B, H, W)
    cls: torch.Tensor  # (B, N) vocabulary index
    edge_src: torch.Tensor | None = None  # (B, E)
    edge_dst: torch.Tensor | None = None
    edge_type: torch.Tensor | None = None
    edge_valid: torch.Tensor | None = None
    rel_target: torch.Tensor | None = None  # (B, N, N, K) class index, 0 = None
    rel_mask: torch.Tensor | None = None  # (B, N, N, K) candidate slots
    pe: torch.Tensor | None = None  # (B, N) slot embedding index; None means slot order

    def __len__(self):
        return self.x0.shape[0]

    def index(self, idx) -> "StageBatch":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v[idx] if isinstance(v, torch.Tensor) else v
        return StageBatch(**kw)

    def trim_edges(self) -> "StageBatch":
        """Drop trailing edge slots that are padding in every row (edges are packed from slot 0)."""
        if self.edge_valid is None or self.edge_valid.shape[1] == 0:
            return self
        keep = max(int(self.edge_valid.sum(1).max()), 1)
        if keep == self.edge_valid.shape[1] or bool(self.edge_valid[:, keep:].any()):
            return self
        return replace(self, edge_src=self.edge_src[:, :keep], edge_dst=self.edge_dst[:, :keep],
                       edge_type=self.edge_type[:, :keep], edge_valid=self.edge_valid[:, :keep])

    def pe_index(self) -> torch.Tensor:
        if self.pe is not None:
            return self.pe
        B, N = self.x0.shape[:2]
        return torch.arange(N).expand(B, N)

    def known(self, layout: FieldLayout) -> torch.Tensor:
        return layout.expand(self.known_f)

    def target(self, layout: FieldLayout) -> torch.Tensor:
        return layout.expand(self.target_f)

    def x_known(self, layout: FieldLayout) -> torch.Tensor:
        return torch.where(self.known(layout), self.x0, torch.zeros_like(self.x0))

    def arch_obb(self, layout: FieldLayout) -> torch.Tensor:
        """(B, N, 8) normalized (s, t, r) of architectural slots, zero elsewhere."""
        obb = torch.cat([self.x0[..., layout.slices[f]] for f in ("s", "t", "r")], -1)
        return obb * (self.kind == 1).unsqueeze(-1).to(obb.dtype)

    def flags(self) -> torch.Tensor:
        return torch.cat([self.known_f, self.target_f], -1).to(self.x0.dtype)


def _kind_code(kind: str) -> int:
    return {"empty": 0, "architectural": 1, "furniture": 2}[kind]


def _truth(e, f: str, vocab: Vocabulary, latent) -> np.ndarray | None:
    if f == "c":
        v = np.zeros(len(vocab))
        v[vocab.index(e.label)] = 1.0
        return v
    if f == "rl":
        return None if latent is None else np.asarray(latent, dtype=float)
    raw = {"s": e.size, "t": e.translation, "r": e.rotation, "feat": e.feature}[f]
    return None if raw is None else np.asarray(raw, dtype=float)


def stage_batch(
    scenes: Sequence[Scene],
    stage: int,
    layout: FieldLayout,
    vocab: Vocabulary,
    latents: Sequence[Mapping[str, np.ndarray]] | None = None,
    fixed: Sequence[Mapping[str, set]] | None = None,
) -> StageBatch:
    """Tensorize scenes for one stage; truth values are kept for training targets.

    Without ``latents``, stages 3 and 4 get zero relation latents as placeholders
    to be filled from the VAE during training.
    """
    B, N = len(scenes), scenes[0].n_max
    x0 = np.zeros((B, N, layout.D))
    known_f = np.zeros((B, N, len(FIELD_ORDER)), dtype=bool)
    target_f = np.zeros_like(known_f)
    active = np.zeros((B, N), dtype=bool)
    kind = np.zeros((B, N), dtype=np.int64)
    cls = np.zeros((B, N), dtype=np.int64)
    floors = []
    for b, scene in enumerate(scenes):
        if scene.n_max != N:
            raise ValueError("all scenes in a batch must share n_max")
        if latents is not None:
            lat = latents[b]
        elif stage >= 3:
            lat = {e.id: np.zeros(layout.dims["rl"]) for e in scene.elements if not e.is_empty}
        else:
            lat = {}
        gen = {k: {"rl": v} for k, v in lat.items()}
        vecs = encode_stage(scene, stage, gen, vocab, fixed[b] if fixed is not None else None)
        for i, (e, sv) in enumerate(zip(scene.elements, vecs)):
            active[b, i] = sv.active
            kind[b, i] = _kind_code(e.kind)
            cls[b, i] = vocab.index(e.label)
            for j, f in enumerate(FIELD_ORDER):
                known_f[b, i, j] = sv.known[f]
                target_f[b, i, j] = sv.target[f]
                val = _truth(e, f, vocab, lat.get(e.id))
                if val is not None:
                    x0[b, i, layout.slices[f]] = layout.encode(f, val)
        floors.append(scene.floor)
    return StageBatch(
        stage=stage,
        x0=torch.tensor(x0, dtype=torch.float32),
        known_f=torch.tensor(known_f),
        target_f=torch.tensor(target_f),
        active=torch.tensor(active),
        kind=torch.tensor(kind),
        floor=torch.tensor(np.stack(floors), dtype=torch.float32),
        cls=torch.tensor(cls),
    )


def candidate_slots(scene: Scene, table: ZoneTable | None = None) -> dict[tuple[str, str], list[str]]:
    """(src id, dst id) -> relation categories the decoder is trained to predict."""
    table = table or ZoneTable.default()
    furniture = [e for e in scene.furniture if e.placed]
    out: dict[tuple[str, str], list[str]] = {}
    if furniture:
        index = ZoneIndex.build(assign_zones(scene, table))
        for a in furniture:
            for b in furniture:
                if a.id == b.id:
                    continue
                cats = [c for c in CATEGORIES if c != ARCH_DISTANCE and index.admits(a.id, b.id, c)]
                cats = [c for c in cats if c != SYMMETRY or a.id < b.id]
                if cats:
                    out[(a.id, b.id)] = cats
    for a in scene.furniture:
        for w in scene.architecture:
            out[(a.id, w.id)] = [ARCH_DISTANCE]
    return out


def attach_graphs(
    batch: StageBatch,
    scenes: Sequence[Scene],
    graphs: Sequence[RelationGraph],
    with_targets: bool = True,
    table: ZoneTable | None = None,
    max_edges: int | None = None,
) -> StageBatch:
    """Add edge tokens (and decoder targets) to a batch."""
    B, N = len(scenes), scenes[0].n_max
    K = len(CATEGORIES)
    slot_lists = [{e.id: i for i, e in enumerate(s.elements) if not e.is_empty} for s in scenes]
    E = max_edges or max([len(g.edges) for g in graphs] + [1])
    src = np.zeros((B, E), dtype=np.int64)
    dst = np.zeros((B, E), dtype=np.int64)
    etype = np.zeros((B, E), dtype=np.int64)
    valid = np.zeros((B, E), dtype=bool)
    for b, g in enumerate(graphs):
        slots = slot_lists[b]
        if len(g.edges) > E:
            raise ValueError(f"graph has {len(g.edges)} edges, more than the {E} edge slots")
        for k, e in enumerate(g.edges):
            if e.src not in slots or e.dst not in slots:
                raise ValueError(f"edge {e.src}->{e.dst} references an element missing from the scene")
            src[b, k], dst[b, k] = slots[e.src], slots[e.dst]
            etype[b, k] = EDGE_TYPE_INDEX[(e.category, e.subcategory)]
            valid[b, k] = True
    out = replace(
        batch,
        edge_src=torch.tensor(src),
        edge_dst=torch.tensor(dst),
        edge_type=torch.tensor(etype),
        edge_valid=torch.tensor(valid),
    )
    if not with_targets:
        return out
    target = np.zeros((B, N, N, K), dtype=np.int64)
    mask = np.zeros((B, N, N, K), dtype=bool)
    for b, (scene, g) in enumerate(zip(scenes, graphs)):
        slots = slot_lists[b]
        look = g.lookup()
        for (a, c), cats in candidate_slots(scene, table).items():
            i, j = slots[a], slots[c]
            for cat in cats:
                k = CATEGORIES.index(cat)
                mask[b, i, j, k] = True
                sub = look.get((a, c, cat))
                target[b, i, j, k] = 0 if sub is None else SUBCATEGORIES[cat].index(sub) + 1
    return replace(out, rel_target=torch.tensor(target), rel_mask=torch.tensor(mask))


# --------------------------------------------------------------------------- tensor augmentation

_QUARTER = [((1, 0), (0, 1)), ((0, -1), (1, 0)), ((-1, 0), (0, -1)), ((0, 1), (-1, 0))]


def _rotate_xy(v: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Rotate the leading two components of (B, N, d) by k[b] quarter turns."""
    mats = torch.tensor(_QUARTER, dtype=v.dtype)[k]  # (B, 2, 2)
    xy = torch.einsum("bij,bnj->bni", mats, v[..., :2])
    return torch.cat([xy, v[..., 2:]], -1)


def rotate_batch(batch: StageBatch, layout: FieldLayout, k: torch.Tensor) -> StageBatch:
    x0 = batch.x0.clone()
    for f in ("t", "r"):
        sl = layout.slices[f]
        x0[..., sl] = _rotate_xy(x0[..., sl], k)
    floor = torch.stack([torch.rot90(fl, -int(kk), dims=(0, 1)) for fl, kk in zip(batch.floor, k)])
    return replace(batch, x0=x0, floor=floor)


def permute_batch(batch: StageBatch, perm: torch.Tensor) -> StageBatch:
    """Reorder slots per scene; perm[b, i] is the old slot placed at new slot i."""
    def g(v):
        if v is None:
            return None
        idx = perm.reshape(perm.shape + (1,) * (v.dim() - 2)).expand(perm.shape + v.shape[2:])
        return torch.gather(v, 1, idx)

    out = replace(
        batch,
        x0=g(batch.x0),
        known_f=g(batch.known_f),
        target_f=g(batch.target_f),
        active=g(batch.active),
        kind=g(batch.kind),
        cls=g(batch.cls),
        pe=g(batch.pe),
    )
    if batch.edge_src is not None:
        inv = torch.argsort(perm, dim=1)
        out = replace(out, edge_src=torch.gather(inv, 1, batch.edge_src), edge_dst=torch.gather(inv, 1, batch.edge_dst))
    if batch.rel_target is not None:
        B, N = perm.shape
        bi = torch.arange(B)[:, None, None]
        rows, cols = perm[:, :, None].expand(B, N, N), perm[:, None, :].expand(B, N, N)
        out = replace(out, rel_target=batch.rel_target[bi, rows, cols], rel_mask=batch.rel_mask[bi, rows, cols])
    return out


def completion_mask(batch: StageBatch, chosen: torch.Tensor) -> StageBatch:
    """Mark chosen (B, N) furniture slots as conditioned ground truth."""
    chosen = chosen & (batch.kind == 2)
    c = chosen.unsqueeze(-1)
    known_f = batch.known_f | (c & batch.target_f)
    target_f = batch.target_f & ~c
    return replace(batch, known_f=known_f, target_f=target_f)


def drop_architecture(batch: StageBatch, layout: FieldLayout, which: torch.Tensor) -> StageBatch:
    """Floor-plan-free variant for scenes flagged in ``which`` (B,): arch slots become empty."""
    arch = (batch.kind == 1) & which[:, None]
    if not bool(arch.any()):
        return batch
    x0 = batch.x0.clone()
    a3 = arch.unsqueeze(-1)
    x0 = torch.where(a3, torch.zeros_like(x0), x0)
    c = x0[..., layout.slices["c"]]
    none_hot = torch.full_like(c, -1.0)
    none_hot[..., 0] = 1.0
    x0[..., layout.slices["c"]] = torch.where(a3, none_hot, c)
    stage1 = batch.stage == 1
    known_f = batch.known_f & ~a3
    target_f = batch.target_f & ~a3
    if stage1:
        target_f = target_f.clone()
        target_f[..., 0] |= arch
    floor = torch.where(which[:, None, None], torch.ones_like(batch.floor), batch.floor)
    out = replace(
        batch,
        x0=x0,
        known_f=known_f,
        target_f=target_f,
        active=batch.active if stage1 else batch.active & ~arch,
        kind=torch.where(arch, torch.zeros_like(batch.kind), batch.kind),
        cls=torch.where(arch, torch.zeros_like(batch.cls), batch.cls),
        floor=floor,
    )
    if batch.edge_src is not None:
        dead = torch.gather(arch, 1, batch.edge_src) | torch.gather(arch, 1, batch.edge_dst)
        out = replace(out, edge_valid=batch.edge_valid & ~dead)
    if batch.rel_mask is not None:
        live = ~arch
        pair = live[:, :, None] & live[:, None, :]
        out = replace(out, rel_mask=batch.rel_mask & pair.unsqueeze(-1))
    return out
