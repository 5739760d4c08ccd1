"""Stage denoisers and the bidirectional relation VAE."""
from __future__ import annotations

import torch
from torch import nn

from ..nn import functional as F
from ..nn.modules import MLP, Attention, Embedding, LayerNorm, Linear, TransformerBlock
from ..relations import CATEGORIES, SYMMETRY
from .batch import EDGE_TYPES, FIELD_ORDER, N_CLASSES, FieldLayout, StageBatch

PATCH = 8


class FloorEncoder(nn.Module):
    """Binary grid to non-overlapping PATCH x PATCH tokens with learned positions."""

    def __init__(self, d: int, grid: tuple[int, int]):
        super().__init__()
        h, w = grid
        if h % PATCH or w % PATCH:
            raise ValueError(f"floor grid {grid} must be a multiple of {PATCH}")
        self.grid = grid
        self.proj = Linear(PATCH * PATCH, d)
        self.pos = Embedding((h // PATCH) * (w // PATCH), d)

    def forward(self, floor: torch.Tensor) -> torch.Tensor:
        b, h, w = floor.shape
        if (h, w) != tuple(self.grid):
            raise ValueError(f"floor grid {(h, w)} does not match the model's {tuple(self.grid)}")
        p = floor.reshape(b, h // PATCH, PATCH, w // PATCH, PATCH).permute(0, 1, 3, 2, 4)
        p = p.reshape(b, -1, PATCH * PATCH)
        return self.proj(p) + self.pos.table[None]


class StageDenoiser(nn.Module):
    """Noise predictor for one stage of the cascade.

    Category one-hots, spatial fields (s, t, r), feature embeddings and relation
    latents are embedded by separate linear encoders and summed with the slot's
    pe embedding, its known/target flags and the timestep embedding.  Stage 4
    blocks cross-attend to relation latents before the floor tokens.
    """

    def __init__(self, stage: int, layout: FieldLayout, n_max: int = 16, d_model: int = 128, n_heads: int = 4,
                 n_blocks: int = 5, grid: tuple[int, int] = (64, 64)):
        super().__init__()
        self.stage = stage
        self.layout = layout
        self.d_model = d_model
        d = d_model
        dims = layout.dims
        self.enc_c = Linear(dims["c"], d)
        self.enc_spatial = Linear(dims["s"] + dims["t"] + dims["r"], d)
        self.enc_feat = Linear(dims["feat"], d)
        self.enc_rl = Linear(dims["rl"], d)
        self.enc_flags = Linear(2 * len(FIELD_ORDER), d)
        self.pe = Embedding(n_max, d)
        self.time = MLP([d, d, d])
        self.floor = FloorEncoder(d, grid)
        contexts = {"latent": d, "floor": d} if stage == 4 else {"floor": d}
        if stage == 4:
            self.enc_latent = Linear(dims["rl"], d)
        self.blocks = nn.ModuleList(TransformerBlock(d, n_heads, contexts) for _ in range(n_blocks))
        self.norm_out = LayerNorm(d)
        self.eps_head = Linear(d, layout.D)
        self.aux_head = Linear(d, 8)

    def tokens(self, x: torch.Tensor, batch: StageBatch, t: torch.Tensor) -> torch.Tensor:
        sl = self.layout.slices
        spatial = torch.cat([x[..., sl["s"]], x[..., sl["t"]], x[..., sl["r"]]], -1)
        h = self.enc_c(x[..., sl["c"]]) + self.enc_spatial(spatial) + self.enc_feat(x[..., sl["feat"]])
        h = h + self.enc_rl(x[..., sl["rl"]]) + self.enc_flags(batch.flags())
        h = h + self.pe(batch.pe_index())
        temb = F.timestep_embedding(t, self.d_model).to(x.dtype)
        return h + self.time(temb)[:, None, :]

    def forward(self, x: torch.Tensor, batch: StageBatch, t: torch.Tensor,
                latent: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (predicted noise (B, N, D), auxiliary architecture OBB (B, N, 8))."""
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        h = self.tokens(x, batch, t)
        mask = batch.active
        ctx = {"floor": (self.floor(batch.floor), None)}
        if self.stage == 4:
            if latent is None:
                latent = x[..., self.layout.slices["rl"]]
            kv = self.enc_latent(latent) + self.pe(batch.pe_index())
            ctx["latent"] = (kv, mask)
        for blk in self.blocks:
            h = blk(h, mask, ctx)
        h = self.norm_out(h)
        return self.eps_head(h), self.aux_head(h)


class InOutBlock(nn.Module):
    """Node update: cross-attend to incoming edges, then outgoing edges, then self-attention."""

    def __init__(self, d: int, n_heads: int, mode: str = "inout"):
        super().__init__()
        if mode not in ("inout", "in", "out"):
            raise ValueError(f"unknown in-out mode {mode!r}")
        self.mode = mode
        self.norm_in, self.att_in = LayerNorm(d), Attention(d, n_heads)
        self.norm_out, self.att_out = LayerNorm(d), Attention(d, n_heads)
        self.norm_self, self.att_self = LayerNorm(d), Attention(d, n_heads)
        self.norm_mlp, self.mlp = LayerNorm(d), MLP([d, 2 * d, d])

    def forward(self, x, node_mask, edges, in_mask, out_mask):
        if self.mode in ("inout", "in"):
            x = x + self.att_in(self.norm_in(x), edges, in_mask)
        if self.mode in ("inout", "out"):
            x = x + self.att_out(self.norm_out(x), edges, out_mask)
        h = self.norm_self(x)
        x = x + self.att_self(h, h, node_mask)
        return x + self.mlp(self.norm_mlp(x))


class PairHead(nn.Module):
    """Two-layer MLP on concat(h_i, h_j), with the first layer split per endpoint."""

    def __init__(self, d: int, n_out: int):
        super().__init__()
        self.src = Linear(d, d)
        self.dst = Linear(d, d, bias=False)
        self.out = Linear(d, n_out)

    def forward(self, h: torch.Tensor, pairs: tuple | None = None) -> torch.Tensor:
        """All (B, N, N, n_out) logits, or (P, n_out) for index triples ``pairs = (b, i, j)``."""
        if pairs is None:
            a = self.src(h)[:, :, None, :]
            b = self.dst(h)[:, None, :, :]
        else:
            bi, ii, jj = pairs
            a = self.src(h[bi, ii])
            b = self.dst(h[bi, jj])
        return self.out(F.gelu(a + b))


class RelationVAE(nn.Module):
    """Graph encoder to per-node latents and a pairwise per-category relation decoder."""

    def __init__(self, layout: FieldLayout, n_max: int = 16, d_model: int = 128, n_heads: int = 4,
                 n_enc: int = 3, n_dec: int = 3, latent_dim: int | None = None, mode: str = "inout"):
        super().__init__()
        latent_dim = latent_dim or layout.dims["rl"]
        if latent_dim != layout.dims["rl"]:
            raise ValueError(f"latent_dim {latent_dim} disagrees with the layout's rl width {layout.dims['rl']}")
        if mode not in ("inout", "in", "out"):
            raise ValueError(f"mode must be inout, in or out, got {mode!r}")
        self.layout = layout
        self.latent_dim = latent_dim
        self.mode = mode
        d = d_model
        self.node_c = Linear(layout.dims["c"], d)
        self.node_obb = Linear(8, d)
        self.pe = Embedding(n_max, d)
        self.edge_type = Embedding(len(EDGE_TYPES), d)
        self.edge_src = Linear(d, d, bias=False)
        self.edge_dst = Linear(d, d, bias=False)
        self.edge_mlp = MLP([d, d, d])
        self.enc_blocks = nn.ModuleList(InOutBlock(d, n_heads, mode) for _ in range(n_enc))
        self.enc_norm = LayerNorm(d)
        self.head_mu = Linear(d, latent_dim)
        self.head_logvar = Linear(d, latent_dim)
        self.dec_in = MLP([latent_dim, d, d])
        self.dec_c = Linear(layout.dims["c"], d)
        self.dec_obb = Linear(8, d)
        self.dec_blocks = nn.ModuleList(TransformerBlock(d, n_heads, {}) for _ in range(n_dec))
        self.dec_norm = LayerNorm(d)
        self.heads = nn.ModuleDict({c: PairHead(d, n) for c, n in zip(CATEGORIES, N_CLASSES)})

    def _node_base(self, batch: StageBatch, c_proj: Linear, obb_proj: Linear) -> torch.Tensor:
        c = batch.x0[..., self.layout.slices["c"]]
        h = c_proj(c) + obb_proj(batch.arch_obb(self.layout))
        return h + self.pe(batch.pe_index())

    def encode(self, batch: StageBatch) -> tuple[torch.Tensor, torch.Tensor]:
        if batch.edge_src is None:
            raise ValueError("batch has no graph attached")
        n = batch.x0.shape[1]
        h = self._node_base(batch, self.node_c, self.node_obb)
        pe = self.pe(batch.pe_index())
        bi = torch.arange(pe.shape[0])[:, None]
        e = self.edge_type(batch.edge_type) + self.edge_src(pe[bi, batch.edge_src]) + self.edge_dst(pe[bi, batch.edge_dst])
        e = self.edge_mlp(e)
        nodes = torch.arange(n)[None, :, None]
        valid = batch.edge_valid[:, None, :]
        in_mask = (batch.edge_dst[:, None, :] == nodes) & valid
        out_mask = (batch.edge_src[:, None, :] == nodes) & valid
        for blk in self.enc_blocks:
            h = blk(h, batch.active, e, in_mask, out_mask)
        h = self.enc_norm(h)
        return self.head_mu(h), self.head_logvar(h).clamp(-12.0, 6.0)

    def decode(self, z: torch.Tensor, batch: StageBatch, pairs: tuple | None = None) -> dict[str, torch.Tensor]:
        """Logits per category: (B, N, N, classes) with [b, i, j] scoring relation i -> j,
        or (P, classes) for the index triples in ``pairs``."""
        h = self.dec_in(z) + self._node_base(batch, self.dec_c, self.dec_obb)
        for blk in self.dec_blocks:
            h = blk(h, batch.active)
        h = self.dec_norm(h)
        out = {}
        for c in CATEGORIES:
            logits = self.heads[c](h, pairs)
            if c == SYMMETRY:
                if pairs is None:
                    swapped = logits.transpose(1, 2)
                else:
                    swapped = self.heads[c](h, (pairs[0], pairs[2], pairs[1]))
                logits = 0.5 * (logits + swapped)
            out[c] = logits
        return out
