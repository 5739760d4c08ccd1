"""Applications of the cascade: generation, rearrangement, completion,
graph-conditioned generation and attribute editing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .config import RunConfig
from .generative.batch import FIELD_ORDER, FieldLayout, attach_graphs, stage_batch
from .generative.core import ddpm_sample
from .generative.models import RelationVAE, StageDenoiser
from .generative.schedule import NoiseSchedule
from .nn import checkpoint
from .relations import CATEGORIES, RelationGraph
from .scene import Scene, SceneElement, SceneError, Vocabulary
from .sparse import ZoneTable, extract_sparse
from .synth import CatalogEntry, build_catalog


class PipelineError(RuntimeError):
    """A stage of the cascade failed; the message names the stage."""


@dataclass
class CascadeModels:
    """The trained pieces of the cascade plus everything needed to decode their outputs."""

    config: RunConfig
    vocab: Vocabulary
    stages: dict[int, StageDenoiser] = field(default_factory=dict)
    vae: RelationVAE | None = None
    catalog: list[CatalogEntry] | None = None
    zone_table: ZoneTable | None = None

    def __post_init__(self):
        self.schedule = NoiseSchedule(self.config.T)
        if self.catalog is None:
            self.catalog = build_catalog(self.vocab)
        if self.zone_table is None:
            self.zone_table = ZoneTable.default()

    def stage(self, k: int) -> StageDenoiser:
        if k not in self.stages:
            raise PipelineError(f"stage {k}: no trained model loaded")
        return self.stages[k]

    def require_vae(self) -> RelationVAE:
        if self.vae is None:
            raise PipelineError("stage 3: no relation VAE loaded")
        return self.vae

    # ------------------------------------------------------------------ persistence

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        cfg = self.config.to_json()
        (d / "config.json").write_text(cfg)
        named = {f"stage{k}": m for k, m in self.stages.items()}
        if self.vae is not None:
            named["vae"] = self.vae
        for name, m in sorted(named.items()):
            save_module(d / f"{name}.clck", m, self.config)


def module_meta(m: torch.nn.Module) -> dict:
    if isinstance(m, StageDenoiser):
        return {"kind": "stage", "stage": m.stage, "latent_scale": m.layout.latent_scale}
    return {"kind": "vae", "mode": m.mode, "latent_scale": m.layout.latent_scale}


def save_module(path: Path, m: torch.nn.Module, config: RunConfig) -> None:
    meta = module_meta(m)
    meta["config"] = config.to_dict()
    checkpoint.save(path, dict(m.state_dict()), meta)
    Path(str(path)[: -len(".clck")] + ".config.json").write_text(config.to_json())


def build_stage(stage: int, config: RunConfig, vocab: Vocabulary, latent_scale: float = 1.0) -> StageDenoiser:
    mc = config.model
    return StageDenoiser(stage, FieldLayout(len(vocab), latent_scale, config.vae.latent_dim), config.n_max, mc.d_model, mc.n_heads,
                         mc.n_blocks, tuple(config.grid))


def build_vae(config: RunConfig, vocab: Vocabulary, mode: str | None = None) -> RelationVAE:
    vc = config.vae
    return RelationVAE(FieldLayout(len(vocab), 1.0, vc.latent_dim), config.n_max, vc.d_model, vc.n_heads, vc.n_enc, vc.n_dec,
                       vc.latent_dim, mode or vc.mode)


def load_module(path: str | Path, vocab: Vocabulary | None = None) -> tuple[torch.nn.Module, RunConfig]:
    tensors, meta = checkpoint.load(path)
    if not meta or "kind" not in meta:
        raise checkpoint.CheckpointError(f"{path}: checkpoint carries no model metadata")
    config = RunConfig.from_dict(meta["config"])
    vocab = vocab or Vocabulary(config.vocabulary)
    if meta["kind"] == "stage":
        m = build_stage(meta["stage"], config, vocab, meta["latent_scale"])
    else:
        m = build_vae(config, vocab, meta["mode"])
    m.load_state_dict(tensors)
    return m, config


def load_models(directory: str | Path) -> CascadeModels:
    d = Path(directory)
    if not (d / "config.json").exists():
        raise FileNotFoundError(f"{d} holds no config.json")
    config = RunConfig.from_json((d / "config.json").read_text())
    vocab = Vocabulary(config.vocabulary)
    stages, vae = {}, None
    for k in (1, 2, 3, 4):
        p = d / f"stage{k}.clck"
        if p.exists():
            stages[k] = load_module(p, vocab)[0]
    if (d / "vae.clck").exists():
        vae = load_module(d / "vae.clck", vocab)[0]
    return CascadeModels(config, vocab, stages, vae)


# --------------------------------------------------------------------------- helpers


def _generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(int(rng))


def _rebuild(scene: Scene, slots: dict[int, SceneElement | None], **kw) -> Scene:
    """Replace slot contents; None empties the slot."""
    elements = list(scene.elements)
    for i, e in slots.items():
        elements[i] = SceneElement.empty(i) if e is None else replace(e, pe=i)
    return replace(scene, elements=tuple(elements), **kw)


def _fresh_id(label: str, taken: set) -> str:
    k = 0
    while f"{label}_{k}" in taken:
        k += 1
    taken.add(f"{label}_{k}")
    return f"{label}_{k}"


def retrieve(catalog: Sequence[CatalogEntry], label: str, feature: np.ndarray) -> CatalogEntry | None:
    """Catalog entry of the same label with the highest cosine similarity to ``feature``."""
    best, best_sim = None, -math.inf
    fn = float(np.linalg.norm(feature))
    for entry in catalog:
        if entry.label != label:
            continue
        ef = np.asarray(entry.feature)
        sim = float(ef @ feature) / max(fn * float(np.linalg.norm(ef)), 1e-12)
        if sim > best_sim:
            best, best_sim = entry, sim
    return best



# --------------------------------------------------------------------------- stage passes


def _stage1(models: CascadeModels, scenes: list[Scene], fixed, gen) -> list[Scene]:
    model = models.stage(1)
    layout, vocab = model.layout, models.vocab
    batch = stage_batch(scenes, 1, layout, vocab, fixed=fixed)
    x = ddpm_sample(model, batch, models.schedule, gen).numpy()
    allowed = np.array([0] + list(range(vocab.furniture_offset, len(vocab))))
    out = []
    for b, scene in enumerate(scenes):
        taken = {e.id for e in scene.elements if not e.is_empty}
        slots = {}
        for i, e in enumerate(scene.elements):
            if not bool(batch.target_f[b, i, 0]):
                continue
            c = x[b, i, layout.slices["c"]]
            idx = int(allowed[np.argmax(c[allowed])])
            label = vocab.label(idx)
            slots[i] = None if label is None else SceneElement(_fresh_id(label, taken), "furniture", label, pe=i)
        out.append(_rebuild(scene, slots))
    return out


def _stage2(models: CascadeModels, scenes: list[Scene], fixed, gen) -> list[Scene]:
    model = models.stage(2)
    layout = model.layout
    batch = stage_batch(scenes, 2, layout, models.vocab, fixed=fixed)
    x = ddpm_sample(model, batch, models.schedule, gen).numpy()
    s_col, f_col = FIELD_ORDER.index("s"), FIELD_ORDER.index("feat")
    out = []
    for b, scene in enumerate(scenes):
        slots = {}
        for i, e in enumerate(scene.elements):
            tf = batch.target_f[b, i]
            if not (bool(tf[s_col]) or bool(tf[f_col])):
                continue
            size, feature = e.size, e.feature
            if bool(tf[s_col]):
                size = tuple(float(v) for v in layout.decode("s", x[b, i, layout.slices["s"]]))
            if bool(tf[f_col]):
                raw = layout.decode("feat", x[b, i, layout.slices["feat"]])
                entry = retrieve(models.catalog, e.label, raw)
                feature = entry.feature if entry is not None else tuple(float(v) for v in raw)
            slots[i] = replace(e, size=size, feature=feature)
        out.append(_rebuild(scene, slots))
    return out


def _known_relation_targets(models: CascadeModels, scene: Scene, keep_ids: set) -> RelationGraph | None:
    """Sparse relations among the conditioned items and the architecture, for guidance."""
    kept = [e for e in scene.elements if e.kind == "architectural" or e.id in keep_ids]
    if not any(e.kind == "furniture" and e.placed for e in kept):
        return None
    sub = _rebuild(scene, {i: (e if (e.kind == "architectural" or e.id in keep_ids) else None)
                           for i, e in enumerate(scene.elements) if not e.is_empty})
    return sub, extract_sparse(sub, models.zone_table)


def _stage3(models: CascadeModels, scenes: list[Scene], fixed, gen, guide_ids=None) -> list[dict]:
    """Relation latents (VAE units) for every non-empty node."""
    model = models.stage(3)
    layout = model.layout
    batch = stage_batch(scenes, 3, layout, models.vocab, fixed=fixed)
    guide = None
    if guide_ids is not None:
        guide = _guidance(models, scenes, guide_ids, layout)
    x = ddpm_sample(model, batch, models.schedule, gen, guide=guide).numpy()
    out = []
    for b, scene in enumerate(scenes):
        lat = {}
        for i, e in enumerate(scene.elements):
            if not e.is_empty:
                lat[e.id] = layout.decode("rl", x[b, i, layout.slices["rl"]])
        out.append(lat)
    return out


def _guidance(models: CascadeModels, scenes, guide_ids, layout: FieldLayout):
    """Gradient of the decoder's CE against the partial layout's relations, applied to rl."""
    vae = models.require_vae()
    subs, graphs, which = [], [], []
    for b, (scene, ids) in enumerate(zip(scenes, guide_ids)):
        got = _known_relation_targets(models, scene, set(ids or ()))
        if got is not None:
            subs.append(got[0])
            graphs.append(got[1])
            which.append(b)
    if not subs:
        return None
    tb = attach_graphs(stage_batch(subs, 1, vae.layout, models.vocab), subs, graphs, table=models.zone_table)
    from .generative.core import candidate_pairs

    pairs = candidate_pairs(tb)
    if pairs[0].numel() == 0:
        return None
    mask, target = tb.rel_mask[pairs], tb.rel_target[pairs]
    sched = models.schedule
    rl = layout.slices["rl"]
    rows = torch.tensor(which)

    def guide(x, t, eps_hat):
        g = float(sched.gamma[t])
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            x0_hat = (x - (1.0 - g) ** 0.5 * eps_hat.detach()) / g**0.5
            z = x0_hat[rows][..., rl] * layout.latent_scale
            logits = vae.decode(z, tb, pairs)
            loss = 0.0
            for k, c in enumerate(CATEGORIES):
                nll = -torch.log_softmax(logits[c], -1).gather(-1, target[:, k : k + 1]).squeeze(-1)
                loss = loss + (nll * mask[:, k]).sum()
            (grad,) = torch.autograd.grad(loss / mask.sum(), x)
        return -0.1 * (1.0 - g) ** 0.5 * grad

    return guide


def _stage4(models: CascadeModels, scenes: list[Scene], latents: list[dict], fixed, gen) -> list[Scene]:
    model = models.stage(4)
    layout = model.layout
    batch = stage_batch(scenes, 4, layout, models.vocab, latents=latents, fixed=fixed)
    z = batch.x0[..., layout.slices["rl"]]
    x = ddpm_sample(model, batch, models.schedule, gen, latent=z).numpy()
    t_col, r_col = FIELD_ORDER.index("t"), FIELD_ORDER.index("r")
    out = []
    for b, scene in enumerate(scenes):
        slots = {}
        for i, e in enumerate(scene.elements):
            tf = batch.target_f[b, i]
            if not (bool(tf[t_col]) or bool(tf[r_col])):
                continue
            trans, rot = e.translation, e.rotation
            if bool(tf[t_col]):
                trans = tuple(float(v) for v in layout.decode("t", x[b, i, layout.slices["t"]]))
            if bool(tf[r_col]):
                r = x[b, i, layout.slices["r"]].astype(float)
                norm = math.hypot(r[0], r[1])
                rot = (1.0, 0.0) if norm < 1e-12 else (float(r[0] / norm), float(r[1] / norm))
            slots[i] = replace(e, translation=trans, rotation=rot)
        out.append(_rebuild(scene, slots))
    return out


def _run(what: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PipelineError:
        raise
    except Exception as err:  # noqa: BLE001 - re-raised with the stage name attached
        raise PipelineError(f"{what}: {err}") from err


# --------------------------------------------------------------------------- applications


def _check_room(scene: Scene) -> None:
    placed = [e.id for e in scene.furniture if e.placed]
    if placed:
        raise SceneError(f"room must not contain placed furniture, found {placed}")


def generate_many(rooms: Sequence[Scene], models: CascadeModels, rng=0) -> list[Scene]:
    gen = _generator(rng)
    rooms = list(rooms)
    for r in rooms:
        _check_room(r)
    scenes = _run("stage 1", _stage1, models, rooms, None, gen)
    scenes = _run("stage 2", _stage2, models, scenes, None, gen)
    latents = _run("stage 3", _stage3, models, scenes, None, gen)
    return _run("stage 4", _stage4, models, scenes, latents, None, gen)


def generate(room: Scene, models: CascadeModels, rng=0) -> Scene:
    """Full cascade on an empty room: types, then sizes and features, then latents, then placements."""
    return generate_many([room], models, rng)[0]


def _fixed_types(scene: Scene) -> dict[str, set]:
    return {e.id: {"c", "s", "feat"} for e in scene.furniture}


def rearrange_many(scenes: Sequence[Scene], models: CascadeModels, rng=0) -> list[Scene]:
    gen = _generator(rng)
    scenes = list(scenes)
    for s in scenes:
        missing = [e.id for e in s.furniture if e.size is None]
        if missing:
            raise SceneError(f"rearrange needs sizes for every furniture item, missing {missing}")
    fixed = [_fixed_types(s) for s in scenes]
    latents = _run("stage 3", _stage3, models, scenes, fixed, gen)
    return _run("stage 4", _stage4, models, scenes, latents, fixed, gen)


def rearrange(scene: Scene, models: CascadeModels, rng=0) -> Scene:
    """New placements for the given furniture; types, sizes and features are kept bit-exact."""
    return rearrange_many([scene], models, rng)[0]


def complete(partial: Scene, models: CascadeModels, rng=0) -> Scene:
    """Add furniture around a fixed partial layout."""
    gen = _generator(rng)
    unplaced = [e.id for e in partial.furniture if not e.placed or e.feature is None]
    if unplaced:
        raise SceneError(f"partial layout items must be fully specified, missing data for {unplaced}")
    keep = frozenset(e.id for e in partial.furniture) | partial.conditioned
    scene = replace(partial, conditioned=keep)
    if not any(e.is_empty for e in scene.elements):
        return partial
    scenes = _run("stage 1", _stage1, models, [scene], None, gen)
    scenes = _run("stage 2", _stage2, models, scenes, None, gen)
    latents = _run("stage 3", _stage3, models, scenes, None, gen, guide_ids=[keep])
    out = _run("stage 4", _stage4, models, scenes, latents, None, gen)[0]
    return replace(out, conditioned=partial.conditioned)


def encode_graph(models: CascadeModels, scenes: Sequence[Scene], graphs: Sequence[RelationGraph]) -> list[dict]:
    """Deterministic relation latents (z = mu) of user graphs."""
    vae = models.require_vae()
    for scene, g in zip(scenes, graphs):
        ids = {e.id for e in scene.elements if not e.is_empty}
        unknown = sorted({x for e in g.edges for x in (e.src, e.dst)} - ids)
        if unknown:
            raise SceneError(f"relation graph references unknown ids {unknown}")
    batch = attach_graphs(stage_batch(list(scenes), 1, vae.layout, models.vocab), list(scenes), list(graphs),
                          with_targets=False)
    with torch.no_grad():
        mu, _ = vae.encode(batch)
    out = []
    for b, scene in enumerate(scenes):
        out.append({e.id: mu[b, i].numpy().astype(float) for i, e in enumerate(scene.elements) if not e.is_empty})
    return out


def _objects_scene(objects: Sequence[SceneElement], room: Scene, models: CascadeModels) -> Scene:
    _check_room(room)
    items = []
    for o in objects:
        if o.kind != "furniture" or o.size is None:
            raise SceneError(f"object {o.id!r} must be a furniture item with a size")
        feat = o.feature
        if feat is None:
            entry = min((c for c in models.catalog if c.label == o.label),
                        key=lambda c: sum((0.5 * (lo + hi) - s) ** 2 for lo, hi, s in zip(c.size_min, c.size_max, o.size)),
                        default=None)
            feat = entry.feature if entry is not None else tuple(0.0 for _ in range(64))
        items.append(replace(o, translation=None, rotation=None, feature=feat))
    arch = [e for e in room.elements if e.kind == "architectural"]
    if len(arch) + len(items) > room.n_max:
        raise SceneError(f"{len(arch) + len(items)} elements exceed n_max {room.n_max}")
    ids = [e.id for e in arch + items]
    if len(set(ids)) != len(ids):
        raise SceneError("object ids clash with room ids")
    for e in items:
        models.vocab.check("furniture", e.label)
    slots = {i: None for i in range(room.n_max)}
    for i, e in enumerate(arch + items):
        slots[i] = e
    return _rebuild(room, slots, conditioned=frozenset())


def graph_conditioned_many(objects: Sequence[Sequence[SceneElement]], graphs: Sequence[RelationGraph],
                           rooms: Sequence[Scene], models: CascadeModels, rng=0) -> list[Scene]:
    gen = _generator(rng)
    scenes = [_objects_scene(o, r, models) for o, r in zip(objects, rooms)]
    latents = _run("stage 3", encode_graph, models, scenes, graphs)
    fixed = [_fixed_types(s) for s in scenes]
    return _run("stage 4", _stage4, models, scenes, latents, fixed, gen)


def graph_conditioned(objects: Sequence[SceneElement], user_graph: RelationGraph, models: CascadeModels,
                      room: Scene, rng=0) -> Scene:
    """Place typed, sized objects so that they follow a user relation graph."""
    return graph_conditioned_many([objects], [user_graph], [room], models, rng)[0]


EDIT_FIELDS = ("label", "size", "translation", "rotation_deg", "feature", "remove")


def parse_edit_spec(doc: Mapping) -> tuple[set, list[dict]]:
    if set(doc) - {"preserve", "overrides"}:
        raise ValueError(f"unknown edit spec keys {sorted(set(doc) - {'preserve', 'overrides'})}")
    preserve = set(doc.get("preserve", []))
    overrides = list(doc.get("overrides", []))
    for i, o in enumerate(overrides):
        if set(o) != {"id", "field", "value"}:
            raise ValueError(f"overrides[{i}] must have exactly id, field, value")
        if o["field"] not in EDIT_FIELDS:
            raise ValueError(f"overrides[{i}].field must be one of {EDIT_FIELDS}")
    return preserve, overrides


def edit(scene: Scene, changes: Sequence[Mapping], preserve: Iterable[str], models: CascadeModels, rng=0) -> Scene:
    """Apply attribute overrides, keep preserved items, and re-place everything else."""
    gen = _generator(rng)
    preserve = set(preserve)
    ids = scene.by_id()
    if preserve - set(ids):
        raise SceneError(f"preserve names unknown ids {sorted(preserve - set(ids))}")
    fixed = {e.id: {"c", "s", "feat"} for e in scene.furniture}
    slots = {}
    pos = {e.id: i for i, e in enumerate(scene.elements)}
    for o in changes:
        eid, f, v = o["id"], o["field"], o["value"]
        if eid not in ids or ids[eid].kind != "furniture":
            raise SceneError(f"override targets unknown furniture id {eid!r}")
        if eid in preserve:
            raise SceneError(f"element {eid!r} is both preserved and overridden")
        if f not in EDIT_FIELDS:
            raise SceneError(f"cannot override field {f!r}")
        e = slots.get(pos[eid], ids[eid])
        if e is None:
            continue
        if f == "remove":
            if v:
                slots[pos[eid]] = None
            continue
        if f == "label":
            models.vocab.check("furniture", v)
            e = replace(e, label=v)
        elif f == "size":
            e = replace(e, size=tuple(float(x) for x in v))
        elif f == "translation":
            e = replace(e, translation=tuple(float(x) for x in v))
            fixed[eid].add("t")
        elif f == "rotation_deg":
            rad = math.radians(float(v))
            e = replace(e, rotation=(math.cos(rad), math.sin(rad)))
            fixed[eid].add("r")
        elif f == "feature":
            e = replace(e, feature=tuple(float(x) for x in v))
        e.obb  # validates the override
        slots[pos[eid]] = e
    edited = _rebuild(scene, slots, conditioned=frozenset(preserve))
    fx = [{k: v for k, v in fixed.items() if k in edited.by_id()}]
    latents = _run("stage 3", _stage3, models, [edited], fx, gen, guide_ids=[preserve])
    out = _run("stage 4", _stage4, models, [edited], latents, fx, gen)[0]
    return replace(out, conditioned=scene.conditioned)
