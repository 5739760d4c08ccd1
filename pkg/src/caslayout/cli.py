"""Command-line entry points: dataset building, relation analysis, training, sampling and evaluation.

Every command writes machine-readable output to stdout or ``--out`` and
derives all randomness from ``--seed`` (or ``CASLAYOUT_SEED``).  Failures
print one JSON line ``{"error": ...}`` and exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import evaluation, pipeline
from .config import RunConfig
from .relations import CATEGORIES, RelationGraph, extract_dense
from .scene import Scene, Vocabulary, load_scene, save_scene, scene_from_dict
from .sparse import extract_sparse, relation_entropy, scene_labels
from .synth import PRESETS, synth_scenes

TRAIN_STAGES = ("1", "2", "3", "4", "vae", "cotrain")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# --------------------------------------------------------------------------- io


def _dumps(doc) -> bytes:
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()


def _emit(data: bytes, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def read_scene(path: str, vocab: Vocabulary | None = None) -> Scene:
    return load_scene(Path(path).read_bytes(), vocab)


def read_corpus(paths: Sequence[str], vocab: Vocabulary | None = None) -> list[Scene]:
    """Scenes from files, directories of ``*.json`` (sorted by name) or JSON arrays."""
    scenes = []
    for p in map(Path, paths):
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            doc = json.loads(f.read_bytes())
            docs = doc if isinstance(doc, list) else [doc]
            scenes.extend(scene_from_dict(d, vocab) for d in docs)
    if not scenes:
        raise CliError(f"no scenes found in {list(paths)}")
    return scenes


def _scenes_out(scenes: list[Scene], out: str | None) -> None:
    if len(scenes) == 1:
        _emit(save_scene(scenes[0]) + b"\n", out)
    else:
        _emit(b"[\n" + b",\n".join(save_scene(s) for s in scenes) + b"\n]\n", out)


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("CASLAYOUT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"CASLAYOUT_SEED must be an integer, got {env!r}") from None


def scene_seeds(seed: int, n: int) -> list[int]:
    """Independent per-scene seeds so results do not depend on --jobs."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- commands


def cmd_extract(args):
    scene = read_scene(args.scene)
    g = extract_sparse(scene) if args.sparse else extract_dense(scene)
    _emit(_dumps(g.to_dict()), args.out)


def cmd_sparsify(args):
    scene = read_scene(args.scene)
    dense = RelationGraph.from_json(Path(args.graph).read_bytes()) if args.graph else extract_dense(scene)
    from .sparse import assign_zones, sparsify

    ids = {e.id for e in scene.elements if not e.is_empty}
    unknown = sorted({x for e in dense.edges for x in (e.src, e.dst)} - ids)
    if unknown:
        raise CliError(f"graph references ids missing from the scene: {unknown}")
    _emit(_dumps(sparsify(dense, assign_zones(scene)).to_dict()), args.out)


def cmd_entropy(args):
    scenes = read_corpus(args.corpus)
    extract = extract_dense if args.graphs == "dense" else extract_sparse
    graphs = [extract(s) for s in scenes]
    rep = relation_entropy(graphs, [scene_labels(s) for s in scenes], args.category)
    if args.format == "csv":
        _emit(rep.to_csv().encode(), args.out)
    else:
        _emit(_dumps(rep.to_dict()), args.out)


def cmd_synth_data(args):
    scenes = synth_scenes(args.preset, args.count, seed=args.seed, n_max=args.n_max)
    if args.out and not args.out.endswith(".json"):
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        width = max(5, len(str(len(scenes))))
        for i, s in enumerate(scenes):
            (d / f"scene_{i:0{width}d}.json").write_bytes(save_scene(s) + b"\n")
        sys.stdout.write(json.dumps({"count": len(scenes), "out": str(d)}) + "\n")
    else:
        _scenes_out(scenes, args.out)


def _load_config(path: str | None, seed: int) -> RunConfig:
    cfg = RunConfig.from_json(Path(path).read_bytes()) if path else RunConfig()
    cfg.seed = seed
    return cfg


def cmd_train(args):
    from . import training

    torch.manual_seed(args.seed)
    cfg = _load_config(args.config, args.seed)
    vocab = Vocabulary(cfg.vocabulary)
    data = args.data or ([cfg.data] if cfg.data else None)
    if not data:
        raise CliError("train needs --data (or 'data' in the config)")
    scenes = training.check_corpus(read_corpus(data, vocab), cfg)
    out = Path(args.out or cfg.out or "models")
    out.mkdir(parents=True, exist_ok=True)
    models = pipeline.load_models(out) if (out / "config.json").exists() else pipeline.CascadeModels(cfg, vocab)
    models.config = cfg
    stage = args.stage
    if stage == "vae":
        models.vae = training.fit_vae(scenes, cfg, vocab)
    elif stage == "cotrain":
        models.vae, models.stages[4] = training.fit_cotrain(scenes, cfg, vocab, vae=models.vae,
                                                            freeze_vae=args.freeze_vae)
    else:
        k = int(stage)
        if k >= 3 and models.vae is None:
            raise CliError(f"stage {k} needs a trained VAE in {out}; run --stage vae or cotrain first")
        models.stages[k] = training.fit_stage(k, scenes, cfg, vocab, models.vae)
    models.save(out)
    files = sorted(p.name for p in out.iterdir())
    sys.stdout.write(json.dumps({"stage": stage, "out": str(out), "files": files}) + "\n")


# workers get everything through arguments so process pools stay deterministic
def _apply_one(job):
    fn, model_dir, payload, seed = job
    torch.set_num_threads(1)
    models = pipeline.load_models(model_dir)
    return fn(models, payload, seed)


def _gen(models, room, seed):
    return pipeline.generate(room, models, seed)


def _rearr(models, scene, seed):
    return pipeline.rearrange(scene, models, seed)


def _compl(models, scene, seed):
    return pipeline.complete(scene, models, seed)


def _run_per_scene(fn, args, scenes):
    seeds = scene_seeds(args.seed, len(scenes))
    if args.jobs <= 1:
        models = pipeline.load_models(args.models)
        return [fn(models, s, k) for s, k in zip(scenes, seeds)]
    return _map(_apply_one, [(fn, args.models, s, k) for s, k in zip(scenes, seeds)], args.jobs)


def cmd_sample(args):
    rooms = read_corpus(args.rooms)
    rooms = [r for r in rooms for _ in range(args.count)]
    _scenes_out(_run_per_scene(_gen, args, rooms), args.out)


def cmd_rearrange(args):
    _scenes_out(_run_per_scene(_rearr, args, read_corpus(args.scenes)), args.out)


def cmd_complete(args):
    _scenes_out(_run_per_scene(_compl, args, read_corpus(args.scenes)), args.out)


def cmd_graph_gen(args):
    models = pipeline.load_models(args.models)
    room = read_scene(args.room, models.vocab)
    doc = json.loads(Path(args.objects).read_bytes())
    objs = scene_from_dict({"n_max": room.n_max, "elements": doc}, models.vocab).furniture if isinstance(doc, list) \
        else read_scene(args.objects, models.vocab).furniture
    graph = RelationGraph.from_json(Path(args.graph).read_bytes())
    _scenes_out([pipeline.graph_conditioned(objs, graph, models, room, args.seed)], args.out)


def cmd_edit(args):
    models = pipeline.load_models(args.models)
    scene = read_scene(args.scene, models.vocab)
    preserve, overrides = pipeline.parse_edit_spec(json.loads(Path(args.spec).read_bytes()))
    _scenes_out([pipeline.edit(scene, overrides, preserve, models, args.seed)], args.out)


def _metrics_one(scene):
    return {"scene_iou": evaluation.scene_iou(scene), "r_out": evaluation.r_out(scene),
            "r_walk": evaluation.r_walk(scene)}


def cmd_eval(args):
    scenes = read_corpus(args.scenes)
    per = _map(_metrics_one, scenes, args.jobs)
    rep = {"count": len(scenes)}
    for k in ("scene_iou", "r_out", "r_walk"):
        rep[k] = float(np.mean([p[k] for p in per]))
    if args.reference:
        rep["tkl"] = evaluation.tkl(scenes, read_corpus(args.reference))
    if args.targets:
        graphs = [RelationGraph.from_json(Path(p).read_bytes()) for p in args.targets]
        if len(graphs) != len(scenes):
            raise CliError(f"{len(graphs)} target graphs for {len(scenes)} scenes")
        sat = [evaluation.relation_satisfaction(s, g) for s, g in zip(scenes, graphs)]
        rep["relation_satisfaction"] = {c: float(np.mean([x[c] for x in sat])) for c in CATEGORIES}
    if args.per_scene:
        rep["scenes"] = per
    _emit(_dumps(rep), args.out)


def cmd_render(args):
    scene = read_scene(args.scene)
    palette = None
    if args.palette:
        palette = {k: tuple(v) for k, v in json.loads(Path(args.palette).read_bytes()).items()}
    img = evaluation.render_topdown(scene, palette, args.size, draw_floor=not args.no_floor)
    _emit(evaluation.to_ppm(img), args.out)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="caslayout", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $CASLAYOUT_SEED or 0)")
        sp.add_argument("--out", default=None, help="output path (default: stdout)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for scene-parallel commands")
        return sp

    sp = cmd("extract", cmd_extract, "dense (or --sparse) relation graph of a scene")
    sp.add_argument("scene")
    sp.add_argument("--sparse", action="store_true", help="apply zone/anchor sparsification")

    sp = cmd("sparsify", cmd_sparsify, "sparse relation graph of a scene, from its dense graph")
    sp.add_argument("scene")
    sp.add_argument("--graph", help="dense graph JSON (default: extracted from the scene)")

    sp = cmd("entropy", cmd_entropy, "average per-pair relation entropy (bits) over a corpus")
    sp.add_argument("corpus", nargs="+", help="scene files, directories or JSON arrays")
    sp.add_argument("--category", default="direction", choices=CATEGORIES)
    sp.add_argument("--graphs", default="sparse", choices=("sparse", "dense"))
    sp.add_argument("--format", default="json", choices=("json", "csv"))

    sp = cmd("synth-data", cmd_synth_data, "synthetic scene corpus with known relations")
    sp.add_argument("--preset", default="chair-table", choices=PRESETS)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--n-max", type=int, default=16)

    sp = cmd("train", cmd_train, "train one piece of the cascade into a model directory (--out)")
    sp.add_argument("--stage", required=True, choices=TRAIN_STAGES)
    sp.add_argument("--config", help="RunConfig JSON; missing keys take defaults")
    sp.add_argument("--data", nargs="+", help="training scenes")
    sp.add_argument("--freeze-vae", action="store_true", help="cotrain without updating the VAE")

    sp = cmd("sample", cmd_sample, "generate furniture for empty rooms")
    sp.add_argument("rooms", nargs="+")
    sp.add_argument("--models", required=True)
    sp.add_argument("--count", type=int, default=1, help="samples per room")

    sp = cmd("rearrange", cmd_rearrange, "new placements for the given furniture")
    sp.add_argument("scenes", nargs="+")
    sp.add_argument("--models", required=True)

    sp = cmd("complete", cmd_complete, "add furniture around a partial layout")
    sp.add_argument("scenes", nargs="+")
    sp.add_argument("--models", required=True)

    sp = cmd("graph-gen", cmd_graph_gen, "place objects following a relation graph")
    sp.add_argument("--models", required=True)
    sp.add_argument("--room", required=True, help="scene JSON with architecture only")
    sp.add_argument("--objects", required=True, help="JSON list of furniture elements, or a scene")
    sp.add_argument("--graph", required=True, help="RelationGraph JSON")

    sp = cmd("edit", cmd_edit, "override attributes and re-place unpreserved furniture")
    sp.add_argument("scene")
    sp.add_argument("--models", required=True)
    sp.add_argument("--spec", required=True, help='JSON {"preserve": [ids], "overrides": [{id, field, value}]}')

    sp = cmd("eval", cmd_eval, "layout metrics report")
    sp.add_argument("scenes", nargs="+")
    sp.add_argument("--reference", nargs="+", help="reference corpus for TKL")
    sp.add_argument("--targets", nargs="+", help="one relation graph per scene for satisfaction")
    sp.add_argument("--per-scene", action="store_true")

    sp = cmd("render", cmd_render, "top-down semantic render as binary PPM")
    sp.add_argument("scene")
    sp.add_argument("--palette", help="palette JSON (label -> [r, g, b])")
    sp.add_argument("--size", type=int, default=evaluation.RENDER_SIZE)
    sp.add_argument("--no-floor", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.seed = resolve_seed(args.seed)
        if args.jobs < 1:
            raise CliError("--jobs must be at least 1")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
        torch.set_num_threads(1)
        args.func(args)
        return 0
    except Exception as err:  # noqa: BLE001 - every failure becomes one JSON line
        msg = str(err) or type(err).__name__
        sys.stdout.write(json.dumps({"error": msg}) + "\n")
        sys.stdout.flush()
        return 1


if __name__ == "__main__":
    sys.exit(main())
