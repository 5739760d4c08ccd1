from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from caslayout.config import ModelConfig, RunConfig, VaeConfig
from caslayout.evaluation import relation_satisfaction
from caslayout.nn.modules import init_parameters
from caslayout.pipeline import (
    CascadeModels,
    PipelineError,
    build_stage,
    build_vae,
    complete,
    edit,
    encode_graph,
    generate,
    generate_many,
    graph_conditioned,
    load_models,
    parse_edit_spec,
    rearrange,
    retrieve,
)
from caslayout.relations import RelationEdge, RelationGraph
from caslayout.scene import SceneElement, SceneError, Vocabulary, floorless, load_scene, make_scene, save_scene
from caslayout.sparse import extract_sparse
from caslayout.synth import build_catalog, synth_scenes

N_MAX = 12


@pytest.fixture(scope="module")
def models():
    """Untrained tiny cascade: enough to exercise every contract that does not depend on quality."""
    cfg = RunConfig(n_max=N_MAX, T=10, model=ModelConfig(32, 2, 1), vae=VaeConfig(32, 2, 1, 1, 8))
    vocab = Vocabulary()
    m = CascadeModels(cfg, vocab)
    m.vae = build_vae(cfg, vocab)
    init_parameters(m.vae, 0)
    for k in (1, 2, 3, 4):
        m.stages[k] = build_stage(k, cfg, vocab)
        init_parameters(m.stages[k], k)
    return m


@pytest.fixture(scope="module")
def scene():
    return synth_scenes("chair-table", 1, seed=6, n_max=N_MAX)[0]


def room_of(scene):
    return replace(scene, elements=tuple(e if e.kind == "architectural" else SceneElement.empty(i)
                                         for i, e in enumerate(scene.elements)))


def types(s):
    return Counter((e.label, e.size, e.feature) for e in s.furniture)


class TestGenerate:
    def test_deterministic(self, models, scene):
        room = room_of(scene)
        a, b = generate(room, models, 3), generate(room, models, 3)
        assert save_scene(a) == save_scene(b)

    def test_capacity_and_validity(self, models, scene):
        room = room_of(scene)
        for out in generate_many([room, room], models, 1):
            assert 0 <= out.n <= N_MAX - out.m
            assert all(e.placed and e.feature is not None and e.label is not None for e in out.furniture)
            assert [e for e in out.architecture] == [e for e in room.architecture]
            assert save_scene(load_scene(save_scene(out))) == save_scene(out)

    def test_floorless_room(self, models, scene):
        out = generate(floorless(room_of(scene)), models, 0)
        assert out.m == 0
        assert not [e for e in extract_sparse(out).edges if e.category == "arch_distance"]

    def test_rejects_placed_furniture(self, models, scene):
        with pytest.raises(SceneError):
            generate(scene, models, 0)

    def test_missing_stage(self, scene):
        cfg = RunConfig(n_max=N_MAX)
        with pytest.raises(PipelineError, match="stage 1"):
            generate(room_of(scene), CascadeModels(cfg, Vocabulary()), 0)


class TestRearrange:
    def test_types_sizes_kept(self, models, scene):
        out = rearrange(scene, models, 0)
        assert types(out) == types(scene)
        assert [e.id for e in out.elements] == [e.id for e in scene.elements]

    def test_two_seeds_differ(self, models, scene):
        a, b = rearrange(scene, models, 0), rearrange(scene, models, 1)
        assert [e.translation for e in a.furniture] != [e.translation for e in b.furniture]

    def test_unit_rotations(self, models, scene):
        for e in rearrange(scene, models, 2).furniture:
            assert np.hypot(*e.rotation) == pytest.approx(1.0)


class TestComplete:
    def test_full_scene_is_returned(self, models, scene):
        items = [e for e in scene.elements if not e.is_empty]
        full = make_scene(items, n_max=len(items), floor_polygon=scene.floor_polygon)
        assert complete(full, models, 0) is full

    def test_kept_item_bit_exact(self, models, scene):
        keep = scene.furniture[0]
        partial = replace(scene, elements=tuple(e if e.kind == "architectural" or e.id == keep.id
                                                else SceneElement.empty(i) for i, e in enumerate(scene.elements)))
        out = complete(partial, models, 0)
        assert out.by_id()[keep.id] == keep
        assert all(e.label is not None for e in out.furniture)
        for a, b in zip(out.architecture, partial.architecture):
            assert a == b

    def test_unplaced_partial(self, models, scene):
        e = scene.furniture[0]
        bad = replace(scene, elements=tuple(replace(x, translation=None) if x.id == e.id else x for x in scene.elements))
        with pytest.raises(SceneError):
            complete(bad, models, 0)


class TestGraphConditioned:
    def test_places_every_object(self, models, scene):
        out = graph_conditioned(scene.furniture, extract_sparse(scene), models, room_of(scene), 0)
        assert types(out) == types(scene) and all(e.placed for e in out.furniture)

    def test_empty_graph(self, models, scene):
        out = graph_conditioned(scene.furniture, RelationGraph(()), models, room_of(scene), 0)
        assert types(out) == types(scene)

    def test_unknown_id(self, models, scene):
        g = RelationGraph(("ghost", scene.furniture[0].id),
                          (RelationEdge("ghost", scene.furniture[0].id, "direction", "left"),))
        with pytest.raises(PipelineError, match="unknown ids"):
            graph_conditioned(scene.furniture, g, models, room_of(scene), 0)

    def test_encode_is_deterministic(self, models, scene):
        a = encode_graph(models, [scene], [extract_sparse(scene)])[0]
        b = encode_graph(models, [scene], [extract_sparse(scene)])[0]
        assert set(a) == {e.id for e in scene.elements if not e.is_empty}
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_capacity(self, models, scene):
        many = [replace(scene.furniture[0], id=f"dining_chair_{i + 50}") for i in range(N_MAX)]
        with pytest.raises(SceneError):
            graph_conditioned(many, RelationGraph(()), models, room_of(scene), 0)


class TestEdit:
    def test_identity(self, models, scene):
        ids = [e.id for e in scene.elements if not e.is_empty]
        assert edit(scene, [], ids, models, 0) == scene

    def test_preserved_items_unchanged(self, models, scene):
        keep = {scene.furniture[0].id}
        out = edit(scene, [], keep, models, 0)
        assert all(out.by_id()[k] == scene.by_id()[k] for k in keep)

    def test_resize(self, models, scene):
        table = next(e for e in scene.furniture if "table" in e.label)
        out = edit(scene, [{"id": table.id, "field": "size", "value": [2.0, 1.0, 0.7]}], [], models, 0)
        assert out.by_id()[table.id].size == (2.0, 1.0, 0.7)

    def test_translation_override_honored(self, models, scene):
        e = scene.furniture[0]
        out = edit(scene, [{"id": e.id, "field": "translation", "value": [0.25, -0.5, 0.4]}], [], models, 0)
        assert out.by_id()[e.id].translation == (0.25, -0.5, 0.4)

    def test_remove_two(self, models, scene):
        chairs = [e.id for e in scene.furniture if "chair" in e.label][:2]
        out = edit(scene, [{"id": c, "field": "remove", "value": True} for c in chairs], [], models, 0)
        assert not set(chairs) & set(out.by_id())
        assert out.n == scene.n - 2 and all(e.label is not None for e in out.furniture)

    def test_unknown_ids(self, models, scene):
        with pytest.raises(SceneError):
            edit(scene, [], ["ghost"], models, 0)
        with pytest.raises(SceneError):
            edit(scene, [{"id": "ghost", "field": "size", "value": [1, 1, 1]}], [], models, 0)
        e = scene.furniture[0].id
        with pytest.raises(SceneError):
            edit(scene, [{"id": e, "field": "size", "value": [1, 1, 1]}], [e], models, 0)

    def test_spec_parsing(self):
        keep, over = parse_edit_spec({"preserve": ["a"], "overrides": [{"id": "b", "field": "size", "value": [1, 1, 1]}]})
        assert keep == {"a"} and over[0]["id"] == "b"
        with pytest.raises(ValueError):
            parse_edit_spec({"keep": []})
        with pytest.raises(ValueError):
            parse_edit_spec({"overrides": [{"id": "b", "field": "colour", "value": 1}]})


def test_retrieve_nearest_feature():
    cat = build_catalog()
    entry = [c for c in cat if c.label == "armchair"][1]
    assert retrieve(cat, "armchair", np.asarray(entry.feature) * 3.0) == entry
    assert retrieve(cat, "hammock", np.ones(64)) is None


def test_save_load_round_trip(models, scene, tmp_path):
    models.save(tmp_path)
    again = load_models(tmp_path)
    assert sorted(again.stages) == [1, 2, 3, 4]
    assert save_scene(rearrange(scene, again, 5)) == save_scene(rearrange(scene, models, 5))


def test_round_trip_law_holds_after_generation(models, scene):
    out = rearrange(scene, models, 0)
    from caslayout.relations import extract_dense

    assert set(relation_satisfaction(out, extract_dense(out)).values()) == {100.0}
