"""Scene data model, JSON I/O, floor rasterization and per-stage node vectors."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

import jsonschema
import numpy as np

from .geometry import Obb, Segment2D, points_in_polygon

FEATURE_DIM = 64
LATENT_DIM = 32
ARCH_LABELS = ("wall", "door", "window")
KINDS = ("architectural", "furniture", "empty")

DEFAULT_N_MAX = 16
DEFAULT_GRID = (64, 64)
DEFAULT_METERS_PER_CELL = 0.125


class SceneError(ValueError):
    """Raised for malformed scene files or capacity violations."""


class StagingError(ValueError):
    """Raised when a stage needs a field that no earlier stage produced."""


@lru_cache(maxsize=None)
def default_vocabulary() -> tuple[str, ...]:
    text = resources.files("caslayout.data").joinpath("vocabulary.json").read_text()
    return tuple(json.loads(text))


class Vocabulary:
    """Class indices for node type one-hots: 0 is None, then walls/doors/windows, then furniture."""

    def __init__(self, furniture: Sequence[str] | None = None):
        self.furniture = tuple(furniture if furniture is not None else default_vocabulary())
        if len(set(self.furniture)) != len(self.furniture):
            raise ValueError("duplicate furniture labels in vocabulary")
        self.labels = (None,) + ARCH_LABELS + self.furniture
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.furniture == other.furniture

    def __hash__(self):
        return hash(self.furniture)

    @property
    def furniture_offset(self) -> int:
        return 1 + len(ARCH_LABELS)

    def index(self, label: str | None) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise SceneError(f"label {label!r} is not in the vocabulary") from None

    def label(self, index: int) -> str | None:
        return self.labels[index]

    def check(self, kind: str, label: str | None) -> None:
        if kind == "empty":
            if label is not None:
                raise SceneError("empty slots carry no label")
        elif kind == "architectural":
            if label not in ARCH_LABELS:
                raise SceneError(f"architectural label {label!r} must be one of {ARCH_LABELS}")
        elif kind == "furniture":
            if label not in self.furniture:
                raise SceneError(f"furniture label {label!r} is not in the vocabulary")
        else:
            raise SceneError(f"unknown element kind {kind!r}")


@dataclass(frozen=True)
class SceneElement:
    id: str
    kind: str
    label: str | None
    size: tuple[float, float, float] | None = None
    translation: tuple[float, float, float] | None = None
    rotation: tuple[float, float] | None = None
    feature: tuple[float, ...] | None = None
    pe: int = 0

    @property
    def is_empty(self) -> bool:
        return self.kind == "empty"

    @property
    def placed(self) -> bool:
        return self.size is not None and self.translation is not None and self.rotation is not None

    @property
    def obb(self) -> Obb | None:
        if not self.placed:
            return None
        return Obb(self.size, self.translation, self.rotation)

    def segment(self) -> Segment2D:
        return Segment2D.from_obb(self.obb)

    @classmethod
    def empty(cls, pe: int) -> "SceneElement":
        return cls(id=f"_empty{pe}", kind="empty", label=None, pe=pe)


@dataclass(frozen=True, eq=False)
class Scene:
    elements: tuple[SceneElement, ...]
    floor: np.ndarray
    meters_per_cell: float = DEFAULT_METERS_PER_CELL
    floor_polygon: tuple[tuple[float, float], ...] | None = None
    room_center: tuple[float, float] = (0.0, 0.0)
    conditioned: frozenset = frozenset()

    @property
    def n_max(self) -> int:
        return len(self.elements)

    @property
    def m(self) -> int:
        return sum(e.kind == "architectural" for e in self.elements)

    @property
    def n(self) -> int:
        return sum(e.kind == "furniture" for e in self.elements)

    @property
    def architecture(self) -> list[SceneElement]:
        return [e for e in self.elements if e.kind == "architectural"]

    @property
    def furniture(self) -> list[SceneElement]:
        return [e for e in self.elements if e.kind == "furniture"]

    def by_id(self) -> dict[str, SceneElement]:
        return {e.id: e for e in self.elements if not e.is_empty}

    def replace_elements(self, elements: Iterable[SceneElement], **kwargs) -> "Scene":
        return replace(self, elements=tuple(elements), **kwargs)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.elements == other.elements
            and self.meters_per_cell == other.meters_per_cell
            and self.floor_polygon == other.floor_polygon
            and self.room_center == other.room_center
            and self.conditioned == other.conditioned
            and self.floor.shape == other.floor.shape
            and bool(np.array_equal(self.floor, other.floor))
        )

    __hash__ = None


def make_scene(
    elements: Sequence[SceneElement],
    n_max: int = DEFAULT_N_MAX,
    floor_polygon: Sequence[Sequence[float]] | None = None,
    meters_per_cell: float = DEFAULT_METERS_PER_CELL,
    grid: tuple[int, int] = DEFAULT_GRID,
    vocab: Vocabulary | None = None,
    conditioned: Iterable[str] = (),
) -> Scene:
    """Build a scene, padding with empty slots and assigning pe by slot position."""
    vocab = vocab or Vocabulary()
    items = [e for e in elements if not e.is_empty]
    if len(items) > n_max:
        raise SceneError(f"scene has {len(items)} elements but n_max is {n_max}")
    ids = [e.id for e in items]
    if len(set(ids)) != len(ids):
        raise SceneError("element ids must be unique")
    for e in items:
        vocab.check(e.kind, e.label)
        if e.kind == "architectural" and not e.placed:
            raise SceneError(f"architectural element {e.id!r} needs size, translation and rotation")
        if e.obb is not None:
            e.obb  # validates
    slots = [replace(e, pe=i) for i, e in enumerate(items)]
    slots += [SceneElement.empty(i) for i in range(len(items), n_max)]
    if floor_polygon:
        poly = tuple((float(x), float(y)) for x, y in floor_polygon)
        floor = rasterize_floor(poly, grid, meters_per_cell)
    else:
        poly = None
        floor = np.ones(grid, dtype=np.uint8)
    return Scene(tuple(slots), floor, float(meters_per_cell), poly, conditioned=frozenset(conditioned))


def grid_centers(shape: tuple[int, int], meters_per_cell: float) -> tuple[np.ndarray, np.ndarray]:
    """World xy of cell centers; row index grows with y, column index with x."""
    h, w = shape
    xs = (np.arange(w) + 0.5 - w / 2) * meters_per_cell
    ys = (np.arange(h) + 0.5 - h / 2) * meters_per_cell
    return np.meshgrid(xs, ys)


def rasterize_floor(
    polygon: Sequence[Sequence[float]],
    shape: tuple[int, int] = DEFAULT_GRID,
    meters_per_cell: float = DEFAULT_METERS_PER_CELL,
) -> np.ndarray:
    """Binary grid with 1 where the cell center lies inside the polygon."""
    poly = [(float(x), float(y)) for x, y in polygon]
    if len(poly) < 3:
        raise SceneError("floor polygon needs at least 3 vertices")
    area = 0.0
    for (x0, y0), (x1, y1) in zip(poly, poly[1:] + poly[:1]):
        area += x0 * y1 - x1 * y0
    if abs(area) < 1e-12:
        raise SceneError("floor polygon has zero area")
    gx, gy = grid_centers(shape, meters_per_cell)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return points_in_polygon(pts, poly).reshape(shape).astype(np.uint8)


# --------------------------------------------------------------------------- JSON

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["n_max", "meters_per_cell", "floor_polygon", "elements"],
    "properties": {
        "n_max": {"type": "integer", "minimum": 1},
        "meters_per_cell": {"type": "number", "exclusiveMinimum": 0},
        "floor_polygon": {
            "type": ["array", "null"],
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "elements": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "kind", "label"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "kind": {"enum": ["architectural", "furniture"]},
                    "label": {"type": "string"},
                    "size": _VEC3,
                    "translation": _VEC3,
                    "rotation_deg": {"type": "number"},
                    "rotation": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                    "feature": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": FEATURE_DIM,
                        "maxItems": FEATURE_DIM,
                    },
                },
            },
        },
    },
}


def _path(err: jsonschema.ValidationError) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)


def scene_from_dict(doc: Mapping, vocab: Vocabulary | None = None, grid=DEFAULT_GRID) -> Scene:
    vocab = vocab or Vocabulary()
    try:
        jsonschema.validate(doc, SCENE_SCHEMA)
    except jsonschema.ValidationError as err:
        raise SceneError(f"{_path(err)}: {err.message}") from None
    elements = []
    for i, raw in enumerate(doc["elements"]):
        where = f"$.elements[{i}]"
        try:
            vocab.check(raw["kind"], raw["label"])
        except SceneError as err:
            raise SceneError(f"{where}.label: {err}") from None
        rotation = None
        if "rotation" in raw:
            rotation = tuple(float(v) for v in raw["rotation"])
            if "rotation_deg" in raw:
                rad = math.radians(raw["rotation_deg"])
                if abs(math.cos(rad) - rotation[0]) > 1e-9 or abs(math.sin(rad) - rotation[1]) > 1e-9:
                    raise SceneError(f"{where}.rotation: disagrees with rotation_deg")
        elif "rotation_deg" in raw:
            rad = math.radians(raw["rotation_deg"])
            rotation = (math.cos(rad), math.sin(rad))
        el = SceneElement(
            id=raw["id"],
            kind=raw["kind"],
            label=raw["label"],
            size=tuple(float(v) for v in raw["size"]) if "size" in raw else None,
            translation=tuple(float(v) for v in raw["translation"]) if "translation" in raw else None,
            rotation=rotation,
            feature=tuple(float(v) for v in raw["feature"]) if "feature" in raw else None,
        )
        try:
            el.obb
        except ValueError as err:
            raise SceneError(f"{where}: {err}") from None
        elements.append(el)
    return make_scene(
        elements,
        n_max=doc["n_max"],
        floor_polygon=doc["floor_polygon"],
        meters_per_cell=doc["meters_per_cell"],
        grid=grid,
        vocab=vocab,
    )


def scene_to_dict(scene: Scene) -> dict:
    elements = []
    for e in scene.elements:
        if e.is_empty:
            continue
        d = {"id": e.id, "kind": e.kind, "label": e.label}
        if e.size is not None:
            d["size"] = list(e.size)
        if e.translation is not None:
            d["translation"] = list(e.translation)
        if e.rotation is not None:
            d["rotation_deg"] = math.degrees(math.atan2(e.rotation[1], e.rotation[0]))
            d["rotation"] = list(e.rotation)
        if e.feature is not None:
            d["feature"] = list(e.feature)
        elements.append(d)
    return {
        "n_max": scene.n_max,
        "meters_per_cell": scene.meters_per_cell,
        "floor_polygon": [list(p) for p in scene.floor_polygon] if scene.floor_polygon else None,
        "elements": elements,
    }


def load_scene(data: bytes | str, vocab: Vocabulary | None = None) -> Scene:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as err:
        raise SceneError(f"invalid JSON: {err}") from None
    return scene_from_dict(doc, vocab)


def save_scene(scene: Scene) -> bytes:
    return json.dumps(scene_to_dict(scene), indent=1).encode()


# --------------------------------------------------------------------------- staging

FIELD_DIMS = {"c": None, "feat": FEATURE_DIM, "s": 3, "t": 3, "r": 2, "rl": LATENT_DIM}
STAGE_FIELDS = {
    1: ("c", "s", "t", "r"),
    2: ("c", "feat", "s", "t", "r"),
    3: ("c", "s", "t", "r", "rl"),
    4: ("c", "s", "t", "r", "rl"),
}
STAGE_TARGETS = {1: ("c",), 2: ("s", "feat"), 3: ("rl",), 4: ("t", "r")}
# stage at which each furniture field is produced
FIELD_STAGE = {"c": 1, "s": 2, "feat": 2, "rl": 3, "t": 4, "r": 4}
ARCH_FIXED = frozenset({"c", "s", "t", "r"})
ALL_FIELDS = frozenset(FIELD_STAGE)


@dataclass
class StageVector:
    """One slot of a stage input: raw field values plus known/target masks."""

    values: dict[str, np.ndarray]
    pe: int
    known: dict[str, bool]
    target: dict[str, bool]
    active: bool = True


def _element_value(e: SceneElement, f: str, vocab: Vocabulary, latent) -> np.ndarray | None:
    if f == "c":
        v = np.zeros(len(vocab))
        v[vocab.index(e.label)] = 1.0
        return v
    if f == "s":
        return None if e.size is None else np.asarray(e.size, dtype=float)
    if f == "t":
        return None if e.translation is None else np.asarray(e.translation, dtype=float)
    if f == "r":
        return None if e.rotation is None else np.asarray(e.rotation, dtype=float)
    if f == "feat":
        return None if e.feature is None else np.asarray(e.feature, dtype=float)
    if f == "rl":
        return None if latent is None else np.asarray(latent, dtype=float)
    raise KeyError(f)


def slot_fields(e: SceneElement, stage: int, fixed: Iterable[str] = ()) -> tuple[set[str], set[str]]:
    """Return (known, target) field sets for one slot at a given stage."""
    layout = STAGE_FIELDS[stage]
    fixed = set(fixed)
    if e.kind == "empty":
        return set(), ({"c"} if stage == 1 else set())
    if e.kind == "architectural":
        fixed |= ARCH_FIXED
        produced = {f for f in layout if f == "rl" and stage > 3}
    else:
        produced = {f for f in layout if FIELD_STAGE[f] < stage}
    known = {f for f in layout if f in fixed or f in produced}
    target = {f for f in STAGE_TARGETS[stage] if f not in known and f in layout}
    if e.kind == "architectural":
        target &= {"rl"}
    return known, target


def encode_stage(
    scene: Scene,
    stage: int,
    generated: Mapping[str, Mapping[str, Sequence[float]]] | None = None,
    vocab: Vocabulary | None = None,
    fixed: Mapping[str, Iterable[str]] | None = None,
) -> list[StageVector]:
    """Node vectors for one stage.

    ``generated`` maps element id -> {field: value} for outputs of earlier stages
    that are not stored on the element itself (relation latents).  ``fixed``
    marks per-element fields supplied by the user; ids in ``scene.conditioned``
    have every field fixed.
    """
    if stage not in STAGE_FIELDS:
        raise StagingError(f"stage must be 1..4, got {stage}")
    vocab = vocab or Vocabulary()
    generated = generated or {}
    fixed = dict(fixed or {})
    out = []
    for e in scene.elements:
        fx = set(fixed.get(e.id, ()))
        if e.id in scene.conditioned:
            fx |= ALL_FIELDS - {"rl"}
        known, target = slot_fields(e, stage, fx)
        values = {}
        for f in FIELD_DIMS:
            dim = len(vocab) if f == "c" else FIELD_DIMS[f]
            v = np.zeros(dim)
            if f in known:
                src = generated.get(e.id, {}).get(f)
                val = np.asarray(src, dtype=float) if src is not None else _element_value(e, f, vocab, None)
                if val is None:
                    raise StagingError(f"stage {stage} needs field {f!r} of element {e.id!r}")
                v = val.copy()
            values[f] = v
        out.append(
            StageVector(
                values=values,
                pe=e.pe,
                known={f: f in known for f in FIELD_DIMS},
                target={f: f in target for f in FIELD_DIMS},
                active=(stage == 1) or not e.is_empty,
            )
        )
    return out


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    permute: bool = True
    rotate: bool = True
    mask_arch_prob: float = 0.0
    floorless_prob: float = 0.0
    completion_prob: float = 0.0


def rotate_scene(scene: Scene, k: int) -> Scene:
    """Rotate every box and the floor grid by k quarter turns about the room center."""
    k %= 4
    if k == 0:
        return scene
    h, w = scene.floor.shape
    if h != w:
        raise SceneError("quarter-turn rotation needs a square floor grid")
    elements = []
    for e in scene.elements:
        t, r = e.translation, e.rotation
        for _ in range(k):
            if t is not None:
                t = (-t[1], t[0], t[2])
            if r is not None:
                r = (-r[1], r[0])
        elements.append(replace(e, translation=t, rotation=r))
    poly = scene.floor_polygon
    if poly is not None:
        for _ in range(k):
            poly = tuple((-y, x) for x, y in poly)
    return replace(scene, elements=tuple(elements), floor=np.rot90(scene.floor, -k).copy(), floor_polygon=poly)


def permute_scene(scene: Scene, order: Sequence[int]) -> Scene:
    elements = [replace(scene.elements[j], pe=i) for i, j in enumerate(order)]
    elements = [SceneElement.empty(i) if e.is_empty else e for i, e in enumerate(elements)]
    return replace(scene, elements=tuple(elements))


def strip_architecture(scene: Scene, ids: Iterable[str]) -> Scene:
    ids = set(ids)
    elements = [SceneElement.empty(e.pe) if e.id in ids else e for e in scene.elements]
    return replace(scene, elements=tuple(elements))


def floorless(scene: Scene) -> Scene:
    """Scene without floor-plan control: all-ones grid and no architecture."""
    s = strip_architecture(scene, [e.id for e in scene.architecture])
    return replace(s, floor=np.ones_like(scene.floor), floor_polygon=None)


def augment(scene: Scene, policy: AugmentPolicy, rng: np.random.Generator) -> Scene:
    if policy.floorless_prob and rng.random() < policy.floorless_prob:
        scene = floorless(scene)
    elif policy.mask_arch_prob:
        drop = [e.id for e in scene.architecture if rng.random() < policy.mask_arch_prob]
        scene = strip_architecture(scene, drop)
    if policy.rotate:
        scene = rotate_scene(scene, int(rng.integers(4)))
    if policy.permute:
        scene = permute_scene(scene, rng.permutation(scene.n_max))
    if policy.completion_prob and rng.random() < policy.completion_prob:
        furn = [e.id for e in scene.furniture]
        if furn:
            count = int(rng.integers(0, len(furn)))
            chosen = rng.choice(len(furn), size=count, replace=False)
            scene = replace(scene, conditioned=frozenset(furn[i] for i in sorted(chosen)))
    return scene


def nonempty_count(scene: Scene) -> int:
    return sum(not e.is_empty for e in scene.elements)
