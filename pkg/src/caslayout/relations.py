"""Pairwise spatial relations between furniture items and architecture.

Every relation of ``src`` is expressed in the local frame of ``dst`` (the
reference box), so labels do not change when the whole room is rotated.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

from .geometry import Obb, footprint_contains, min_distance_obb, min_distance_obb_segment
from .scene import Scene, SceneElement

DIRECTION = "direction"
DISTANCE = "distance"
ALIGNMENT = "alignment"
SYMMETRY = "symmetry"
ARCH_DISTANCE = "arch_distance"

SUBCATEGORIES = {
    DIRECTION: ("left", "right", "front", "behind", "under", "above"),
    DISTANCE: ("attach_to", "adjacent", "distant"),
    ALIGNMENT: ("edge_align", "x_center_align", "y_center_align"),
    SYMMETRY: ("symmetric",),
    ARCH_DISTANCE: ("attach_to", "adjacent", "distant"),
}
CATEGORIES = tuple(SUBCATEGORIES)
FURNITURE_CATEGORIES = (DIRECTION, DISTANCE, ALIGNMENT, SYMMETRY)
# distinct subcategory names, used for one-hot edge features
SUBCATEGORY_NAMES = tuple(dict.fromkeys(s for subs in SUBCATEGORIES.values() for s in subs))

ATTACH_BELOW = 0.2
ADJACENT_BELOW = 1.5
EPS_ALIGN = 0.05
EPS_ANGLE_DEG = 5.0
EPS_FEAT = 1e-6

# far-field half-angle of the front/behind sectors, measured from the local y axis
_SECTOR_HALF = math.radians(60.0)
_RAY_DX, _RAY_DY = math.sin(_SECTOR_HALF), math.cos(_SECTOR_HALF)


@dataclass(frozen=True, order=True)
class RelationEdge:
    src: str
    dst: str
    category: str
    subcategory: str

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("relation edge needs distinct endpoints")
        if self.category not in SUBCATEGORIES:
            raise ValueError(f"unknown relation category {self.category!r}")
        if self.subcategory not in SUBCATEGORIES[self.category]:
            raise ValueError(f"{self.subcategory!r} is not a {self.category} subcategory")

    def as_dict(self) -> dict:
        return {"src": self.src, "dst": self.dst, "category": self.category, "subcategory": self.subcategory}


@dataclass(frozen=True)
class RelationGraph:
    nodes: tuple[str, ...]
    edges: tuple[RelationEdge, ...] = field(default=())

    def __post_init__(self):
        nodes = tuple(self.nodes)
        edges = tuple(sorted(set(self.edges)))
        known = set(nodes)
        seen = set()
        for e in edges:
            if e.src not in known or e.dst not in known:
                raise ValueError(f"edge {e.src}->{e.dst} references an unknown node")
            key = (e.src, e.dst, e.category)
            if key in seen:
                raise ValueError(f"duplicate {e.category} edge {e.src}->{e.dst}")
            seen.add(key)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

    def lookup(self) -> dict[tuple[str, str, str], str]:
        return {(e.src, e.dst, e.category): e.subcategory for e in self.edges}

    def filter(self, keep) -> "RelationGraph":
        return RelationGraph(self.nodes, tuple(e for e in self.edges if keep(e)))

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "edges": [e.as_dict() for e in self.edges]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RelationGraph":
        if set(doc) - {"nodes", "edges"}:
            raise ValueError(f"unknown graph fields {sorted(set(doc) - {'nodes', 'edges'})}")
        edges = []
        for i, raw in enumerate(doc.get("edges", [])):
            if set(raw) != {"src", "dst", "category", "subcategory"}:
                raise ValueError(f"edges[{i}] must have exactly src, dst, category, subcategory")
            edges.append(RelationEdge(raw["src"], raw["dst"], raw["category"], raw["subcategory"]))
        return cls(tuple(doc["nodes"]), tuple(edges))

    @classmethod
    def from_json(cls, text: str | bytes) -> "RelationGraph":
        return cls.from_dict(json.loads(text))


def classify_direction(a: Obb, b: Obb) -> str | None:
    """Where a's center lies relative to b, in b's local frame."""
    center = a.center_xy
    if footprint_contains(b, center):
        za, zb = a.translation[2], b.translation[2]
        if za > zb:
            return "above"
        if za < zb:
            return "under"
        return None
    x, y = b.to_local(center)
    hx, hy = 0.5 * b.size[0], 0.5 * b.size[1]
    # front sector: beyond the front edge and between the rays cast from its endpoints
    if y >= hy and _RAY_DY * (x - hx) <= _RAY_DX * (y - hy) and -_RAY_DY * (x + hx) <= _RAY_DX * (y - hy):
        return "front"
    if y <= -hy and _RAY_DY * (x - hx) <= _RAY_DX * (-hy - y) and -_RAY_DY * (x + hx) <= _RAY_DX * (-hy - y):
        return "behind"
    return "left" if x > 0 else "right"


def distance_band(d: float) -> str:
    if d < ATTACH_BELOW:
        return "attach_to"
    if d < ADJACENT_BELOW:
        return "adjacent"
    return "distant"


def classify_distance(a: Obb, b: Obb) -> str:
    return distance_band(min_distance_obb(a, b))


def _edge_lines(o: Obb):
    """Footprint edges as (unit direction, point on edge) in world space."""
    c, s = o.rotation
    pts = o.corners_xy()
    for i in range(4):
        p, q = pts[i], pts[(i + 1) % 4]
        dx, dy = q[0] - p[0], q[1] - p[1]
        length = math.hypot(dx, dy)
        yield (dx / length, dy / length), ((p[0] + q[0]) / 2, (p[1] + q[1]) / 2)


def _edges_collinear(a: Obb, b: Obb, eps: float, eps_angle: float) -> bool:
    cos_tol = math.cos(math.radians(eps_angle))
    for da, ma in _edge_lines(a):
        for db, pb in _edge_lines(b):
            if abs(da[0] * db[0] + da[1] * db[1]) < cos_tol:
                continue
            # perpendicular offset of a's edge midpoint from b's edge line
            off = abs((ma[0] - pb[0]) * db[1] - (ma[1] - pb[1]) * db[0])
            if off <= eps:
                return True
    return False


def classify_alignment(a: Obb, b: Obb, eps: float = EPS_ALIGN, eps_angle: float = EPS_ANGLE_DEG) -> set[str]:
    x, y = b.to_local(a.center_xy)
    out = set()
    if abs(x) <= eps:
        out.add("x_center_align")
    if abs(y) <= eps:
        out.add("y_center_align")
    if _edges_collinear(a, b, eps, eps_angle):
        out.add("edge_align")
    return out


# one label per (src, dst, alignment): center alignment is the more specific statement
_ALIGNMENT_PRIORITY = ("x_center_align", "y_center_align", "edge_align")


def primary_alignment(labels: set[str]) -> str | None:
    for lab in _ALIGNMENT_PRIORITY:
        if lab in labels:
            return lab
    return None


def classify_symmetry(
    a: SceneElement,
    b: SceneElement,
    eps: float = EPS_ALIGN,
    eps_angle: float = EPS_ANGLE_DEG,
    eps_feat: float = EPS_FEAT,
) -> bool:
    if a.label != b.label or not (a.placed and b.placed):
        return False
    if any(abs(p - q) > eps for p, q in zip(a.size, b.size)):
        return False
    fa, fb = a.feature or (), b.feature or ()
    width = max(len(fa), len(fb))
    fa, fb = fa + (0.0,) * (width - len(fa)), fb + (0.0,) * (width - len(fb))
    if any(abs(p - q) > eps_feat for p, q in zip(fa, fb)):
        return False
    if abs(a.translation[2] - b.translation[2]) > eps:
        return False
    dx = b.translation[0] - a.translation[0]
    dy = b.translation[1] - a.translation[1]
    dist = math.hypot(dx, dy)
    if dist == 0.0:
        return False
    dx, dy = dx / dist, dy / dist
    ya = (-a.rotation[1], a.rotation[0])
    yb = (-b.rotation[1], b.rotation[0])
    # reflect a's +y across the perpendicular bisector of the two centers
    proj = ya[0] * dx + ya[1] * dy
    mx, my = ya[0] - 2 * proj * dx, ya[1] - 2 * proj * dy
    cos_angle = mx * yb[0] + my * yb[1]
    return cos_angle >= math.cos(math.radians(eps_angle))


def arch_distances(scene: Scene) -> list[RelationEdge]:
    walls = [e for e in scene.architecture if e.label == "wall"]
    openings = [e for e in scene.architecture if e.label in ("door", "window")]
    edges = []
    for f in scene.furniture:
        if not f.placed:
            continue
        obb = f.obb
        if walls:
            dists = [(min_distance_obb_segment(obb, w.segment()), w.id) for w in walls]
            d, wid = min(dists)
            edges.append(RelationEdge(f.id, wid, ARCH_DISTANCE, distance_band(d)))
        for o in openings:
            d = min_distance_obb_segment(obb, o.segment())
            edges.append(RelationEdge(f.id, o.id, ARCH_DISTANCE, distance_band(d)))
    return edges


def furniture_pair_edges(a: SceneElement, b: SceneElement) -> list[RelationEdge]:
    """Direction, distance and alignment of a with respect to b."""
    oa, ob = a.obb, b.obb
    edges = []
    direction = classify_direction(oa, ob)
    if direction is not None:
        edges.append(RelationEdge(a.id, b.id, DIRECTION, direction))
    edges.append(RelationEdge(a.id, b.id, DISTANCE, classify_distance(oa, ob)))
    align = primary_alignment(classify_alignment(oa, ob))
    if align is not None:
        edges.append(RelationEdge(a.id, b.id, ALIGNMENT, align))
    return edges


def extract_dense(scene: Scene) -> RelationGraph:
    """Every ordered furniture pair, symmetric pairs once, plus architecture distances."""
    furniture = [e for e in scene.furniture if e.placed]
    edges = []
    for a in furniture:
        for b in furniture:
            if a.id != b.id:
                edges.extend(furniture_pair_edges(a, b))
    for a in furniture:
        for b in furniture:
            if a.id < b.id and classify_symmetry(a, b):
                edges.append(RelationEdge(a.id, b.id, SYMMETRY, "symmetric"))
    edges.extend(arch_distances(scene))
    nodes = tuple(e.id for e in scene.elements if not e.is_empty)
    return RelationGraph(tuple(sorted(nodes)), tuple(edges))


def edges_by_category(graph: RelationGraph) -> dict[str, list[RelationEdge]]:
    out = {c: [] for c in CATEGORIES}
    for e in graph.edges:
        out[e.category].append(e)
    return out
