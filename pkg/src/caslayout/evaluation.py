"""Layout metrics and deterministic top-down rendering."""
from __future__ import annotations

import json
import math
from collections import Counter
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .geometry import footprint_contains, iou_3d, min_distance_obb_segment, points_in_polygon
from .relations import (
    ALIGNMENT,
    ARCH_DISTANCE,
    CATEGORIES,
    DIRECTION,
    DISTANCE,
    SYMMETRY,
    RelationGraph,
    classify_alignment,
    classify_direction,
    classify_distance,
    classify_symmetry,
    distance_band,
)
from .scene import Scene, Vocabulary, grid_centers

TKL_ALPHA = 1e-6
WALK_CLEARANCE = 0.25  # half of the 0.5 m minimum passage width
HEAD_CLEARANCE = 1.8  # items whose bottom is above this do not block walking
RENDER_SIZE = 256


def tkl(generated: Sequence[Scene], reference: Sequence[Scene], vocab: Vocabulary | None = None,
        alpha: float = TKL_ALPHA) -> float:
    """KL(P_gen || P_ref) between furniture-category frequencies, with additive smoothing."""
    if not generated or not reference:
        raise ValueError("tkl needs non-empty generated and reference sets")
    vocab = vocab or Vocabulary()
    labels = vocab.furniture

    def dist(scenes):
        counts = Counter(e.label for s in scenes for e in s.furniture)
        c = np.array([counts.get(lab, 0) for lab in labels], dtype=float)
        return (c + alpha) / (c.sum() + alpha * len(labels))

    p, q = dist(generated), dist(reference)
    return float(np.sum(p * np.log(p / q)))


def scene_iou(scene: Scene) -> float:
    """Mean pairwise 3D IoU of placed furniture, in percent; 0 with fewer than two items."""
    boxes = [e.obb for e in scene.furniture if e.placed]
    if len(boxes) < 2:
        return 0.0
    vals = [iou_3d(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1 :]]
    return 100.0 * float(np.mean(vals))


def _edge_holds(scene_ids: Mapping, e) -> bool:
    a, b = scene_ids[e.src], scene_ids[e.dst]
    if e.category == ARCH_DISTANCE:
        return distance_band(min_distance_obb_segment(a.obb, b.segment())) == e.subcategory
    if e.category == DIRECTION:
        return classify_direction(a.obb, b.obb) == e.subcategory
    if e.category == DISTANCE:
        return classify_distance(a.obb, b.obb) == e.subcategory
    if e.category == ALIGNMENT:
        return e.subcategory in classify_alignment(a.obb, b.obb)
    if e.category == SYMMETRY:
        return classify_symmetry(a, b)
    raise ValueError(e.category)


def relation_hits(scene: Scene, target: RelationGraph) -> dict[str, tuple[int, int]]:
    """Per category, (edges that hold, edges requested); counts pool across scenes."""
    ids = scene.by_id()
    hits = {c: [0, 0] for c in CATEGORIES}
    for e in target.edges:
        for end in (e.src, e.dst):
            if end not in ids or not ids[end].placed:
                raise ValueError(f"target edge references {end!r}, which is not a placed scene element")
        hits[e.category][1] += 1
        hits[e.category][0] += _edge_holds(ids, e)
    return {c: (k, n) for c, (k, n) in hits.items()}


def relation_satisfaction(scene: Scene, target: RelationGraph) -> dict[str, float]:
    """Per category, percentage of target edges that hold in the scene (100 when none requested)."""
    return {c: 100.0 if n == 0 else 100.0 * k / n for c, (k, n) in relation_hits(scene, target).items()}


def _footprint_samples(obb, step: float, shrink: float) -> np.ndarray:
    hx = max(0.5 * obb.size[0] - shrink, 0.0)
    hy = max(0.5 * obb.size[1] - shrink, 0.0)
    nx = max(2, int(math.ceil(2 * hx / step)) + 1)
    ny = max(2, int(math.ceil(2 * hy / step)) + 1)
    u, v = np.meshgrid(np.linspace(-hx, hx, nx), np.linspace(-hy, hy, ny))
    c, s = obb.rotation
    x = obb.translation[0] + c * u - s * v
    y = obb.translation[1] + s * u + c * v
    return np.stack([x.ravel(), y.ravel()], 1)


def _cells(points: np.ndarray, shape, mpc: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = shape
    col = np.floor(points[:, 0] / mpc + w / 2).astype(int)
    row = np.floor(points[:, 1] / mpc + h / 2).astype(int)
    inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    return row, col, inside


def is_outside(scene: Scene, element) -> bool:
    """Whether some part of the footprint falls on a non-floor cell.

    Footprints are shrunk by half a cell so that items flush against the room
    boundary are not flagged by the discretization alone.
    """
    mpc = scene.meters_per_cell
    pts = _footprint_samples(element.obb, 0.5 * mpc, 0.5 * mpc)
    row, col, inside = _cells(pts, scene.floor.shape, mpc)
    if not inside.all():
        return True
    return bool((scene.floor[row, col] == 0).any())


def r_out(scene: Scene) -> float:
    items = [e for e in scene.furniture if e.placed]
    if not items:
        return 0.0
    return 100.0 * sum(is_outside(scene, e) for e in items) / len(items)


def occupancy(scene: Scene) -> np.ndarray:
    """Cells whose centers lie under a ground-level furniture footprint."""
    gx, gy = grid_centers(scene.floor.shape, scene.meters_per_cell)
    pts = np.stack([gx.ravel(), gy.ravel()], 1)
    occ = np.zeros(len(pts), dtype=bool)
    for e in scene.furniture:
        if not e.placed or e.obb.z_interval[0] > HEAD_CLEARANCE:
            continue
        occ |= points_in_polygon(pts, e.obb.corners_xy())
        # boundary-inclusive fix-up for cell centers exactly on an edge
        near = ~occ & (np.hypot(pts[:, 0] - e.translation[0], pts[:, 1] - e.translation[1])
                       <= 0.5 * math.hypot(e.size[0], e.size[1]) + 1e-9)
        for k in np.flatnonzero(near):
            occ[k] = footprint_contains(e.obb, pts[k])
    return occ.reshape(scene.floor.shape)


def disc(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def walkable(scene: Scene) -> np.ndarray:
    """Free floor eroded by the clearance disc: cells where a 0.5 m wide walker fits."""
    free = (scene.floor > 0) & ~occupancy(scene)
    radius = int(math.ceil(WALK_CLEARANCE / scene.meters_per_cell - 1e-9))
    return ndimage.binary_erosion(free, structure=disc(radius), border_value=0)


def r_walk(scene: Scene) -> float:
    """Largest 4-connected walkable component over all walkable cells (0 when nothing is walkable)."""
    free = walkable(scene)
    total = int(free.sum())
    if total == 0:
        return 0.0
    labels, n = ndimage.label(free, structure=ndimage.generate_binary_structure(2, 1))
    largest = np.bincount(labels.ravel())[1:].max()
    return float(largest) / total


def metrics_report(scenes: Sequence[Scene], reference: Sequence[Scene] | None = None,
                   targets: Sequence[RelationGraph] | None = None, vocab: Vocabulary | None = None) -> dict:
    """Dataset-level means of the per-scene metrics (scene mean first, then dataset mean)."""
    rep = {
        "count": len(scenes),
        "scene_iou": float(np.mean([scene_iou(s) for s in scenes])) if scenes else 0.0,
        "r_out": float(np.mean([r_out(s) for s in scenes])) if scenes else 0.0,
        "r_walk": float(np.mean([r_walk(s) for s in scenes])) if scenes else 0.0,
    }
    if reference:
        rep["tkl"] = tkl(scenes, reference, vocab)
    if targets is not None:
        per = [relation_satisfaction(s, g) for s, g in zip(scenes, targets)]
        rep["relation_satisfaction"] = {c: float(np.mean([p[c] for p in per])) for c in CATEGORIES}
    return rep


# --------------------------------------------------------------------------- rendering


@lru_cache(maxsize=None)
def default_palette() -> dict:
    text = resources.files("caslayout.data").joinpath("palette.json").read_text()
    return {k: tuple(v) for k, v in json.loads(text).items()}


def render_topdown(scene: Scene, palette: Mapping | None = None, size: int = RENDER_SIZE,
                   draw_floor: bool = True) -> np.ndarray:
    """(size, size, 3) uint8 image over the floor-grid extent, +y up, painter's order by z then id."""
    palette = palette or default_palette()
    h, w = scene.floor.shape
    ext_x, ext_y = w * scene.meters_per_cell, h * scene.meters_per_cell
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = palette["background"]
    cols = (np.arange(size) + 0.5) / size * ext_x - ext_x / 2
    rows = ext_y / 2 - (np.arange(size) + 0.5) / size * ext_y
    px, py = np.meshgrid(cols, rows)
    pts = np.stack([px.ravel(), py.ravel()], 1)
    if draw_floor:
        r, c, inside = _cells(pts, scene.floor.shape, scene.meters_per_cell)
        on = np.zeros(len(pts), dtype=bool)
        on[inside] = scene.floor[r[inside], c[inside]] > 0
        img.reshape(-1, 3)[on] = palette["floor"]
    items = [e for e in scene.elements if not e.is_empty and e.placed]
    items.sort(key=lambda e: (e.kind != "architectural", e.translation[2], e.id))
    flat = img.reshape(-1, 3)
    for e in items:
        color = palette.get(e.label)
        if color is None:
            raise KeyError(f"palette has no color for {e.label!r}")
        flat[points_in_polygon(pts, e.obb.corners_xy())] = color
    return img


def to_ppm(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def from_ppm(data: bytes) -> np.ndarray:
    magic, dims, _maxval, payload = data.split(b"\n", 3)
    if magic != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
