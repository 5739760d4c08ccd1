"""Exact computations on upright oriented bounding boxes.

Boxes only rotate about the vertical axis, so every 3D query factors into a
2D footprint query and a 1D interval query along z.  All functions are pure
and operate in double precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ROTATION_TOL = 1e-9
# boundary slack for point-in-footprint; absorbs rounding of the frame transform
CONTAIN_TOL = 1e-9

Point = tuple[float, float]


@dataclass(frozen=True)
class Obb:
    """Upright box: size and center translation in meters, yaw as (cos, sin).

    Local +x is "left", local +y is "front" and +z is up.
    """

    size: tuple[float, float, float]
    translation: tuple[float, float, float]
    rotation: tuple[float, float]

    def __post_init__(self):
        size = tuple(float(v) for v in self.size)
        translation = tuple(float(v) for v in self.translation)
        rotation = tuple(float(v) for v in self.rotation)
        if len(size) != 3 or len(translation) != 3 or len(rotation) != 2:
            raise ValueError("Obb needs a 3-vector size, 3-vector translation and 2-vector rotation")
        if not all(v > 0 for v in size):
            raise ValueError(f"Obb size must be positive, got {size}")
        if not all(math.isfinite(v) for v in size + translation + rotation):
            raise ValueError("Obb fields must be finite")
        norm = rotation[0] * rotation[0] + rotation[1] * rotation[1]
        if abs(norm - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation {rotation} is not a unit vector")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "rotation", rotation)

    @classmethod
    def from_angle(cls, size, translation, degrees: float) -> "Obb":
        rad = math.radians(degrees)
        return cls(size, translation, (math.cos(rad), math.sin(rad)))

    @property
    def angle_deg(self) -> float:
        return math.degrees(math.atan2(self.rotation[1], self.rotation[0]))

    @property
    def center_xy(self) -> Point:
        return (self.translation[0], self.translation[1])

    @property
    def z_interval(self) -> tuple[float, float]:
        half = 0.5 * self.size[2]
        return (self.translation[2] - half, self.translation[2] + half)

    def to_local(self, p: Sequence[float]) -> Point:
        """World xy point expressed in this box's local frame."""
        c, s = self.rotation
        dx = p[0] - self.translation[0]
        dy = p[1] - self.translation[1]
        return (c * dx + s * dy, -s * dx + c * dy)

    def to_world(self, u: float, v: float) -> Point:
        c, s = self.rotation
        return (self.translation[0] + (c * u - s * v), self.translation[1] + (s * u + c * v))

    def corners_xy(self) -> list[Point]:
        """Footprint corners in counter-clockwise order."""
        hx, hy = 0.5 * self.size[0], 0.5 * self.size[1]
        return [self.to_world(u, v) for u, v in ((-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy))]

    def rotated_quarter(self, k: int) -> "Obb":
        """Rotate box and its placement about the room center by k * 90 degrees (exact)."""
        tx, ty, tz = self.translation
        c, s = self.rotation
        for _ in range(k % 4):
            tx, ty = -ty, tx
            c, s = -s, c
        return Obb(self.size, (tx, ty, tz), (c, s))


@dataclass(frozen=True)
class Segment2D:
    """Architectural element seen from above: a segment with an inward normal."""

    a: Point
    b: Point
    normal: Point

    def __post_init__(self):
        a = (float(self.a[0]), float(self.a[1]))
        b = (float(self.b[0]), float(self.b[1]))
        n = (float(self.normal[0]), float(self.normal[1]))
        if a == b:
            raise ValueError("segment endpoints coincide")
        dx, dy = b[0] - a[0], b[1] - a[1]
        length = math.hypot(dx, dy)
        if abs(math.hypot(*n) - 1.0) > ROTATION_TOL:
            raise ValueError("segment normal must be a unit vector")
        if abs((dx * n[0] + dy * n[1]) / length) > ROTATION_TOL:
            raise ValueError("segment normal is not perpendicular to the segment")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "normal", n)

    @classmethod
    def from_obb(cls, o: Obb) -> "Segment2D":
        """Collapse a wall/door/window box onto its local x axis; normal is its +y."""
        hx = 0.5 * o.size[0]
        _, yhat = local_frame(o)
        return cls(o.to_world(-hx, 0.0), o.to_world(hx, 0.0), yhat)


def local_frame(o: Obb) -> tuple[Point, Point]:
    """World directions of the box's local +x ("left") and +y ("front")."""
    c, s = o.rotation
    return (c, s), (-s, c)


def _point_segment_sq(p: Point, a: Point, b: Point) -> float:
    abx, aby = b[0] - a[0], b[1] - a[1]
    apx, apy = p[0] - a[0], p[1] - a[1]
    denom = abx * abx + aby * aby
    if denom == 0.0:
        return apx * apx + apy * apy
    u = (apx * abx + apy * aby) / denom
    u = min(1.0, max(0.0, u))
    dx, dy = apx - u * abx, apy - u * aby
    return dx * dx + dy * dy


def _edges(poly: Sequence[Point]):
    n = len(poly)
    for i in range(n):
        yield poly[i], poly[(i + 1) % n]


def _separated(p: Sequence[Point], q: Sequence[Point]) -> bool:
    """Separating-axis test for closed convex sets (touching is not separated)."""
    for poly in (p, q):
        for a, b in _edges(poly):
            nx, ny = -(b[1] - a[1]), b[0] - a[0]
            if nx == 0.0 and ny == 0.0:
                continue
            pp = [nx * x + ny * y for x, y in p]
            qq = [nx * x + ny * y for x, y in q]
            if max(pp) < min(qq) or max(qq) < min(pp):
                return True
    return False


def convex_distance_2d(p: Sequence[Point], q: Sequence[Point]) -> float:
    """Minimum distance between two closed convex polygons (segments allowed)."""
    if not _separated(p, q):
        return 0.0
    best = math.inf
    for v in p:
        for a, b in _edges(q):
            best = min(best, _point_segment_sq(v, a, b))
    for v in q:
        for a, b in _edges(p):
            best = min(best, _point_segment_sq(v, a, b))
    return math.sqrt(best)


def _interval_gap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(0.0, b[0] - a[1], a[0] - b[1])


def min_distance_obb(a: Obb, b: Obb) -> float:
    """Minimum distance between two solid boxes; 0 when they touch or overlap."""
    dxy = convex_distance_2d(a.corners_xy(), b.corners_xy())
    dz = _interval_gap(a.z_interval, b.z_interval)
    if dz == 0.0:
        return dxy
    return math.hypot(dxy, dz)


def min_distance_obb_segment(o: Obb, s: Segment2D) -> float:
    """Top-down distance from a box footprint to a wall segment."""
    return convex_distance_2d(o.corners_xy(), [s.a, s.b])


def footprint_contains(o: Obb, p: Sequence[float]) -> bool:
    lx, ly = o.to_local(p)
    return abs(lx) <= 0.5 * o.size[0] + CONTAIN_TOL and abs(ly) <= 0.5 * o.size[1] + CONTAIN_TOL


def polygon_area(poly: Sequence[Point]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman clip of `subject` by the counter-clockwise convex `clip`."""
    out = list(subject)
    for a, b in _edges(clip):
        if not out:
            break
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        for i, cur in enumerate(inp):
            prev = inp[i - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
    return out


def _intersect(p: Point, q: Point, sp: float, sq: float) -> Point:
    u = sp / (sp - sq)
    return (p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1]))


def intersection_volume(a: Obb, b: Obb) -> float:
    za, zb = a.z_interval, b.z_interval
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0:
        return 0.0
    area = abs(polygon_area(clip_convex(a.corners_xy(), b.corners_xy())))
    return area * dz


def iou_3d(a: Obb, b: Obb) -> float:
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return inter / (va + vb - inter)


def points_in_polygon(points: np.ndarray, polygon: Sequence[Point]) -> np.ndarray:
    """Even-odd rule membership for an (N, 2) array of points."""
    poly = np.asarray(polygon, dtype=float)
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    xj, yj = poly[-1]
    for xi, yi in poly:
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= crosses & (x < xcross)
        xj, yj = xi, yi
    return inside
