"""Synthetic scene presets with known ground-truth relations.

Each preset draws a rectangular room with four walls and a door, then places
furniture by construction so the intended relations hold exactly.  These
corpora stand in for a licensed scene dataset at desk scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import FEATURE_DIM, SceneElement, Vocabulary, make_scene

# nominal (width along local x, depth along local y, height)
NOMINAL_SIZES = {
    "dining_table": (1.4, 0.9, 0.75),
    "dining_chair": (0.45, 0.45, 0.9),
    "chinese_chair": (0.5, 0.5, 0.95),
    "multi_seat_sofa": (2.1, 0.9, 0.85),
    "armchair": (0.8, 0.8, 0.85),
    "coffee_table": (1.1, 0.6, 0.45),
    "tv_stand": (1.6, 0.4, 0.55),
    "double_bed": (1.8, 2.1, 1.0),
    "nightstand": (0.5, 0.4, 0.55),
    "wardrobe": (1.6, 0.6, 2.1),
    "pendant_lamp": (0.5, 0.5, 0.6),
    "ceiling_lamp": (0.6, 0.6, 0.3),
}
FEATURE_VARIANTS = 4
WALL_THICKNESS = 0.02
WALL_HEIGHT = 2.6
PRESETS = ("chair-table", "sofa-triad", "nightstand-bedroom", "two-zone")


@dataclass(frozen=True)
class CatalogEntry:
    label: str
    variant: int
    size_min: tuple[float, float, float]
    size_max: tuple[float, float, float]
    feature: tuple[float, ...]

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "variant": self.variant,
            "size_min": list(self.size_min),
            "size_max": list(self.size_max),
            "feature": list(self.feature),
        }


def feature_code(vocab: Vocabulary, label: str, variant: int) -> tuple[float, ...]:
    """One-hot style feature code for a catalog variant, treated as continuous."""
    idx = (vocab.furniture.index(label) * 5 + variant) % FEATURE_DIM
    v = [0.0] * FEATURE_DIM
    v[idx] = 1.0
    return tuple(v)


def build_catalog(vocab: Vocabulary | None = None) -> list[CatalogEntry]:
    vocab = vocab or Vocabulary()
    out = []
    for label in vocab.furniture:
        nominal = NOMINAL_SIZES.get(label, (0.8, 0.6, 0.8))
        for v in range(FEATURE_VARIANTS):
            scale = 0.9 + 0.05 * v
            lo = tuple(round(x * scale * 0.95, 4) for x in nominal)
            hi = tuple(round(x * scale * 1.05, 4) for x in nominal)
            out.append(CatalogEntry(label, v, lo, hi, feature_code(vocab, label, v)))
    return out


class SceneSynthesizer:
    """Draws scenes from a named preset; all randomness comes from ``seed``."""

    def __init__(self, preset: str = "chair-table", seed: int = 0, n_max: int = 16, vocab=None,
                 floor_plan: bool = True):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
        self.preset = preset
        self.rng = np.random.default_rng(seed)
        self.n_max = n_max
        self.vocab = vocab or Vocabulary()
        self.floor_plan = floor_plan
        self._catalog = {}
        for entry in build_catalog(self.vocab):
            self._catalog.setdefault(entry.label, []).append(entry)

    def sample(self, count: int) -> list:
        return [self._one(i) for i in range(count)]

    # ------------------------------------------------------------------ helpers

    def _item(self, label: str, idx: int, center, deg: float):
        entry = self._catalog[label][int(self.rng.integers(FEATURE_VARIANTS))]
        size = tuple(float(self.rng.uniform(lo, hi)) for lo, hi in zip(entry.size_min, entry.size_max))
        rad = math.radians(deg)
        return {
            "id": f"{label}_{idx}",
            "label": label,
            "size": size,
            "center": (float(center[0]), float(center[1])),
            "deg": deg,
            "rotation": (math.cos(rad), math.sin(rad)),
            "feature": entry.feature,
        }

    @staticmethod
    def _local(base, u, v):
        """World xy of the point (u, v) in the local frame of placed item ``base``."""
        c, s = base["rotation"]
        x, y = base["center"]
        return (x + c * u - s * v, y + s * u + c * v)

    def _room(self, width, depth):
        hw, hd = width / 2, depth / 2
        walls = [
            ("wall_0", (0.0, -hd), 0.0, width),
            ("wall_1", (hw, 0.0), 90.0, depth),
            ("wall_2", (0.0, hd), 180.0, width),
            ("wall_3", (-hw, 0.0), -90.0, depth),
        ]
        elements = []
        for wid, (x, y), deg, length in walls:
            rad = math.radians(deg)
            elements.append(
                SceneElement(wid, "architectural", "wall", (length, WALL_THICKNESS, WALL_HEIGHT),
                             (x, y, WALL_HEIGHT / 2), (math.cos(rad), math.sin(rad)))
            )
        wall = int(self.rng.integers(4))
        _, (x, y), deg, length = walls[wall]
        offset = float(self.rng.uniform(-0.3, 0.3)) * (length - 1.0)
        rad = math.radians(deg)
        dx, dy = math.cos(rad) * offset, math.sin(rad) * offset
        elements.append(
            SceneElement("door_0", "architectural", "door", (0.9, WALL_THICKNESS, 2.0),
                         (x + dx, y + dy, 1.0), (math.cos(rad), math.sin(rad)))
        )
        polygon = [(-hw, -hd), (hw, -hd), (hw, hd), (-hw, hd)]
        return elements, polygon

    def _finish(self, items, room_w, room_d):
        arch, polygon = self._room(room_w, room_d)
        furniture = []
        for it in items:
            z = it.get("z", it["size"][2] / 2)
            furniture.append(
                SceneElement(it["id"], "furniture", it["label"], it["size"], (it["center"][0], it["center"][1], z),
                             it["rotation"], it["feature"])
            )
        if not self.floor_plan:
            return make_scene(furniture, n_max=self.n_max, vocab=self.vocab)
        return make_scene(arch + furniture, n_max=self.n_max, floor_polygon=polygon, vocab=self.vocab)

    def _quarter(self):
        return float(90 * int(self.rng.integers(4)))

    # ------------------------------------------------------------------ presets

    def _one(self, i):
        return getattr(self, "_" + self.preset.replace("-", "_"))()

    def _chair_table(self):
        room_w, room_d = self.rng.uniform(4.5, 6.0, 2)
        deg = self._quarter()
        table = self._item("dining_table", 0, self.rng.uniform(-0.6, 0.6, 2), deg)
        sides = sorted(self.rng.choice(4, size=int(self.rng.integers(1, 5)), replace=False))
        items = [table]
        tx, ty = table["size"][0] / 2, table["size"][1] / 2
        for k, side in enumerate(sides):
            chair = self._item("dining_chair", k, (0, 0), 0.0)
            gap = float(self.rng.uniform(0.02, 0.1))
            half = chair["size"][1] / 2
            # side 0: front of table, 1: behind, 2: left (+x), 3: right (-x); chair faces the table
            u, v, face = {
                0: (0.0, ty + gap + half, 180.0),
                1: (0.0, -(ty + gap + half), 0.0),
                2: (tx + gap + half, 0.0, 90.0),
                3: (-(tx + gap + half), 0.0, -90.0),
            }[int(side)]
            chair_deg = deg + face
            rad = math.radians(chair_deg)
            chair.update(center=self._local(table, u, v), deg=chair_deg, rotation=(math.cos(rad), math.sin(rad)))
            items.append(chair)
        return self._finish(items, room_w, room_d)

    def _sofa_triad(self):
        room_w, room_d = self.rng.uniform(5.0, 6.0, 2)
        deg = self._quarter()
        sofa = self._item("multi_seat_sofa", 0, self.rng.uniform(-0.3, 0.3, 2), deg)
        gap = float(self.rng.uniform(0.3, 0.5))
        coffee = self._item("coffee_table", 0, (0, 0), deg)
        coffee["center"] = self._local(sofa, 0.0, sofa["size"][1] / 2 + gap + coffee["size"][1] / 2)
        tv = self._item("tv_stand", 0, (0, 0), deg + 180.0)
        tv_gap = float(self.rng.uniform(1.0, 1.3))
        tv["center"] = self._local(coffee, 0.0, coffee["size"][1] / 2 + tv_gap + tv["size"][1] / 2)
        rad = math.radians(deg + 180.0)
        tv["rotation"] = (math.cos(rad), math.sin(rad))
        return self._finish([sofa, coffee, tv], room_w, room_d)

    def _nightstand_bedroom(self):
        room_w, room_d = self.rng.uniform(4.0, 5.0, 2)
        bed = self._item("double_bed", 0, (0, 0), 0.0)
        bed["center"] = (float(self.rng.uniform(-0.5, 0.5)), -room_d / 2 + bed["size"][1] / 2 + 0.01)
        label_entry = self._catalog["nightstand"][int(self.rng.integers(FEATURE_VARIANTS))]
        size = tuple(float(self.rng.uniform(lo, hi)) for lo, hi in zip(label_entry.size_min, label_entry.size_max))
        items = [bed]
        for k, sign in enumerate((1, -1)):
            ns = {
                "id": f"nightstand_{k}",
                "label": "nightstand",
                "size": size,
                "center": self._local(bed, sign * (bed["size"][0] / 2 + 0.05 + size[0] / 2),
                                      -bed["size"][1] / 2 + size[1] / 2),
                "deg": 0.0,
                "rotation": (1.0, 0.0),
                "feature": label_entry.feature,
            }
            items.append(ns)
        if self.rng.random() < 0.5:
            wd = self._item("wardrobe", 0, (0, 0), 90.0)
            wd["center"] = (-room_w / 2 + wd["size"][1] / 2 + 0.02, float(self.rng.uniform(0.0, 0.8)))
            items.append(wd)
        scene = self._finish(items, room_w, room_d)
        from .scene import rotate_scene

        return rotate_scene(scene, int(self.rng.integers(4)))

    def _two_zone(self):
        room_w, room_d = 7.0, 7.0
        # lounging zone: sofa, coffee table in front, tv stand facing the sofa
        deg_a = self._quarter()
        sofa = self._item("multi_seat_sofa", 0, (0, 0), deg_a)
        zone_a_center = np.array([-1.6, float(self.rng.uniform(-0.4, 0.4))])
        sofa["center"] = tuple(zone_a_center + self._rot(deg_a, (0.0, -1.2)))
        coffee = self._item("coffee_table", 0, (0, 0), deg_a)
        coffee["center"] = self._local(sofa, 0.0, sofa["size"][1] / 2 + 0.4 + coffee["size"][1] / 2)
        tv = self._item("tv_stand", 0, (0, 0), deg_a + 180.0)
        tv["center"] = self._local(coffee, 0.0, coffee["size"][1] / 2 + 1.1 + tv["size"][1] / 2)
        # dining zone: table with one chair in front and one behind
        deg_b = self._quarter()
        table = self._item("dining_table", 0, (1.6, float(self.rng.uniform(-1.2, 1.2))), deg_b)
        front = self._item("dining_chair", 0, (0, 0), deg_b + 180.0)
        front["center"] = self._local(table, 0.0, table["size"][1] / 2 + 0.05 + front["size"][1] / 2)
        back = self._item("chinese_chair", 0, (0, 0), deg_b)
        back["center"] = self._local(table, 0.0, -(table["size"][1] / 2 + 0.05 + back["size"][1] / 2))
        items = [sofa, coffee, tv, table, front, back]
        if self.rng.random() < 0.5:
            lamp = self._item("pendant_lamp", 0, table["center"], deg_b)
            lamp["z"] = 2.0
            items.append(lamp)
        for it in items:
            if "rotation" in it:
                rad = math.radians(it["deg"])
                it["rotation"] = (math.cos(rad), math.sin(rad))
        return self._finish(items, room_w, room_d)

    @staticmethod
    def _rot(deg, v):
        rad = math.radians(deg)
        c, s = math.cos(rad), math.sin(rad)
        return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def synth_scenes(preset: str, count: int, seed: int = 0, **kwargs) -> list:
    return SceneSynthesizer(preset, seed, **kwargs).sample(count)
