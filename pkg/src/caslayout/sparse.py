"""Functional zones, anchor selection, graph sparsification and relation entropy."""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .relations import (
    ALIGNMENT,
    ARCH_DISTANCE,
    SUBCATEGORIES,
    RelationEdge,
    RelationGraph,
)
from .scene import Scene

ZONE_TYPES = ("lounging", "dining", "bedding", "lighting", "other")
ANCHORED_ZONES = ("lounging", "dining", "bedding")
CENTER_ALIGNMENTS = ("x_center_align", "y_center_align")


@dataclass(frozen=True)
class ZoneTable:
    zone_of: Mapping[str, str]
    anchor_candidates: Mapping[str, tuple[str, ...]]
    k: int = 1

    def __post_init__(self):
        for label, zone in self.zone_of.items():
            if zone not in ZONE_TYPES:
                raise ValueError(f"label {label!r} mapped to unknown zone {zone!r}")
        for zone, cands in self.anchor_candidates.items():
            if zone not in ANCHORED_ZONES:
                raise ValueError(f"zone {zone!r} cannot have anchors")
            for c in cands:
                if self.zone_of.get(c) != zone:
                    raise ValueError(f"anchor candidate {c!r} is not a {zone} label")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ZoneTable":
        zone_of = {}
        for zone, labels in doc["zones"].items():
            for lab in labels:
                if lab in zone_of:
                    raise ValueError(f"label {lab!r} assigned to two zones")
                zone_of[lab] = zone
        cands = {z: tuple(v) for z, v in doc.get("anchor_candidates", {}).items()}
        return cls(zone_of, cands, int(doc.get("k", 1)))

    @classmethod
    def default(cls) -> "ZoneTable":
        text = resources.files("caslayout.data").joinpath("zones.json").read_text()
        return cls.from_dict(json.loads(text))

    def zone(self, label: str) -> str:
        return self.zone_of.get(label, "other")

    def covers(self, labels: Iterable[str]) -> bool:
        return all(lab in self.zone_of for lab in labels)


@dataclass(frozen=True)
class Zone:
    zone_type: str
    members: tuple[str, ...]
    anchor: str | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("zone must have members")
        if self.anchor is not None and self.anchor not in self.members:
            raise ValueError("anchor must be a zone member")


def assign_zones(scene: Scene, table: ZoneTable | None = None) -> list[Zone]:
    """Group furniture by zone type, splitting a type into one cluster per anchor."""
    table = table or ZoneTable.default()
    by_type: dict[str, list] = defaultdict(list)
    for e in scene.furniture:
        by_type[table.zone(e.label)].append(e)
    zones = []
    for zt in ZONE_TYPES:
        members = sorted(by_type.get(zt, []), key=lambda e: e.id)
        if not members:
            continue
        anchor_labels = []
        if zt in ANCHORED_ZONES:
            present = {e.label for e in members}
            anchor_labels = [c for c in table.anchor_candidates.get(zt, ()) if c in present][: table.k]
        anchors = [e for e in members if e.label in anchor_labels]
        if not anchors:
            zones.append(Zone(zt, tuple(e.id for e in members), None))
            continue
        clusters = {a.id: [a.id] for a in anchors}
        for e in members:
            if e.id in clusters:
                continue
            if e.translation is None:
                raise ValueError(f"element {e.id!r} must be placed to join a zone cluster")
            best = min(
                anchors,
                key=lambda a: (
                    (a.translation[0] - e.translation[0]) ** 2 + (a.translation[1] - e.translation[1]) ** 2,
                    a.id,
                ),
            )
            clusters[best.id].append(e.id)
        for a in anchors:
            zones.append(Zone(zt, tuple(sorted(clusters[a.id])), a.id))
    return zones


@dataclass(frozen=True)
class ZoneIndex:
    """Per-node lookup of cluster membership used by the sparsity rule."""

    cluster: Mapping[str, int]
    zone_type: Mapping[str, str]
    anchors: frozenset

    @classmethod
    def build(cls, zones: Sequence[Zone]) -> "ZoneIndex":
        cluster, ztype, anchors = {}, {}, set()
        for i, z in enumerate(zones):
            for m in z.members:
                if m in cluster:
                    raise ValueError(f"element {m!r} is in two zones")
                cluster[m] = i
                ztype[m] = z.zone_type
            if z.anchor is not None:
                anchors.add(z.anchor)
        return cls(cluster, ztype, frozenset(anchors))

    def admits(self, src: str, dst: str, category: str, subcategory: str | None = None) -> bool:
        """Whether a furniture-furniture (src, dst, category) slot survives sparsification.

        With ``subcategory`` None only the category-level rule is checked.
        """
        zs, zd = self.zone_type[src], self.zone_type[dst]
        if "lighting" in (zs, zd):
            if category != ALIGNMENT:
                return False
            return subcategory is None or subcategory in CENTER_ALIGNMENTS
        if "other" in (zs, zd):
            return False
        if self.cluster[src] == self.cluster[dst]:
            return True
        return src in self.anchors and dst in self.anchors


def sparsify(dense: RelationGraph, zones: Sequence[Zone]) -> RelationGraph:
    index = ZoneIndex.build(zones)
    node_set = set(dense.nodes)
    missing = set(index.cluster) - node_set
    if missing:
        raise ValueError(f"zones reference nodes missing from the graph: {sorted(missing)}")

    def keep(e: RelationEdge) -> bool:
        if e.category == ARCH_DISTANCE:
            return True
        for end in (e.src, e.dst):
            if end not in index.cluster:
                raise ValueError(f"graph node {end!r} has no zone")
        return index.admits(e.src, e.dst, e.category, e.subcategory)

    return dense.filter(keep)


def extract_sparse(scene: Scene, table: ZoneTable | None = None) -> RelationGraph:
    from .relations import extract_dense

    return sparsify(extract_dense(scene), assign_zones(scene, table))


@dataclass
class EntropyReport:
    category: str
    n: int
    m: int
    frequencies: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    H: float = 0.0

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "n": self.n,
            "m": self.m,
            "H": self.H,
            "pairs": [
                {"src": s, "dst": d, "frequencies": dict(sorted(freq.items()))}
                for (s, d), freq in sorted(self.frequencies.items())
            ],
        }

    def to_csv(self) -> str:
        subs = SUBCATEGORIES[self.category]
        lines = ["src,dst," + ",".join(subs)]
        for (s, d), freq in sorted(self.frequencies.items()):
            lines.append(f"{s},{d}," + ",".join(repr(freq.get(x, 0.0)) for x in subs))
        return "\n".join(lines) + "\n"


def count_relation_pairs(
    graphs: Iterable[RelationGraph], labels: Iterable[Mapping[str, str]], category: str
) -> Counter:
    """Counts of (src label, dst label, subcategory); merge partial results with ``+``."""
    counts: Counter = Counter()
    for g, lab in zip(graphs, labels):
        for e in g.edges:
            if e.category == category:
                counts[(lab[e.src], lab[e.dst], e.subcategory)] += 1
    return counts


def entropy_from_counts(counts: Mapping[tuple[str, str, str], int], category: str) -> EntropyReport:
    if category not in SUBCATEGORIES:
        raise ValueError(f"unknown relation category {category!r}")
    per_pair: dict[tuple[str, str], Counter] = defaultdict(Counter)
    for (s, d, sub), c in counts.items():
        per_pair[(s, d)][sub] += c
    if not per_pair:
        raise ValueError(f"no {category} relations in the dataset")
    total_h = 0.0
    freqs = {}
    for key in sorted(per_pair):
        cnt = per_pair[key]
        total = sum(cnt.values())
        p = {sub: c / total for sub, c in sorted(cnt.items())}
        freqs[key] = p
        total_h -= sum(v * math.log2(v) for v in p.values() if v > 0)
    n = len(per_pair)
    return EntropyReport(category, n, len(SUBCATEGORIES[category]), freqs, total_h / n)


def relation_entropy(
    graphs: Sequence[RelationGraph], labels: Sequence[Mapping[str, str]], category: str
) -> EntropyReport:
    """Average per-pair entropy of a relation category across a dataset.

    Pairs are keyed by (src label, dst label); ``labels`` maps node ids to
    furniture labels for each graph.
    """
    if not graphs:
        raise ValueError("relation entropy needs at least one graph")
    return entropy_from_counts(count_relation_pairs(graphs, labels, category), category)


def scene_labels(scene: Scene) -> dict[str, str]:
    return {e.id: e.label for e in scene.elements if not e.is_empty}
