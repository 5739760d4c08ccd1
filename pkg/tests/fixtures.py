"""Hand-built scenes shared by several test modules."""
from caslayout.scene import SceneElement, make_scene
from caslayout.synth import feature_code
from caslayout.scene import Vocabulary

VOCAB = Vocabulary()


def wall(i, length, center, deg):
    return SceneElement(f"wall_{i}", "architectural", "wall", (length, 0.02, 2.6), (*center, 1.3), _rot(deg))


def _rot(deg):
    import math

    rad = math.radians(deg)
    return (round(math.cos(rad), 15) + 0.0, round(math.sin(rad), 15) + 0.0)


def box(id_, label, size, xyz, deg=0.0, variant=0):
    return SceneElement(id_, "furniture", label, tuple(size), tuple(xyz), _rot(deg), feature_code(VOCAB, label, variant))


def room_walls(w=6.0, d=6.0):
    """Four inward-facing walls of a w x d room centered at the origin."""
    return [
        wall(0, w, (0.0, -d / 2), 0),
        wall(1, d, (w / 2, 0.0), 90),
        wall(2, w, (0.0, d / 2), 180),
        wall(3, d, (-w / 2, 0.0), 270),
    ]


def square_floor(w=6.0, d=6.0):
    return [(-w / 2, -d / 2), (w / 2, -d / 2), (w / 2, d / 2), (-w / 2, d / 2)]


def five_furniture_scene():
    """Dining table with two facing chairs, a sofa by the wall, and a pendant lamp over the table."""
    items = room_walls() + [
        SceneElement("door_0", "architectural", "door", (0.9, 0.05, 2.0), (2.0, -3.0, 1.0), _rot(0)),
        box("dining_table_0", "dining_table", (1.4, 0.9, 0.75), (0.0, 0.0, 0.375)),
        box("dining_chair_0", "dining_chair", (0.45, 0.45, 0.9), (0.0, 0.8, 0.45), 180),
        box("dining_chair_1", "dining_chair", (0.45, 0.45, 0.9), (0.0, -0.8, 0.45), 0),
        box("multi_seat_sofa_0", "multi_seat_sofa", (2.1, 0.9, 0.85), (2.5, 0.3, 0.425), 90),
        box("pendant_lamp_0", "pendant_lamp", (0.5, 0.5, 0.6), (0.0, 0.0, 2.2)),
    ]
    return make_scene(items, n_max=16, floor_polygon=square_floor())


def empty_room(w=6.0, d=6.0, n_max=16):
    return make_scene(room_walls(w, d), n_max=n_max, floor_polygon=square_floor(w, d))
