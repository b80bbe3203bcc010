"""Procedural multi-room indoor scenes on a desk-scale occupancy lattice.

A scene is generated by recursive BSP splits of the walled interior. Every
split inserts a one-cell wall with a carved door (4-6 cells wide), so the
traversable region is connected by construction; an explicit flood fill
re-checks this after every object placement anyway. Rooms get a type
(bedroom, living room, ...) and object categories are drawn from priors
conditioned on that type, so beds only show up in bedrooms.

Objects are axis-aligned rectangles of blocked cells with a per-category
height band. Placement demands a fully free one-cell ring around the
footprint, which keeps every object reachable and keeps doors passable.

Everything is driven by one PCG64 stream seeded from (seed, attempt), so
regeneration from the same seed is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..embedspace import BACKGROUND, CategoryVocabulary
from ..errors import ConfigurationError, DataError, SimulationError
from ..gridcore import GridSpec

WALL_HEIGHT = (0.2, 1.4)  # sampled wall-hit heights, fully inside the obstacle band
WALL_INSTANCE = -2
FREE = -1

MIN_ROOM_SIDE = 26  # interior cells, 1.3 m at the default resolution
DOOR_WIDTHS = (14, 16, 18)  # 0.7-0.9 m openings, door-sized at 5 cm cells
SCENE_ATTEMPTS = 8
PLACE_TRIES = 40
# free cells kept between any object and other blocked cells. A gap of g
# cells survives 1-cell planner dilation with g-2 traversable cells, so 3 is
# the smallest clearance that never creates planner-impassable slots.
CLEARANCE = 3

# per-category footprint ranges (meters) and height bands (meters)
FOOTPRINTS = {
    "bed": ((0.7, 1.1), (1.1, 1.5), (0.3, 0.7)),
    "nightstand": ((0.3, 0.4), (0.3, 0.4), (0.3, 0.6)),
    "wardrobe": ((0.4, 0.55), (0.7, 1.0), (0.3, 1.9)),
    "sofa": ((0.5, 0.7), (0.9, 1.3), (0.3, 0.9)),
    "tv_stand": ((0.3, 0.4), (0.7, 1.0), (0.2, 0.6)),
    "coffee_table": ((0.4, 0.6), (0.5, 0.7), (0.2, 0.5)),
    "bookshelf": ((0.3, 0.4), (0.6, 0.9), (0.3, 1.8)),
    "plant": ((0.25, 0.35), (0.25, 0.35), (0.3, 1.3)),
    "stove": ((0.5, 0.6), (0.5, 0.6), (0.5, 1.0)),
    "fridge": ((0.5, 0.6), (0.5, 0.6), (0.3, 1.8)),
    "kitchen_sink": ((0.4, 0.5), (0.5, 0.7), (0.6, 0.95)),
    "toilet": ((0.3, 0.4), (0.4, 0.5), (0.2, 0.45)),
    "bathtub": ((0.5, 0.7), (0.8, 1.1), (0.3, 0.6)),
    "desk": ((0.5, 0.6), (0.8, 1.1), (0.5, 0.8)),
    "office_chair": ((0.3, 0.4), (0.3, 0.4), (0.4, 0.9)),
}

# room type -> (anchor category, extra categories)
ROOM_PRIORS = {
    "bedroom": ("bed", ("nightstand", "wardrobe", "plant", "bookshelf")),
    "living": ("sofa", ("tv_stand", "coffee_table", "bookshelf", "plant")),
    "kitchen": ("stove", ("fridge", "kitchen_sink", "plant")),
    "bathroom": ("toilet", ("bathtub", "plant")),
    "office": ("desk", ("office_chair", "bookshelf", "plant")),
}

_LABEL4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int8)


@dataclass(frozen=True)
class SceneConfig:
    """Generation knobs. Defaults give a 9.6 m x 9.6 m flat."""

    size: int = 192
    cell_size: float = 0.05
    min_rooms: int = 3
    max_rooms: int = 8
    min_objects: int = 2
    max_objects: int = 6

    def __post_init__(self):
        if self.size < 64:
            raise ConfigurationError("scene size must be >= 64 cells")
        if not (0.0 < self.cell_size <= 0.5):
            raise ConfigurationError("cell size must be in (0, 0.5] m")
        if not (1 <= self.min_rooms <= self.max_rooms):
            raise ConfigurationError("need 1 <= min_rooms <= max_rooms")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ConfigurationError("need 1 <= min_objects <= max_objects")


@dataclass(frozen=True)
class SceneObject:
    """One placed instance: a blocked rectangle [r0:r1, c0:c1] with a height band."""

    name: str
    category: int
    instance: int
    r0: int
    c0: int
    r1: int
    c1: int
    height: tuple[float, float]

    @property
    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        rr, cc = np.mgrid[self.r0:self.r1, self.c0:self.c1]
        return rr.ravel(), cc.ravel()

    def center(self, spec: GridSpec) -> tuple[float, float]:
        return spec.center_of((self.r0 + self.r1 - 1) / 2.0, (self.c0 + self.c1 - 1) / 2.0)


@dataclass
class Room:
    r0: int
    r1: int
    c0: int
    c1: int
    kind: str = ""

    @property
    def area(self) -> int:
        return (self.r1 - self.r0) * (self.c1 - self.c0)


@dataclass
class Scene:
    """Static world state: walls, objects, and per-cell lookup rasters.

    cat_at holds the category index per cell (walls carry the background
    index, free cells -1); inst_at the instance id (-1 free, -2 wall);
    h_lo/h_hi the height band a depth sample is drawn from on a hit.
    """

    config: SceneConfig
    seed: int
    spec: GridSpec
    walls: np.ndarray
    blocked: np.ndarray
    cat_at: np.ndarray
    inst_at: np.ndarray
    h_lo: np.ndarray
    h_hi: np.ndarray
    objects: list[SceneObject] = field(default_factory=list)
    rooms: list[Room] = field(default_factory=list)
    doors: np.ndarray | None = None

    @property
    def nav_free(self) -> np.ndarray:
        return ~self.blocked

    def instances_of(self, category: int) -> list[SceneObject]:
        return [o for o in self.objects if o.category == category]

    def categories_present(self) -> list[int]:
        return sorted({o.category for o in self.objects})

    def target_rasters(self, n_categories: int) -> np.ndarray:
        """[N, M, M] uint8 ground-truth occupancy per category. Walls land in
        the background channel because cat_at labels them that way."""
        out = np.zeros((n_categories, self.spec.size, self.spec.size), np.uint8)
        for c in range(n_categories):
            out[c] = self.cat_at == c
        return out


def _carve_door(walls: np.ndarray, doors: np.ndarray, rng, horizontal: bool,
                line: int, lo: int, hi: int) -> None:
    width = int(rng.choice(DOOR_WIDTHS))
    width = min(width, hi - lo - 2)
    start = int(rng.integers(lo + 1, hi - width))
    if horizontal:
        walls[line, start:start + width] = False
        doors[line, start:start + width] = True
    else:
        walls[start:start + width, line] = False
        doors[start:start + width, line] = True


def _split_rooms(config: SceneConfig, rng) -> tuple[np.ndarray, np.ndarray, list[Room]]:
    m = config.size
    walls = np.zeros((m, m), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    doors = np.zeros((m, m), dtype=bool)

    target = int(rng.integers(config.min_rooms, config.max_rooms + 1))
    rooms = [Room(1, m - 1, 1, m - 1)]
    while len(rooms) < target:
        splittable = [r for r in rooms
                      if max(r.r1 - r.r0, r.c1 - r.c0) >= 2 * MIN_ROOM_SIDE + 1]
        if not splittable:
            break
        room = max(splittable, key=lambda r: r.area)
        rooms.remove(room)
        if (room.r1 - room.r0) >= (room.c1 - room.c0):
            s = int(rng.integers(room.r0 + MIN_ROOM_SIDE, room.r1 - MIN_ROOM_SIDE))
            walls[s, room.c0:room.c1] = True
            _carve_door(walls, doors, rng, True, s, room.c0, room.c1)
            rooms += [Room(room.r0, s, room.c0, room.c1),
                      Room(s + 1, room.r1, room.c0, room.c1)]
        else:
            s = int(rng.integers(room.c0 + MIN_ROOM_SIDE, room.c1 - MIN_ROOM_SIDE))
            walls[room.r0:room.r1, s] = True
            _carve_door(walls, doors, rng, False, s, room.r0, room.r1)
            rooms += [Room(room.r0, room.r1, room.c0, s),
                      Room(room.r0, room.r1, s + 1, room.c1)]
    return walls, doors, rooms


def _connected(free: np.ndarray) -> bool:
    _, n = ndimage.label(free, structure=_LABEL4)
    return n == 1


def _try_place(blocked: np.ndarray, doors: np.ndarray, room: Room,
               name: str, rng, cell: float) -> tuple[int, int, int, int] | None:
    (w_lo, w_hi), (d_lo, d_hi), _ = FOOTPRINTS[name]
    g = CLEARANCE
    for _ in range(PLACE_TRIES):
        a = max(2, int(round(rng.uniform(w_lo, w_hi) / cell)))
        b = max(2, int(round(rng.uniform(d_lo, d_hi) / cell)))
        if rng.integers(2):
            a, b = b, a
        # clamp so the footprint plus clearance fits the room interior
        a = min(a, room.r1 - room.r0 - 2 * g)
        b = min(b, room.c1 - room.c0 - 2 * g)
        if a < 2 or b < 2:
            return None
        r0 = int(rng.integers(room.r0 + g, room.r1 - a - g + 1))
        c0 = int(rng.integers(room.c0 + g, room.c1 - b - g + 1))
        ring = (slice(r0 - g, r0 + a + g), slice(c0 - g, c0 + b + g))
        if blocked[ring].any() or doors[ring].any():
            continue
        blocked[r0:r0 + a, c0:c0 + b] = True
        if _connected(~blocked):
            return r0, c0, r0 + a, c0 + b
        blocked[r0:r0 + a, c0:c0 + b] = False
    return None


def generate_scene(config: SceneConfig, vocab: CategoryVocabulary, seed: int) -> Scene:
    """Build a scene from a seed. Bit-identical across calls.

    Raises SimulationError when no valid scene exists after bounded retries
    (each retry reseeds the stream from (seed, attempt)).
    """
    for name in FOOTPRINTS:
        vocab.index_of(name)  # fail fast on vocab mismatch
    other = vocab.index_of(BACKGROUND)

    last_fail = "no attempts made"
    for attempt in range(SCENE_ATTEMPTS):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(attempt,))))
        scene = _generate_once(config, vocab, other, rng, seed)
        if isinstance(scene, Scene):
            return scene
        last_fail = scene
    raise SimulationError(
        f"scene generation failed after {SCENE_ATTEMPTS} attempts "
        f"(seed {seed}): {last_fail}")


def _generate_once(config: SceneConfig, vocab, other: int, rng, seed: int):
    m = config.size
    walls, doors, rooms = _split_rooms(config, rng)
    if len(rooms) < config.min_rooms:
        return f"only {len(rooms)} rooms fit (want >= {config.min_rooms})"

    kinds = list(ROOM_PRIORS)
    for room in rooms:
        room.kind = kinds[int(rng.integers(len(kinds)))]

    blocked = walls.copy()
    objects: list[SceneObject] = []
    for room in rooms:
        n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
        anchor, extras = ROOM_PRIORS[room.kind]
        picks = [anchor] + [extras[int(rng.integers(len(extras)))]
                            for _ in range(n_obj - 1)]
        for j, name in enumerate(picks):
            rect = _try_place(blocked, doors, room, name, rng, config.cell_size)
            if rect is None:
                if j == 0:
                    return f"could not place {name!r} in a {room.kind}"
                continue  # extras are best-effort, the anchor is not
            objects.append(SceneObject(
                name, vocab.index_of(name), len(objects), *rect,
                FOOTPRINTS[name][2]))

    cat_at = np.full((m, m), FREE, dtype=np.int16)
    inst_at = np.full((m, m), FREE, dtype=np.int32)
    h_lo = np.zeros((m, m), dtype=np.float64)
    h_hi = np.zeros((m, m), dtype=np.float64)
    cat_at[walls] = other
    inst_at[walls] = WALL_INSTANCE
    h_lo[walls], h_hi[walls] = WALL_HEIGHT
    for obj in objects:
        sl = (slice(obj.r0, obj.r1), slice(obj.c0, obj.c1))
        cat_at[sl] = obj.category
        inst_at[sl] = obj.instance
        h_lo[sl], h_hi[sl] = obj.height

    spec = GridSpec(m, config.cell_size, (0.0, 0.0))
    return Scene(config, int(seed), spec, walls, blocked, cat_at, inst_at,
                 h_lo, h_hi, objects, rooms, doors)


def save_scene_set(path, config: SceneConfig, seeds: list[int]) -> None:
    """Scene sets are stored as the config echo plus one seed per line; scenes
    themselves are regenerated on load."""
    with open(path, "w") as f:
        f.write(f"size={config.size} cell_size={config.cell_size} "
                f"rooms={config.min_rooms}:{config.max_rooms} "
                f"objects={config.min_objects}:{config.max_objects}\n")
        for s in seeds:
            f.write(f"seed={int(s)}\n")


def load_scene_set(path) -> tuple[SceneConfig, list[int]]:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("size="):
        raise DataError(f"{path}: missing scene-set header")
    try:
        head = dict(part.split("=", 1) for part in lines[0].split())
        rooms = head["rooms"].split(":")
        objs = head["objects"].split(":")
        config = SceneConfig(int(head["size"]), float(head["cell_size"]),
                             int(rooms[0]), int(rooms[1]),
                             int(objs[0]), int(objs[1]))
        seeds = [int(ln.split("=", 1)[1]) for ln in lines[1:]]
    except (KeyError, ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed scene set: {e}") from e
    if not seeds:
        raise DataError(f"{path}: scene set has no seeds")
    return config, seeds
