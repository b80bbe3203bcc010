"""Discrete-action navigation engine over a scene lattice.

Depth comes from an exact grid DDA raycaster (Amanatides-Woo traversal): a
ray's depth is the distance to the point where it enters the first blocked
cell, which is exactly what a segment/box intersection oracle computes. The
fan is planar; the vertical dimension enters only through per-ray surface
heights sampled from the hit object's height band, so camera tilt changes
nothing about the returned ranges.

Sensor corruption has two independent knobs: p_seg flips the semantic label
of a ray (uniform over the other categories) while sigma perturbs the pixel
feature vector around the TRUE category direction. That split lets the text
path degrade with segmentation quality while the vision path degrades with
embedding quality, which is the comparison the stack exists to make.

step() is pure kinematics: forward translates by one step length unless the
ray ahead hits sooner, turns are fixed-angle, look actions tilt the camera
within its limit, and stop ends the episode with the success rule below.

evaluate_stop: success iff some valid goal object lies within the success
radius of geodesic distance AND an unobstructed ray from the agent to that
object exists inside the field of view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from ..embedspace import CategoryVocabulary, pixel_embed_batch
from ..errors import ConfigurationError, DataError, SimulationError
from ..gridcore import CellHits, GridSpec, Pose, backproject, normalize_angle, project_topdown
from ..planner import Action, DistanceField, fmm_distance
from .scenes import Scene

GEODESIC_RANGE = (1.5, 4.5)  # episode start distance band, meters
EPISODE_TRIES = 64
# hits land exactly on cell boundaries (walls are lattice-aligned), where
# floor() after the float round-trip is a coin toss; nudging the point this
# far into the hit cell makes reprojection deterministic
MAP_EPS = 1e-6


@dataclass(frozen=True)
class Embodiment:
    """Agent body and sensor geometry. Defaults follow the LoCoBot profile."""

    forward_step: float = 0.25
    turn_deg: float = 30.0
    look_deg: float = 30.0
    sensor_height: float = 0.88
    max_range: float = 5.0
    n_rays: int = 128
    fov_deg: float = 79.0
    success_radius: float = 1.0
    max_steps: int = 500

    def __post_init__(self):
        if self.forward_step <= 0 or self.max_range <= 0:
            raise ConfigurationError("step length and sensor range must be positive")
        if not (0 < self.fov_deg < 180) or self.n_rays < 2:
            raise ConfigurationError("need fov in (0, 180) deg and >= 2 rays")
        if self.max_steps < 1 or self.success_radius <= 0:
            raise ConfigurationError("max_steps and success_radius must be positive")


# the Stretch-like profile: taller mast camera, shorter stride
EMBODIMENTS = {
    "locobot": Embodiment(),
    "stretch": Embodiment(forward_step=0.2, sensor_height=1.31),
}


@njit(cache=True)
def _dda_kernel(blocked, x0, y0, angles, max_range, h):
    """March each ray cell-by-cell; depth = entry distance into the first
    blocked cell, inf when nothing is hit within range. Also marks every
    free cell a ray passes through (the visibility mask)."""
    m, n = blocked.shape
    k = angles.size
    depths = np.full(k, np.inf)
    hit_r = np.full(k, -1, np.int64)
    hit_c = np.full(k, -1, np.int64)
    visited = np.zeros((m, n), np.bool_)
    c_start = int(math.floor(x0 / h))
    r_start = int(math.floor(y0 / h))
    for i in range(k):
        dx = math.cos(angles[i])
        dy = math.sin(angles[i])
        r, c = r_start, c_start
        if 0 <= r < m and 0 <= c < n and not blocked[r, c]:
            visited[r, c] = True
        if dx > 0.0:
            step_c, t_max_x, t_dx = 1, ((c + 1) * h - x0) / dx, h / dx
        elif dx < 0.0:
            step_c, t_max_x, t_dx = -1, (c * h - x0) / dx, -h / dx
        else:
            step_c, t_max_x, t_dx = 0, np.inf, np.inf
        if dy > 0.0:
            step_r, t_max_y, t_dy = 1, ((r + 1) * h - y0) / dy, h / dy
        elif dy < 0.0:
            step_r, t_max_y, t_dy = -1, (r * h - y0) / dy, -h / dy
        else:
            step_r, t_max_y, t_dy = 0, np.inf, np.inf
        while True:
            if t_max_x < t_max_y:
                t = t_max_x
                c += step_c
                t_max_x += t_dx
            else:
                t = t_max_y
                r += step_r
                t_max_y += t_dy
            if t > max_range:
                break
            if r < 0 or r >= m or c < 0 or c >= n:
                break
            if blocked[r, c]:
                depths[i] = t
                hit_r[i] = r
                hit_c[i] = c
                break
            visited[r, c] = True
    return depths, hit_r, hit_c, visited


def raycast(scene: Scene, x: float, y: float, angles: np.ndarray, max_range: float):
    """Exact first-hit ranges from a world point along world-frame angles.

    Returns (depths [K], hit_rows [K], hit_cols [K], visited free mask).
    """
    ox, oy = scene.spec.origin
    return _dda_kernel(scene.blocked, float(x - ox), float(y - oy),
                       np.ascontiguousarray(angles, dtype=np.float64),
                       float(max_range), scene.spec.cell_size)


@dataclass
class Observation:
    """One sensor frame: a ray fan plus the free cells it swept.

    No-hit rays carry depth=inf, label/instance -1, height NaN and a zero
    feature row; downstream backprojection drops them by depth. All arrays
    are index-aligned with ``azimuths`` (ego angles, left positive).
    hit_rows/hit_cols are the exact scene cells the raycaster stopped in
    (-1 for no-hit), for consumers that want to skip reprojection entirely.
    """

    azimuths: np.ndarray
    depths: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    instances: np.ndarray
    confidences: np.ndarray
    heights: np.ndarray
    features: np.ndarray
    hit_rows: np.ndarray
    hit_cols: np.ndarray
    visited: np.ndarray  # [M, M] bool, free scene cells swept by the fan

    def cell_hits(self, pose: Pose, spec: GridSpec, emb: Embodiment) -> CellHits:
        """Project the fan into map cells. Depths are planar ranges and the
        sampled surface heights already carry z, so tilt stays out of it.
        Ranges are pushed MAP_EPS into the hit cell before projection so
        boundary-exact hits bin into the cell that was actually struck."""
        pts = backproject(self.depths + MAP_EPS, self.azimuths, 0.0,
                          emb.sensor_height, self.labels, self.confidences,
                          self.features, self.heights, emb.max_range)
        return project_topdown(pts, pose, spec)


def observe(scene: Scene, pose: Pose, emb: Embodiment, vocab: CategoryVocabulary,
            rng: np.random.Generator, sigma: float = 0.0,
            p_seg: float = 0.05) -> Observation:
    """Render one frame. Draw order (flips, relabels, heights, features) is
    fixed so a seeded generator reproduces frames bit-identically."""
    if not (0.0 <= p_seg < 1.0):
        raise ConfigurationError("p_seg must be in [0, 1)")
    k = emb.n_rays
    half = math.radians(emb.fov_deg) / 2.0
    az = np.linspace(-half, half, k)
    depths, hr, hc, visited = raycast(scene, pose.x, pose.y,
                                      pose.heading + az, emb.max_range)
    hit = np.isfinite(depths)
    n_hit = int(hit.sum())

    true_labels = np.full(k, -1, np.int64)
    labels = np.full(k, -1, np.int64)
    instances = np.full(k, -1, np.int64)
    heights = np.full(k, np.nan)
    features = np.zeros((k, vocab.dim))
    conf = np.zeros(k)
    if n_hit:
        rr, cc = hr[hit], hc[hit]
        cats = scene.cat_at[rr, cc].astype(np.int64)
        true_labels[hit] = cats
        instances[hit] = scene.inst_at[rr, cc]
        noisy = cats.copy()
        flip = rng.random(n_hit) < p_seg
        if flip.any():
            # uniform over the other categories, never the true one
            alt = rng.integers(0, len(vocab) - 1, size=int(flip.sum()))
            alt = alt + (alt >= noisy[flip])
            noisy[flip] = alt
        labels[hit] = noisy
        heights[hit] = rng.uniform(scene.h_lo[rr, cc], scene.h_hi[rr, cc])
        features[hit] = pixel_embed_batch(vocab, cats, sigma, rng)
        conf[hit] = 1.0
    return Observation(az, depths, labels, true_labels, instances, conf,
                       heights, features, hr, hc, visited)


@dataclass(frozen=True)
class EpisodeGoal:
    """What to find: a category for text goals, plus the exact instance for
    image goals (where only that instance counts as success)."""

    category: int
    modality: str = "text"
    instance: int = -1

    def __post_init__(self):
        if self.modality not in ("text", "image"):
            raise ConfigurationError(f"bad goal modality {self.modality!r}")
        if self.modality == "image" and self.instance < 0:
            raise ConfigurationError("image goals need an instance id")


@dataclass
class Episode:
    """One navigation task plus its mutable rollout state."""

    scene_seed: int
    start: Pose
    goal: EpisodeGoal
    shortest_path: float
    max_steps: int = 500
    # rollout state
    pose: Pose = None
    steps: int = 0
    path_length: float = 0.0
    terminated: bool = False
    success: bool = False

    def __post_init__(self):
        if self.pose is None:
            self.pose = replace(self.start)

    def reset(self) -> "Episode":
        self.pose = replace(self.start)
        self.steps = 0
        self.path_length = 0.0
        self.terminated = False
        self.success = False
        return self


def goal_distance_field(scene: Scene, goal: EpisodeGoal) -> DistanceField:
    """Geodesic distance to the nearest valid goal object, through free
    space. The object's own cells join the traversable set as sources, so
    the field measures distance to the object's boundary."""
    objs = _valid_objects(scene, goal)
    if not objs:
        raise SimulationError(f"scene {scene.seed} has no object for goal "
                              f"category {goal.category}")
    mask = np.zeros_like(scene.blocked)
    for o in objs:
        mask[o.r0:o.r1, o.c0:o.c1] = True
    rows, cols = np.nonzero(mask)
    return fmm_distance(scene.nav_free | mask, np.stack([rows, cols], 1),
                        scene.spec.cell_size)


def _valid_objects(scene: Scene, goal: EpisodeGoal) -> list:
    if goal.modality == "image":
        return [o for o in scene.objects if o.instance == goal.instance]
    return scene.instances_of(goal.category)


def _object_visible(scene: Scene, pose: Pose, obj, emb: Embodiment) -> bool:
    """Any unobstructed in-FOV ray from the agent that first hits this
    instance (aimed at each of its cell centers; one batched cast)."""
    rows, cols = obj.cells
    xs, ys = scene.spec.center_of(rows, cols)
    bearings = np.arctan2(ys - pose.y, xs - pose.x)
    err = (bearings - pose.heading + np.pi) % (2.0 * np.pi) - np.pi
    infov = np.abs(err) <= math.radians(emb.fov_deg) / 2.0
    if not infov.any():
        return False
    _, hr, hc, _ = raycast(scene, pose.x, pose.y, bearings[infov], emb.max_range)
    ok = hr >= 0
    return bool(np.any(scene.inst_at[hr[ok], hc[ok]] == obj.instance))


def evaluate_stop(scene: Scene, pose: Pose, goal: EpisodeGoal,
                  emb: Embodiment) -> bool:
    """Success rule: a valid goal object within success_radius geodesic
    meters AND visible (unobstructed in-FOV ray to that same object)."""
    agent = scene.spec.cell_of(pose.x, pose.y)
    for obj in _valid_objects(scene, goal):
        mask = np.zeros_like(scene.blocked)
        mask[obj.r0:obj.r1, obj.c0:obj.c1] = True
        rows, cols = np.nonzero(mask)
        dist = fmm_distance(scene.nav_free | mask, np.stack([rows, cols], 1),
                            scene.spec.cell_size)
        if dist.at(agent) < emb.success_radius and _object_visible(scene, pose, obj, emb):
            return True
    return False


def step(scene: Scene, ep: Episode, action: Action, emb: Embodiment) -> float:
    """Advance one action; returns the displacement in meters (zero for
    everything except an unblocked move_forward). Acting on a terminated
    episode is a state error."""
    if ep.terminated:
        raise SimulationError("episode already terminated; reset before stepping")
    disp = 0.0
    if action is Action.MOVE_FORWARD:
        d, _, _, _ = raycast(scene, ep.pose.x, ep.pose.y,
                             np.array([ep.pose.heading]), emb.max_range)
        if d[0] > emb.forward_step:
            ep.pose = ep.pose.moved(emb.forward_step)
            disp = emb.forward_step
    elif action is Action.TURN_LEFT:
        ep.pose = ep.pose.turned(math.radians(emb.turn_deg))
    elif action is Action.TURN_RIGHT:
        ep.pose = ep.pose.turned(-math.radians(emb.turn_deg))
    elif action is Action.LOOK_UP:
        ep.pose = ep.pose.tilted(math.radians(emb.look_deg))
    elif action is Action.LOOK_DOWN:
        ep.pose = ep.pose.tilted(-math.radians(emb.look_deg))
    elif action is Action.STOP:
        ep.terminated = True
        ep.success = evaluate_stop(scene, ep.pose, ep.goal, emb)
    else:
        raise ConfigurationError(f"unknown action {action!r}")
    ep.path_length += disp
    ep.steps += 1
    if not ep.terminated and ep.steps >= ep.max_steps:
        ep.terminated = True
        ep.success = False
    return disp


def generate_episode(scene: Scene, rng: np.random.Generator,
                     modality: str = "text",
                     emb: Embodiment = EMBODIMENTS["locobot"]) -> Episode:
    """Sample a solvable task: uniform goal category (and instance for image
    goals), then a free start cell whose geodesic distance to the goal lies
    in GEODESIC_RANGE. The recorded shortest path is that distance minus the
    success radius (the closest point where stopping could succeed), floored
    at one cell."""
    cats = scene.categories_present()
    if not cats:
        raise SimulationError(f"scene {scene.seed} has no objects")
    h = scene.spec.cell_size
    for _ in range(EPISODE_TRIES):
        cat = int(cats[rng.integers(len(cats))])
        if modality == "image":
            inst = scene.instances_of(cat)
            goal = EpisodeGoal(cat, "image", int(inst[rng.integers(len(inst))].instance))
        else:
            goal = EpisodeGoal(cat, "text")
        dist = goal_distance_field(scene, goal)
        ok = (scene.nav_free & np.isfinite(dist.values)
              & (dist.values >= GEODESIC_RANGE[0])
              & (dist.values <= GEODESIC_RANGE[1]))
        rows, cols = np.nonzero(ok)
        if rows.size == 0:
            continue
        pick = int(rng.integers(rows.size))
        x, y = scene.spec.center_of(rows[pick], cols[pick])
        start = Pose(float(x), float(y), float(rng.uniform(0.0, 2.0 * np.pi)))
        shortest = max(dist.values[rows[pick], cols[pick]] - emb.success_radius, h)
        return Episode(scene.seed, start, goal, float(shortest),
                       max_steps=emb.max_steps)
    raise SimulationError(
        f"no start cell in the {GEODESIC_RANGE} m band after "
        f"{EPISODE_TRIES} tries (scene {scene.seed})")


def save_episodes(path, episodes: list[Episode], vocab: CategoryVocabulary) -> None:
    """One line per episode: scene seed, start pose, goal spec (category by
    name), shortest-path length."""
    with open(path, "w") as f:
        for ep in episodes:
            f.write(f"scene={ep.scene_seed} x={ep.start.x!r} y={ep.start.y!r} "
                    f"heading={ep.start.heading!r} "
                    f"goal={vocab.names[ep.goal.category]} "
                    f"modality={ep.goal.modality} instance={ep.goal.instance} "
                    f"shortest={ep.shortest_path!r} max_steps={ep.max_steps}\n")


def load_episodes(path, vocab: CategoryVocabulary) -> list[Episode]:
    episodes = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                kv = dict(part.split("=", 1) for part in line.split())
                goal = EpisodeGoal(vocab.index_of(kv["goal"]), kv["modality"],
                                   int(kv["instance"]))
                episodes.append(Episode(
                    int(kv["scene"]),
                    Pose(float(kv["x"]), float(kv["y"]), float(kv["heading"])),
                    goal, float(kv["shortest"]), int(kv["max_steps"])))
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}:{ln}: malformed episode record: {e}") from e
    if not episodes:
        raise DataError(f"{path}: no episodes")
    return episodes
