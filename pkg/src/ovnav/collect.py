"""Training-map collection: frontier wanders paired with ground truth.

A collector agent explores each scene with the frontier policy for a fixed
step budget, snapshotting its semantic map every ``snapshot_every`` steps.
Only the first half of the snapshots is kept: early maps have large
unexplored regions, which is exactly the regime the predictor has to learn
to extrapolate into (late maps make the task trivial).

Each retained snapshot is paired with the scene's ground-truth category
rasters translated into the agent's map frame, so inputs and targets share
one lattice. Runs are stored one .npz per scene; semantic maps are stored
(not language maps) so any vocabulary-compatible conversion can happen at
training time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import AgentConfig, Controller
from .embedspace import CategoryVocabulary
from .errors import ConfigurationError, DataError
from .gridcore import GridSpec, Pose
from .mapping import CategoricalSemanticMap, to_language_map
from .sim.engine import EMBODIMENTS, Embodiment, Episode, EpisodeGoal
from .sim.scenes import Scene
from .training import TrainSample


@dataclass(frozen=True)
class CollectConfig:
    steps: int = 500
    snapshot_every: int = 25
    keep: int = 10
    sigma: float = 0.1
    p_seg: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.steps < self.snapshot_every:
            raise ConfigurationError("steps must cover at least one snapshot")
        if self.keep < 1 or self.keep * self.snapshot_every > self.steps:
            raise ConfigurationError(
                "keep * snapshot_every must fit inside the step budget")


@dataclass
class CollectedRun:
    """One wander: retained semantic snapshots plus aligned GT rasters."""

    scene_seed: int
    cell_size: float
    maps: list[np.ndarray]  # each [N+2, M, M] float32, agent map frame
    explored_frac: list[float]  # per retained snapshot, for auditing
    targets: np.ndarray  # [N, M, M] uint8, agent map frame
    n_categories: int = field(init=False)

    def __post_init__(self):
        self.n_categories = int(self.targets.shape[0])


def _shift_rasters(rasters: np.ndarray, shift_r: int, shift_c: int,
                   size: int) -> np.ndarray:
    """Translate scene-frame rasters into the agent map window (zero fill)."""
    n, m, _ = rasters.shape
    out = np.zeros((n, size, size), dtype=rasters.dtype)
    src_r0, src_c0 = max(0, -shift_r), max(0, -shift_c)
    dst_r0, dst_c0 = max(0, shift_r), max(0, shift_c)
    rows = min(m - src_r0, size - dst_r0)
    cols = min(m - src_c0, size - dst_c0)
    if rows > 0 and cols > 0:
        out[:, dst_r0:dst_r0 + rows, dst_c0:dst_c0 + cols] = \
            rasters[:, src_r0:src_r0 + rows, src_c0:src_c0 + cols]
    return out


def collect_scene_maps(scene: Scene, vocab: CategoryVocabulary,
                       cfg: CollectConfig,
                       emb: Embodiment = EMBODIMENTS["locobot"]) -> CollectedRun:
    """Run one frontier wander and return the retained snapshot/target pairs.

    Fully deterministic in (cfg.seed, scene.seed): start pose, sensor noise
    and the explore policy all draw from one seeded stream.
    """
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.seed, spawn_key=(scene.seed & 0x7FFFFFFF,)))
    free_r, free_c = np.nonzero(scene.nav_free)
    pick = int(rng.integers(free_r.size))
    x, y = scene.spec.center_of(free_r[pick], free_c[pick])
    start = Pose(float(x), float(y), float(rng.uniform(0, 2 * np.pi)))

    # goal is a placeholder; explore_only controllers never look at it
    ep = Episode(scene.seed, start, EpisodeGoal(0, "text"), 1.0,
                 max_steps=cfg.steps + 1)
    agent_cfg = AgentConfig(mode="fbe", explore_only=True,
                            sigma=cfg.sigma, p_seg=cfg.p_seg)
    ctl = Controller(scene, ep, vocab, emb, agent_cfg, rng=rng)

    maps, fracs = [], []
    for t in range(1, cfg.steps + 1):
        if not ep.terminated:
            ctl.act()
        if t % cfg.snapshot_every == 0 and len(maps) < cfg.keep:
            maps.append(ctl.sem.grid.data.astype(np.float32).copy())
            fracs.append(float(ctl.sem.explored.mean()))

    targets = _shift_rasters(scene.target_rasters(len(vocab)),
                             ctl.shift_r, ctl.shift_c, ctl.map_spec.size)
    return CollectedRun(scene.seed, scene.spec.cell_size, maps, fracs, targets)


def save_run(path, run: CollectedRun) -> None:
    np.savez_compressed(
        path,
        maps=np.stack(run.maps),
        explored_frac=np.asarray(run.explored_frac, dtype=np.float64),
        targets=run.targets,
        scene_seed=np.int64(run.scene_seed),
        cell_size=np.float64(run.cell_size),
    )


def load_run(path) -> CollectedRun:
    try:
        with np.load(path) as z:
            maps = [m for m in z["maps"]]
            return CollectedRun(int(z["scene_seed"]), float(z["cell_size"]),
                                maps, [float(f) for f in z["explored_frac"]],
                                z["targets"])
    except (KeyError, ValueError, OSError) as e:
        raise DataError(f"{path}: unreadable collect run: {e}") from e


def runs_to_samples(runs: list[CollectedRun],
                    vocab: CategoryVocabulary) -> list[TrainSample]:
    """Convert stored semantic snapshots into language-map training samples."""
    samples = []
    for run in runs:
        if run.n_categories != len(vocab):
            raise DataError(
                f"run for scene {run.scene_seed} has {run.n_categories} "
                f"categories, vocabulary has {len(vocab)}")
        for snap in run.maps:
            size = snap.shape[-1]
            sem = CategoricalSemanticMap(GridSpec(size, run.cell_size),
                                         len(vocab), dtype=np.float32)
            sem.grid.data[...] = snap
            lang = to_language_map(sem, vocab)
            samples.append(TrainSample(
                input_map=np.asarray(lang.grid.data, dtype=np.float64),
                targets=run.targets.astype(np.float64),
                scene_id=run.scene_seed & 0x7FFFFFFF))
    return samples
