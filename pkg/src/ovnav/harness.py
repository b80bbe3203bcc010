"""Experiment drivers: evaluation suites, baseline runs, ablations.

Evaluation fans episodes out across worker threads (episodes are fully
independent: each owns its controller, map and rng) and reduces results
in episode order, so reports are bit-identical across re-runs and across
worker counts. Per-episode randomness comes from one SeedSequence rooted
at the eval seed and spawned by episode index; nothing is drawn from a
shared stream.

The FBE baseline runs the identical controller with frontier goals in
place of predicted ones, so metric gaps isolate the long-term-goal policy.
"""

from __future__ import annotations

import copy
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .agent import Controller
from .collect import collect_scene_maps, runs_to_samples
from .config import ExperimentConfig, config_echo
from .embedspace import CategoryVocabulary
from .errors import ConfigurationError, DataError
from .metrics import EpisodeResult, MetricsReport, build_report, write_reports_csv
from .policy import PolicyModel
from .sim.engine import EMBODIMENTS, Embodiment, Episode, generate_episode
from .sim.scenes import Scene, generate_scene
from .training import TrainSample, train

EPISODES_PER_SCENE = 4


def eval_embodiment(cfg: ExperimentConfig) -> Embodiment:
    return dataclasses.replace(EMBODIMENTS[cfg.embodiment],
                               max_steps=cfg.max_steps,
                               success_radius=cfg.success_radius)


def make_eval_suite(cfg: ExperimentConfig, vocab: CategoryVocabulary,
                    modality: str = "text",
                    ) -> tuple[list[Scene], list[Episode]]:
    """Held-out scenes with EPISODES_PER_SCENE tasks each, deterministic in
    (eval_scene_seed, eval_seed). Scene seeds start where the configured
    eval block starts, disjoint from the training block by convention."""
    n_scenes = max(1, -(-cfg.eval_episodes // EPISODES_PER_SCENE))
    emb = eval_embodiment(cfg)
    scenes = [generate_scene(cfg.scene_config(), vocab, cfg.eval_scene_seed + i)
              for i in range(n_scenes)]
    episodes = []
    for i in range(cfg.eval_episodes):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=cfg.eval_seed, spawn_key=(1, i)))
        episodes.append(generate_episode(scenes[i % n_scenes], rng,
                                         modality=modality, emb=emb))
    return scenes, episodes


def run_episode(scene: Scene, episode: Episode, vocab: CategoryVocabulary,
                cfg: ExperimentConfig, index: int,
                model: PolicyModel | None = None,
                mode: str | None = None, map_type: str | None = None,
                dump_dir: Path | None = None) -> EpisodeResult:
    """Roll one episode to termination. The input Episode is a task spec;
    rollout happens on a copy, so suites can be replayed."""
    ep = copy.deepcopy(episode)
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.eval_seed, spawn_key=(index,)))
    ctl = Controller(scene, ep, vocab, eval_embodiment(cfg),
                     cfg.agent_config(mode=mode, map_type=map_type),
                     model=model, rng=rng)
    poses = [(ep.pose.x, ep.pose.y, ep.pose.heading)]
    actions = []
    while not ep.terminated:
        actions.append(ctl.act().value)
        poses.append((ep.pose.x, ep.pose.y, ep.pose.heading))
    if dump_dir is not None:
        np.savez_compressed(
            Path(dump_dir) / f"episode_{index:04d}.npz",
            poses=np.asarray(poses, dtype=np.float64),
            actions=np.asarray(actions, dtype="U12"),
            semantic_map=ctl.sem.grid.data.astype(np.float32),
            success=np.bool_(ep.success),
            path_length=np.float64(ep.path_length),
            shortest_path=np.float64(ep.shortest_path),
            scene_seed=np.int64(scene.seed),
            category=np.int64(ep.goal.category),
        )
    return EpisodeResult(
        scene_seed=scene.seed, episode_index=index,
        category=vocab.names[episode.goal.category],
        success=bool(ep.success), path_length=float(ep.path_length),
        shortest_path=float(ep.shortest_path), steps=int(ep.steps))


def run_eval(cfg: ExperimentConfig, scenes: list[Scene],
             episodes: list[Episode], vocab: CategoryVocabulary,
             model: PolicyModel | None = None,
             mode: str | None = None, map_type: str | None = None,
             dump_dir=None) -> tuple[MetricsReport, list[EpisodeResult]]:
    """Evaluate a policy over an episode suite.

    mode/map_type default to the config's. A missing model with the ovexp
    policy is a configuration error; an episode whose scene_seed has no
    scene in ``scenes`` is a data error.
    """
    policy = cfg.policy if mode is None else mode
    if policy == "ovexp" and model is None:
        raise ConfigurationError("ovexp evaluation needs a trained checkpoint")
    by_seed = {s.seed: s for s in scenes}
    missing = sorted({e.scene_seed for e in episodes} - by_seed.keys())
    if missing:
        raise DataError(f"episodes reference unknown scene seeds {missing}")
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)

    def one(i: int) -> EpisodeResult:
        return run_episode(by_seed[episodes[i].scene_seed], episodes[i],
                           vocab, cfg, i, model=model, mode=mode,
                           map_type=map_type, dump_dir=dump_dir)

    if cfg.workers == 1:
        results = [one(i) for i in range(len(episodes))]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, range(len(episodes))))
    report = build_report(results, config_echo(cfg),
                          seeds=(cfg.seed, cfg.eval_seed, cfg.eval_scene_seed))
    return report, results


def build_training_set(cfg: ExperimentConfig, vocab: CategoryVocabulary,
                       log=None) -> list[TrainSample]:
    """Frontier wanders over the training scene block, converted to
    language-map samples."""
    runs = []
    for i in range(cfg.train_scenes):
        scene = generate_scene(cfg.scene_config(), vocab, cfg.train_scene_seed + i)
        runs.append(collect_scene_maps(scene, vocab, cfg.collect_config(),
                                       emb=EMBODIMENTS[cfg.embodiment]))
        if log is not None and (i + 1) % 25 == 0:
            log(f"collected {i + 1}/{cfg.train_scenes} scenes")
    return runs_to_samples(runs, vocab)


def train_policy(cfg: ExperimentConfig, samples: list[TrainSample],
                 vocab: CategoryVocabulary, patch: int | None = None):
    """Train one long-term-goal policy; returns (model, loss curve)."""
    tc = cfg.train_config()
    if patch is not None:
        tc = dataclasses.replace(tc, patch=patch)
    return train(samples, vocab, tc)


def run_ablations(cfg: ExperimentConfig, models: dict[int, PolicyModel],
                  scenes: list[Scene], episodes: list[Episode],
                  vocab: CategoryVocabulary, out_csv=None,
                  ) -> list[tuple[dict, MetricsReport]]:
    """Token-resolution and inference-map-type grid.

    ``models`` maps patch size to its trained checkpoint (all text-trained).
    One language row per patch, coarse to fine, then a vision-inference row
    from the configured patch's checkpoint, so the map-type pair shares one
    set of weights.
    """
    if cfg.patch not in models:
        raise ConfigurationError(
            f"map-type comparison needs a checkpoint for patch {cfg.patch}")
    rows: list[tuple[dict, MetricsReport]] = []
    for patch in sorted(models, reverse=True):
        report, _ = run_eval(cfg, scenes, episodes, vocab,
                             model=models[patch], mode="ovexp",
                             map_type="language")
        rows.append(({"patch": patch, "tokens": cfg.crop // patch,
                      "map_type": "language"}, report))
    report, _ = run_eval(cfg, scenes, episodes, vocab, model=models[cfg.patch],
                         mode="ovexp", map_type="vision")
    rows.append(({"patch": cfg.patch, "tokens": cfg.crop // cfg.patch,
                  "map_type": "vision"}, report))
    if out_csv is not None:
        write_reports_csv(out_csv, rows)
    return rows
