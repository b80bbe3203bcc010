"""Synthetic multi-room navigation environments and their sensor model."""

from .engine import (
    EMBODIMENTS,
    Embodiment,
    Episode,
    EpisodeGoal,
    Observation,
    evaluate_stop,
    generate_episode,
    goal_distance_field,
    load_episodes,
    observe,
    raycast,
    save_episodes,
    step,
)
from .scenes import (
    FOOTPRINTS,
    ROOM_PRIORS,
    Scene,
    SceneConfig,
    SceneObject,
    generate_scene,
    load_scene_set,
    save_scene_set,
)

__all__ = [
    "EMBODIMENTS", "Embodiment", "Episode", "EpisodeGoal", "Observation",
    "evaluate_stop", "generate_episode", "goal_distance_field",
    "load_episodes", "observe", "raycast", "save_episodes", "step",
    "FOOTPRINTS", "ROOM_PRIORS", "Scene", "SceneConfig", "SceneObject",
    "generate_scene", "load_scene_set", "save_scene_set",
]
