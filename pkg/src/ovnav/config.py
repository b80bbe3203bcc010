"""Experiment configuration: one flat record of every tunable.

Configs live on disk as plain text, one ``key=value`` per line, ``#`` for
comments; unknown keys, duplicates and unparseable values are data errors,
range violations are configuration errors. ``config_echo`` is the
canonical serialization and is embedded in every artifact (reports, CSV
tables, dumps) so any result can be regenerated from its own header.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .agent import AgentConfig
from .collect import CollectConfig
from .embedspace import BACKGROUND, CategoryVocabulary
from .errors import ConfigurationError, DataError
from .sim.engine import EMBODIMENTS
from .sim.scenes import FOOTPRINTS, SceneConfig
from .training import TrainConfig

DESK_CATEGORIES = tuple(FOOTPRINTS) + (BACKGROUND,)


@dataclass(frozen=True)
class ExperimentConfig:
    # scene geometry
    scene_size: int = 192
    cell_size: float = 0.05
    min_rooms: int = 3
    max_rooms: int = 6
    # embedding space
    vocab_dim: int = 64
    vocab_seed: int = 7
    # policy architecture
    crop: int = 160
    patch: int = 16
    d_model: int = 512
    d_token: int = 64
    heads: int = 8
    ffn: int = 512
    layers: int = 2
    # agent behavior
    policy: str = "ovexp"  # "ovexp" | "fbe"
    map_type: str = "language"  # "language" | "vision"
    embodiment: str = "locobot"
    tau: float = 2.0
    theta: float = 0.8
    sigma: float = 0.1
    p_seg: float = 0.05
    goal_period: int = 25
    stop_distance: float = 0.6
    min_views: int = 3
    # map collection
    collect_steps: int = 500
    snapshot_every: int = 25
    keep_snapshots: int = 10
    # training
    train_scenes: int = 300
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    subset_size: int = 16
    dtype: str = "float32"
    holdout: str = ""  # comma-joined category names excluded from the loss
    # evaluation
    eval_episodes: int = 200
    max_steps: int = 500
    success_radius: float = 1.0
    workers: int = 4
    # seeds: model/training stream, first train scene, first eval scene,
    # and the evaluation stream (starts, noise, policy draws)
    seed: int = 0
    train_scene_seed: int = 1000
    eval_scene_seed: int = 5000
    eval_seed: int = 0

    def __post_init__(self):
        if self.policy not in ("ovexp", "fbe"):
            raise ConfigurationError(f"policy must be ovexp or fbe, got {self.policy!r}")
        if self.embodiment not in EMBODIMENTS:
            raise ConfigurationError(
                f"unknown embodiment {self.embodiment!r}; presets: {sorted(EMBODIMENTS)}")
        if self.crop > self.scene_size:
            raise ConfigurationError(
                f"crop {self.crop} exceeds scene size {self.scene_size}")
        if not (0 <= self.sigma <= 1 and 0 <= self.p_seg < 1):
            raise ConfigurationError("sigma in [0,1] and p_seg in [0,1) required")
        if min(self.train_scenes, self.eval_episodes, self.max_steps,
               self.workers, self.batch_size, self.epochs) < 1:
            raise ConfigurationError("counts and budgets must be >= 1")
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ConfigurationError("lr must be positive, weight_decay nonnegative")
        if not (self.success_radius > 0):
            raise ConfigurationError("success_radius must be positive")
        for name in self.holdout_names():
            if name not in DESK_CATEGORIES or name == BACKGROUND:
                raise ConfigurationError(f"holdout category {name!r} not in vocabulary")
        # delegate the rest: constructing the sub-configs runs their checks
        self.scene_config()
        self.agent_config()
        self.collect_config()
        self.train_config().torch_dtype()
        self.policy_config()

    # -- derived views -------------------------------------------------------

    def holdout_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.holdout.split(",") if n)

    def vocabulary(self) -> CategoryVocabulary:
        return CategoryVocabulary(list(DESK_CATEGORIES), dim=self.vocab_dim,
                                  seed=self.vocab_seed)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(size=self.scene_size, cell_size=self.cell_size,
                           min_rooms=self.min_rooms, max_rooms=self.max_rooms)

    def agent_config(self, mode: str | None = None,
                     map_type: str | None = None) -> AgentConfig:
        return AgentConfig(
            mode=self.policy if mode is None else mode,
            map_type=self.map_type if map_type is None else map_type,
            tau=self.tau, theta=self.theta, sigma=self.sigma,
            p_seg=self.p_seg, goal_period=self.goal_period, crop=self.crop,
            stop_distance=self.stop_distance, min_views=self.min_views)

    def collect_config(self) -> CollectConfig:
        return CollectConfig(steps=self.collect_steps,
                             snapshot_every=self.snapshot_every,
                             keep=self.keep_snapshots, sigma=self.sigma,
                             p_seg=self.p_seg, seed=self.seed)

    def policy_config(self, patch: int | None = None) -> "PolicyConfig":
        from .policy import PolicyConfig

        return PolicyConfig(
            goal_dim=self.vocab_dim, map_size=self.crop,
            patch=self.patch if patch is None else patch,
            d_model=self.d_model, d_token=self.d_token, heads=self.heads,
            ffn=self.ffn, layers=self.layers, seed=self.seed)

    def train_config(self) -> TrainConfig:
        names = self.holdout_names()
        allowed = (tuple(i for i, n in enumerate(DESK_CATEGORIES)
                         if n not in names) if names else None)
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed, crop=self.crop,
            patch=self.patch, d_model=self.d_model, d_token=self.d_token,
            heads=self.heads, ffn=self.ffn, layers=self.layers,
            subset_size=self.subset_size, dtype=self.dtype, allowed=allowed)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise DataError(f"config key {key}: {e}") from e


def config_echo(cfg: ExperimentConfig) -> str:
    """Canonical serialization, one key=value per line in field order."""
    lines = [f"{f.name}={getattr(cfg, f.name)}"
             for f in dataclasses.fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELDS:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise DataError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, val)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise DataError(f"{path}: cannot read config: {e}") from e


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        fh.write(config_echo(cfg))
