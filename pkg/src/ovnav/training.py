"""Supervised training of the long-term-goal policy.

Each sample pairs a full-size feature map (obstacle, explored, payload
channels) with per-category ground-truth occupancy rasters. Per draw the
sample is randomly cropped to the model size, flipped, and rotated by a
multiple of 90 degrees, identically on input and targets. The loss is the
federated BCE over a per-scene category subset: every category present in
the scene plus uniformly sampled absent ones, padded to a fixed size.

Optimization: AdamW (decoupled weight decay 1e-4) with a cosine-decayed
learning rate from 1e-4, 20 epochs, batch size 8. float64 by default so
finite-difference gradient checks stay tight; float32 cuts the heavy runs
roughly in half.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .embedspace import CategoryVocabulary, text_embed
from .errors import ConfigurationError, TrainingError
from .policy import PolicyConfig, PolicyModel, federated_bce_loss


@dataclass
class TrainSample:
    """One map snapshot. input_map is [C+2, M, M] (obstacle, explored,
    payload); targets is [N, M, M] binary occupancy per category; selected
    is filled by the subset rule at training time."""

    input_map: np.ndarray
    targets: np.ndarray
    scene_id: int
    selected: np.ndarray | None = None

    def __post_init__(self):
        if self.input_map.ndim != 3 or self.targets.ndim != 3:
            raise ConfigurationError("input_map and targets must be [C, M, M]")
        if self.input_map.shape[1:] != self.targets.shape[1:]:
            raise ConfigurationError(
                f"map side {self.input_map.shape[1:]} != target side {self.targets.shape[1:]}"
            )
        bad = (self.targets != 0) & (self.targets != 1)
        if bad.any():
            raise ConfigurationError("targets must be binary occupancy masks")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    crop: int = 160
    patch: int = 16
    d_model: int = 512
    d_token: int = 64
    heads: int = 8
    ffn: int = 512
    layers: int = 2
    subset_size: int = 16
    augment: bool = True
    dtype: str = "float64"
    # categories eligible for the federated loss; None = all. Zero-shot
    # models are trained with the held-out categories removed here.
    allowed: tuple[int, ...] | None = None

    def torch_dtype(self) -> torch.dtype:
        if self.dtype == "float64":
            return torch.float64
        if self.dtype == "float32":
            return torch.float32
        raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")


def federated_subset(
    present: np.ndarray, size: int, rng: np.random.Generator, allowed=None
) -> np.ndarray:
    """Category subset for the federated loss: all present categories,
    padded with uniformly sampled absent ones up to ``size`` (the whole
    pool when it is smaller). Returned sorted so the draw order cannot
    leak into downstream tensor layouts."""
    n = present.shape[0]
    pool = np.arange(n) if allowed is None else np.asarray(sorted(allowed), dtype=np.int64)
    if pool.size == 0:
        raise ConfigurationError("empty category pool for federated subset")
    pos = pool[present[pool]]
    if pos.size >= size:
        chosen = rng.choice(pos, size=min(size, pos.size), replace=False)
    else:
        neg = pool[~present[pool]]
        pad = rng.choice(neg, size=min(size - pos.size, neg.size), replace=False)
        chosen = np.concatenate([pos, pad])
    return np.sort(chosen)


def assign_subsets(dataset, n_categories: int, config: TrainConfig) -> None:
    """Fill sample.selected deterministically from (seed, scene_id)."""
    for sample in dataset:
        if sample.targets.shape[0] != n_categories:
            raise ConfigurationError(
                f"sample has {sample.targets.shape[0]} target channels, expected {n_categories}"
            )
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(int(sample.scene_id),))
        )
        present = sample.targets.reshape(n_categories, -1).any(axis=1)
        sample.selected = federated_subset(present, config.subset_size, rng, config.allowed)


def augment_pair(
    inp: np.ndarray, tgt: np.ndarray, crop: int, rng: np.random.Generator, enabled: bool
):
    """Crop, flip, rot90, applied identically to input and targets.
    Disabled -> deterministic center crop only."""
    m = inp.shape[-1]
    if crop > m:
        raise ConfigurationError(f"crop {crop} exceeds map side {m}")
    if enabled:
        r0 = int(rng.integers(0, m - crop + 1))
        c0 = int(rng.integers(0, m - crop + 1))
    else:
        r0 = c0 = (m - crop) // 2
    inp = inp[:, r0 : r0 + crop, c0 : c0 + crop]
    tgt = tgt[:, r0 : r0 + crop, c0 : c0 + crop]
    if enabled:
        if rng.random() < 0.5:
            inp = inp[:, :, ::-1]
            tgt = tgt[:, :, ::-1]
        if rng.random() < 0.5:
            inp = inp[:, ::-1, :]
            tgt = tgt[:, ::-1, :]
        k = int(rng.integers(0, 4))
        if k:
            inp = np.rot90(inp, k, axes=(1, 2))
            tgt = np.rot90(tgt, k, axes=(1, 2))
    return np.ascontiguousarray(inp), np.ascontiguousarray(tgt)


def train(dataset, vocab: CategoryVocabulary, config: TrainConfig):
    """Returns (model, curve) where curve rows are (step, lr, loss).

    Deterministic given config.seed: model init, subset draws, shuffling,
    and augmentation all derive from it. Aborts with TrainingError (and a
    diagnostics snapshot in the message) the first time the loss goes
    non-finite.
    """
    if not dataset:
        raise TrainingError("empty training dataset")
    dtype = config.torch_dtype()
    n_cat = len(vocab.names)
    assign_subsets(dataset, n_cat, config)

    pcfg = PolicyConfig(
        goal_dim=vocab.dim,
        map_size=config.crop,
        patch=config.patch,
        d_model=config.d_model,
        d_token=config.d_token,
        heads=config.heads,
        ffn=config.ffn,
        layers=config.layers,
        seed=config.seed,
    )
    model = PolicyModel(pcfg, dtype=dtype)
    goal_table = torch.stack(
        [torch.as_tensor(text_embed(vocab, name).vector, dtype=dtype) for name in vocab.names]
    )

    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    curve = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[lo : lo + config.batch_size]]
            maps, goals, targets = [], [], []
            for sample in batch:
                inp, tgt = augment_pair(
                    sample.input_map,
                    sample.targets[sample.selected],
                    config.crop,
                    rng,
                    config.augment,
                )
                maps.append(torch.as_tensor(inp, dtype=dtype))
                targets.append(torch.as_tensor(tgt, dtype=dtype))
                goals.append(goal_table[sample.selected])
            loss = federated_bce_loss(
                model, torch.stack(maps), torch.stack(goals), torch.stack(targets)
            )
            lr_now = opt.param_groups[0]["lr"]
            if not torch.isfinite(loss):
                recent = ", ".join(f"{r[2]:.5f}" for r in curve[-5:]) or "none"
                raise TrainingError(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {lr_now:.2e}); "
                    f"recent losses: {recent}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            curve.append((step, lr_now, float(loss.detach())))
            step += 1
    return model, curve


def save_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        writer.writerows(curve)


def load_loss_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "lr", "loss"]:
        raise ConfigurationError(f"{path} is not a loss curve file")
    return [(int(s), float(lr), float(loss)) for s, lr, loss in rows[1:]]
