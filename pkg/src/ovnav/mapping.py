"""The three map representations and their update rules.

- CategoricalSemanticMap: N+2 channels (obstacle, explored, per-category
  confidence), max-fused over time. Training-time source.
- Language map M_L: semantic channels collapsed to per-cell mixtures of
  category vectors (confidence-weighted mean). Training input.
- Vision map M_V: per-cell running mean of projected pixel embeddings with
  an update-count grid. Inference-time input for the transfer path.

Feature payloads default to float64 so the running mean stays exact over
thousands of updates; snapshots serialize as f32 per the map file format.
"""

from __future__ import annotations

import numpy as np

from .embedspace import CategoryVocabulary
from .errors import ConfigurationError, DataError
from .gridcore import CellHits, GridMap, GridSpec, SNAPSHOT_MAGIC

OBSTACLE_BAND = (0.1, 1.5)  # hit heights in this z range mark obstacle (m)


def _group_by_cell(rows: np.ndarray, cols: np.ndarray, size: int):
    """Group point indices by flat cell id. Returns (unique flat ids,
    inverse index array mapping each point to its group)."""
    flat = rows * size + cols
    uniq, inverse = np.unique(flat, return_inverse=True)
    return uniq, inverse


class CategoricalSemanticMap:
    """M^s: channel 0 obstacle, channel 1 explored, 2..N+1 category
    confidences, all in [0, 1]. Category channels only ever grow (max
    fusion), so obstacle implies explored after every update."""

    def __init__(self, spec: GridSpec, n_categories: int, dtype=np.float32):
        if n_categories < 1:
            raise ConfigurationError("need at least one category channel")
        self.n_categories = n_categories
        self.grid = GridMap(spec, n_categories + 2, dtype=dtype)

    @property
    def spec(self) -> GridSpec:
        return self.grid.spec

    @property
    def obstacle(self) -> np.ndarray:
        return self.grid.data[0]

    @property
    def explored(self) -> np.ndarray:
        return self.grid.data[1]

    @property
    def categories(self) -> np.ndarray:
        return self.grid.data[2:]

    def copy(self) -> "CategoricalSemanticMap":
        out = CategoricalSemanticMap(self.spec, self.n_categories, self.grid.data.dtype)
        out.grid.data[...] = self.grid.data
        return out

    def mark_free(self, rows: np.ndarray, cols: np.ndarray) -> None:
        """Mark ray-traversed free cells as explored."""
        self.grid.data[1, rows, cols] = 1.0

    def update(self, hits: CellHits, band: tuple[float, float] = OBSTACLE_BAND) -> None:
        """Fold one frame of cell hits into the map.

        Incoming confidence for (cell, category) is the confidence-weighted
        share of the cell's points carrying that label this frame (a single
        clean hit of confidence c contributes c), capped at 1, then max-fused
        with the stored value. Any hit marks explored; hits whose height
        falls inside the obstacle band mark obstacle.
        """
        if len(hits) == 0:
            return
        if hits.labels.max(initial=-1) >= self.n_categories:
            raise ConfigurationError("hit label outside the category range")
        m = self.spec.size
        uniq, inv = _group_by_cell(hits.rows, hits.cols, m)

        n_in_cell = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
        # confidence mass per (cell, category)
        conf = np.zeros((len(uniq), self.n_categories), dtype=np.float64)
        np.add.at(conf, (inv, hits.labels), hits.confidences)
        incoming = np.minimum(conf / n_in_cell[:, None], 1.0)

        r, c = uniq // m, uniq % m
        cat = self.grid.data[2:, r, c]  # [N, n_cells]
        np.maximum(cat, incoming.T.astype(cat.dtype), out=cat)
        self.grid.data[2:, r, c] = cat

        self.grid.data[1, r, c] = 1.0
        in_band = (hits.heights >= band[0]) & (hits.heights < band[1])
        if in_band.any():
            self.grid.data[0, hits.rows[in_band], hits.cols[in_band]] = 1.0


class FeatureMap:
    """M_L or M_V: channels 0-1 obstacle/explored, 2..C+1 feature payload,
    plus the update-count grid N[i, j]."""

    def __init__(self, spec: GridSpec, dim: int, dtype=np.float64):
        if dim < 1:
            raise ConfigurationError("feature dim must be >= 1")
        self.dim = dim
        self.grid = GridMap(spec, dim + 2, dtype=dtype)
        self.counts = np.zeros((spec.size, spec.size), dtype=np.int64)

    @property
    def spec(self) -> GridSpec:
        return self.grid.spec

    @property
    def obstacle(self) -> np.ndarray:
        return self.grid.data[0]

    @property
    def explored(self) -> np.ndarray:
        return self.grid.data[1]

    @property
    def payload(self) -> np.ndarray:
        return self.grid.data[2:]

    def copy(self) -> "FeatureMap":
        out = FeatureMap(self.spec, self.dim, self.grid.data.dtype)
        out.grid.data[...] = self.grid.data
        out.counts[...] = self.counts
        return out

    def mark_free(self, rows: np.ndarray, cols: np.ndarray) -> None:
        self.grid.data[1, rows, cols] = 1.0

    def update_vision(
        self, hits: CellHits, band: tuple[float, float] = OBSTACLE_BAND
    ) -> None:
        """One running-mean step per touched cell.

        Multiple points landing in a cell within one frame are averaged
        first, then the cell takes a single update:
        payload <- (payload * N + mean_incoming) / (N + 1), N <- N + 1.
        Untouched cells are left alone. Obstacle/explored update as in the
        semantic path.
        """
        if len(hits) == 0:
            return
        if hits.features is None:
            raise ConfigurationError("vision update needs per-point features")
        if hits.features.shape[1] != self.dim:
            raise ConfigurationError(
                f"feature dim {hits.features.shape[1]} != map dim {self.dim}"
            )
        m = self.spec.size
        uniq, inv = _group_by_cell(hits.rows, hits.cols, m)
        n_in_cell = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
        acc = np.zeros((len(uniq), self.dim), dtype=np.float64)
        np.add.at(acc, inv, hits.features)
        mean_incoming = acc / n_in_cell[:, None]

        r, c = uniq // m, uniq % m
        n = self.counts[r, c].astype(np.float64)
        payload = self.grid.data[2:, r, c]  # [C, n_cells]
        payload = (payload * n + mean_incoming.T) / (n + 1.0)
        self.grid.data[2:, r, c] = payload
        self.counts[r, c] += 1

        self.grid.data[1, r, c] = 1.0
        in_band = (hits.heights >= band[0]) & (hits.heights < band[1])
        if in_band.any():
            self.grid.data[0, hits.rows[in_band], hits.cols[in_band]] = 1.0


def to_language_map(sem: CategoricalSemanticMap, vocab: CategoryVocabulary) -> FeatureMap:
    """Collapse semantic channels into per-cell embedding mixtures:
    payload(i,j) = sum_cat conf_cat * f_cat / sum_cat conf_cat.

    Cells with zero total confidence get the zero vector and count 0 (the
    denominator is undefined there; zero keeps unexplored cells inert in the
    policy input). Obstacle/explored channels copy through; counts are 1
    where a mixture exists.
    """
    if len(vocab) != sem.n_categories:
        raise ConfigurationError(
            f"vocabulary size {len(vocab)} != map categories {sem.n_categories}"
        )
    out = FeatureMap(sem.spec, vocab.dim, dtype=np.float64)
    conf = sem.categories.astype(np.float64)  # [N, M, M]
    denom = conf.sum(axis=0)
    mix = np.einsum("nij,nc->cij", conf, vocab.vectors)
    nonzero = denom > 0
    mix = np.where(nonzero[None], mix / np.where(nonzero, denom, 1.0)[None], 0.0)
    out.grid.data[2:] = mix
    out.grid.data[0] = sem.obstacle
    out.grid.data[1] = sem.explored
    observed = nonzero & (np.linalg.norm(mix, axis=0) > 0)
    out.counts[...] = observed.astype(np.int64)
    return out


def save_semantic_snapshot(path, sem: CategoricalSemanticMap, vocab: CategoryVocabulary) -> None:
    """Map snapshot plus a trailing vocabulary block for channel identity."""
    sem.grid.save(path)
    with open(path, "ab") as f:
        f.write(f"dim={vocab.dim} seed={vocab.seed}\n".encode())
        for name in vocab.names:
            f.write((name + "\n").encode())


def load_semantic_snapshot(path, dtype=np.float32):
    """Returns (CategoricalSemanticMap, CategoryVocabulary)."""
    import struct

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SNAPSHOT_MAGIC:
        raise DataError(f"{path}: bad magic")
    _, size, channels, cell_size = struct.unpack("<HIIf", raw[4:18])
    body_end = 18 + channels * size * size * 4
    data = np.frombuffer(raw[18:body_end], dtype="<f4").reshape(channels, size, size)
    trailer = raw[body_end:].decode().splitlines()
    if not trailer or not trailer[0].startswith("dim="):
        raise DataError(f"{path}: semantic snapshot missing vocabulary trailer")
    head = dict(part.split("=", 1) for part in trailer[0].split())
    vocab = CategoryVocabulary([ln for ln in trailer[1:] if ln], int(head["dim"]), int(head["seed"]))
    if len(vocab) != channels - 2:
        raise DataError(f"{path}: vocabulary size {len(vocab)} != {channels - 2}")
    sem = CategoricalSemanticMap(GridSpec(size, float(cell_size)), channels - 2, dtype)
    sem.grid.data[...] = data.astype(dtype)
    return sem, vocab
