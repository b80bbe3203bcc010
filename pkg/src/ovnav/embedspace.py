"""Deterministic synthetic joint embedding space standing in for CLIP/LSeg.

Category text vectors, noisy pixel embeddings and noisy image-goal embeddings
all live on the unit sphere in R^C and are mutually aligned: with zero noise
the three routes produce the same vector for a category. That alignment is
the testable core of the vision/language transfer premise.

Noise convention: ``sigma`` is the expected Euclidean norm of the Gaussian
perturbation added before renormalizing (per-component std sigma/sqrt(C)).
With that convention cos(clean, noisy) ~ 1/sqrt(1+sigma^2), so sigma = 0.15
still gives cosine ~0.989, far above cross-category cosines (< 0.5), which is
what makes the 0.8 identification threshold meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

BACKGROUND = "other"


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        return v
    return v / n


class CategoryVocabulary:
    """N fixed unit vectors of dim C, the f^l table. Last name is the
    background class. Construction rejection-resamples any vector whose
    |cos| against an earlier one is >= 0.5, so categories stay separated;
    for C >= 32 rejections are rare, for small C the loop works harder.
    Regeneration from (names, dim, seed) is bit-identical.
    """

    MAX_RESAMPLES = 10_000

    def __init__(self, names: list[str], dim: int = 64, seed: int = 0):
        if len(names) < 2:
            raise ConfigurationError("vocabulary needs at least 2 categories")
        if len(set(names)) != len(names):
            raise ConfigurationError("category names must be unique")
        if names[-1] != BACKGROUND:
            raise ConfigurationError(f"last category must be {BACKGROUND!r}")
        if dim < 2:
            raise ConfigurationError("embedding dim must be >= 2")
        self.names = list(names)
        self.dim = int(dim)
        self.seed = int(seed)
        self._index = {n: i for i, n in enumerate(self.names)}
        self.vectors = self._build()

    def _build(self) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        n = len(self.names)
        vecs = np.zeros((n, self.dim), dtype=np.float64)
        for i in range(n):
            for attempt in range(self.MAX_RESAMPLES):
                v = _unit(rng.standard_normal(self.dim))
                if i == 0 or np.max(np.abs(vecs[:i] @ v)) < 0.5:
                    vecs[i] = v
                    break
            else:
                raise ConfigurationError(
                    f"could not place {n} categories in dim {self.dim} "
                    f"with pairwise |cos| < 0.5; increase dim"
                )
        return vecs

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown category {name!r}; have {self.names}") from None

    def save(self, path) -> None:
        """Plain text: header 'dim=<C> seed=<u64>', then one name per line."""
        with open(path, "w") as f:
            f.write(f"dim={self.dim} seed={self.seed}\n")
            for name in self.names:
                f.write(name + "\n")

    @staticmethod
    def load(path) -> "CategoryVocabulary":
        with open(path) as f:
            lines = [ln.rstrip("\n") for ln in f]
        if not lines or not lines[0].startswith("dim="):
            raise DataError(f"{path}: missing 'dim=<C> seed=<u64>' header")
        try:
            head = dict(part.split("=", 1) for part in lines[0].split())
            dim, seed = int(head["dim"]), int(head["seed"])
        except (ValueError, KeyError) as e:
            raise DataError(f"{path}: bad vocabulary header {lines[0]!r}") from e
        names = [ln for ln in lines[1:] if ln]
        return CategoryVocabulary(names, dim, seed)


@dataclass(frozen=True)
class GoalEmbedding:
    """Resolved navigation goal: unit vector f_g plus its modality."""

    vector: np.ndarray
    modality: str  # "text" | "image"

    def __post_init__(self):
        if self.modality not in ("text", "image"):
            raise ConfigurationError(f"bad goal modality {self.modality!r}")
        v = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("goal embedding must be finite")
        object.__setattr__(self, "vector", _unit(v))


def text_embed(vocab: CategoryVocabulary, name: str) -> GoalEmbedding:
    """Exact stored category vector; the CLIP-text stand-in."""
    return GoalEmbedding(vocab.vectors[vocab.index_of(name)].copy(), "text")


def _perturb(vec: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ConfigurationError("noise sigma must be >= 0")
    if sigma == 0.0:
        return vec.copy()
    noise = rng.standard_normal(vec.size) * (sigma / np.sqrt(vec.size))
    return _unit(vec + noise)


def pixel_embed(
    vocab: CategoryVocabulary, label: int, noise_sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Noisy per-pixel embedding aligned with its category vector; the LSeg
    stand-in. sigma=0 reproduces the text vector exactly."""
    return _perturb(vocab.vectors[label], noise_sigma, rng)


def pixel_embed_batch(
    vocab: CategoryVocabulary, labels: np.ndarray, noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized pixel_embed for a ray fan; one row per label."""
    labels = np.asarray(labels, dtype=np.int64)
    base = vocab.vectors[labels]
    if noise_sigma < 0:
        raise ConfigurationError("noise sigma must be >= 0")
    if noise_sigma == 0.0 or labels.size == 0:
        return base.copy()
    noise = rng.standard_normal(base.shape) * (noise_sigma / np.sqrt(vocab.dim))
    out = base + noise
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def image_goal_embed(
    vocab: CategoryVocabulary, label: int, instance_jitter: float, instance_seed: int
) -> GoalEmbedding:
    """Goal embedding of a specific object instance; the CLIP-image stand-in.

    The jitter RNG is seeded from the instance identity, so one instance
    always maps to one embedding (re-identification is possible downstream).
    """
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=int(instance_seed) & (2**64 - 1),
                                               spawn_key=(int(label),)))
    )
    return GoalEmbedding(_perturb(vocab.vectors[label], instance_jitter, rng), "image")


def identify_goal(
    payload: np.ndarray,
    counts: np.ndarray,
    goal: GoalEmbedding,
    threshold: float,
) -> tuple[int, int] | None:
    """Scan a feature map for the goal: the observed cell with maximum cosine
    against f_g, if that maximum clears the threshold. Ties break to the
    smallest row-major index. Returns (row, col) or None.

    payload is [C, M, M]; counts [M, M] marks observed cells (count > 0).
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigurationError("identification threshold must be in (0, 1)")
    mask = counts > 0
    if not mask.any():
        return None
    sims = np.einsum("cij,c->ij", payload, goal.vector)
    norms = np.linalg.norm(payload, axis=0)
    valid = mask & (norms > 0)
    if not valid.any():
        return None
    sims = np.where(valid, sims / np.where(norms > 0, norms, 1.0), -np.inf)
    best_flat = int(np.argmax(sims))  # argmax takes the first max: row-major tie-break
    best = float(sims.flat[best_flat])
    if best < threshold:
        return None
    m = sims.shape[1]
    return best_flat // m, best_flat % m
