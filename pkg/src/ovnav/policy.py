"""Goal-conditioned long-term-goal policy.

Encoder: the (C+2, M, M) feature map is cut into non-overlapping patches,
each linearly embedded to d=512 and given a learnable positional embedding.
A goal vector modulates the tokens through FiLM (gamma(f_g) * h(F) +
beta(f_g)) after h projects them to the transformer width d'=64, and two
pre-norm transformer layers (8 heads, feed-forward 512) mix them. The
decoder is conv(d' -> d'/2, 3x3) -> tconv(-> d'/4, 4x4 stride 4) ->
tconv(-> 1, 4x4 stride 4) -> sigmoid, so a t x t token grid always decodes
to a (16t, 16t) probability map; with patch 16 that reproduces the input
resolution.

Long-term goal = argmax over reachable cells of P * exp(-d_geo / tau).

Batching convention: maps are embedded once per sample, goals ride a
separate axis, so one map conditioned on S categories costs one patch
embed + S transformer passes. Shapes are [B, Cin, M, M] maps and
[B, S, C] goals throughout.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, DataError, PlannerError
from .planner import DistanceField

BCE_EPS = 1e-7
CKPT_MAGIC = b"OVCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    """Architecture knobs. goal_dim is the embedding-space dimension C;
    the input map carries goal_dim + 2 channels (obstacle, explored,
    payload). One model serves one map_size: the positional table is sized
    to (map_size / patch)**2 tokens."""

    goal_dim: int
    map_size: int = 160
    patch: int = 16
    d_model: int = 512
    d_token: int = 64
    heads: int = 8
    ffn: int = 512
    layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.goal_dim < 1:
            raise ConfigurationError("goal_dim must be >= 1")
        if self.map_size % self.patch != 0:
            raise ConfigurationError(
                f"map_size {self.map_size} not divisible by patch {self.patch}"
            )
        if self.d_token % self.heads != 0:
            raise ConfigurationError("d_token must be divisible by heads")
        if self.d_token % 4 != 0 or self.d_token < 4:
            raise ConfigurationError("d_token must be a multiple of 4 (decoder halves it twice)")
        if min(self.d_model, self.ffn, self.layers, self.heads) < 1:
            raise ConfigurationError("d_model, ffn, layers, heads must be positive")

    @property
    def in_channels(self) -> int:
        return self.goal_dim + 2

    @property
    def tokens_per_side(self) -> int:
        return self.map_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.tokens_per_side**2


def expected_param_count(cfg: PolicyConfig) -> int:
    """Closed-form parameter count; the tests hold the module to it."""
    d, dp, ff = cfg.d_model, cfg.d_token, cfg.ffn
    total = (cfg.in_channels * cfg.patch**2) * d + d  # patch embed
    total += cfg.n_tokens * d  # positional table
    total += d * dp + dp  # h
    total += 2 * (cfg.goal_dim * dp + dp)  # gamma, beta
    attn = 3 * dp * dp + 3 * dp + dp * dp + dp  # in-proj + out-proj
    mlp = dp * ff + ff + ff * dp + dp
    norms = 2 * (2 * dp)
    total += cfg.layers * (attn + mlp + norms)
    c1, c2 = dp // 2, dp // 4
    total += dp * c1 * 9 + c1
    total += c1 * c2 * 16 + c2
    total += c2 * 1 * 16 + 1
    return total


class PolicyModel(nn.Module):
    """pi(M, g) -> goal probability map. Deterministic given config.seed."""

    def __init__(self, config: PolicyConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        cfg = config
        self.patch_embed = nn.Linear(cfg.in_channels * cfg.patch**2, cfg.d_model)
        self.pos_embed = nn.Parameter(torch.randn(cfg.n_tokens, cfg.d_model) * 0.02)
        self.film_h = nn.Linear(cfg.d_model, cfg.d_token)
        self.film_gamma = nn.Linear(cfg.goal_dim, cfg.d_token)
        self.film_beta = nn.Linear(cfg.goal_dim, cfg.d_token)
        # fresh layers rather than nn.TransformerEncoder: its deepcopy
        # cloning would give every depth identical initial weights
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=cfg.d_token,
                nhead=cfg.heads,
                dim_feedforward=cfg.ffn,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(cfg.layers)
        )
        c1, c2 = cfg.d_token // 2, cfg.d_token // 4
        self.dec_conv = nn.Conv2d(cfg.d_token, c1, 3, padding=1)
        self.dec_up1 = nn.ConvTranspose2d(c1, c2, 4, stride=4)
        self.dec_up2 = nn.ConvTranspose2d(c2, 1, 4, stride=4)
        with torch.no_grad():
            self.dec_up2.bias.fill_(-2.0)  # sparse prior: sigmoid(-2) ~ 0.12
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def embed_tokens(self, maps: torch.Tensor) -> torch.Tensor:
        """[B, Cin, M, M] -> [B, n, d]: patch partition, linear embed, + pos."""
        cfg = self.config
        if maps.ndim != 4 or maps.shape[1] != cfg.in_channels:
            raise ConfigurationError(
                f"expected maps [B, {cfg.in_channels}, {cfg.map_size}, {cfg.map_size}], "
                f"got {tuple(maps.shape)}"
            )
        if maps.shape[2] != cfg.map_size or maps.shape[3] != cfg.map_size:
            raise ConfigurationError(
                f"map side {tuple(maps.shape[2:])} != configured {cfg.map_size}"
            )
        b, c = maps.shape[:2]
        t, p = cfg.tokens_per_side, cfg.patch
        # row-major token order, (channel, dr, dc) within a token
        x = maps.reshape(b, c, t, p, t, p).permute(0, 2, 4, 1, 3, 5)
        x = x.reshape(b, t * t, c * p * p)
        return self.patch_embed(x) + self.pos_embed

    def film(self, tokens: torch.Tensor, goals: torch.Tensor) -> torch.Tensor:
        """tokens [B, n, d], goals [B, S, C] -> F_g [B, S, n, d']."""
        if goals.ndim != 3 or goals.shape[-1] != self.config.goal_dim:
            raise ConfigurationError(
                f"expected goals [B, S, {self.config.goal_dim}], got {tuple(goals.shape)}"
            )
        h = self.film_h(tokens)
        gamma = self.film_gamma(goals)
        beta = self.film_beta(goals)
        return gamma[:, :, None, :] * h[:, None, :, :] + beta[:, :, None, :]

    def contextualize(self, f_g: torch.Tensor) -> torch.Tensor:
        b, s, n, dp = f_g.shape
        x = f_g.reshape(b * s, n, dp)
        for block in self.blocks:
            x = block(x)
        return x.reshape(b, s, n, dp)

    def encode(self, maps: torch.Tensor, goals: torch.Tensor) -> torch.Tensor:
        return self.contextualize(self.film(self.embed_tokens(maps), goals))

    def decode(self, f_m: torch.Tensor) -> torch.Tensor:
        """[B, S, n, d'] -> [B, S, 16t, 16t] probability maps, t = sqrt(n)."""
        b, s, n, dp = f_m.shape
        t = math.isqrt(n)
        if t * t != n:
            raise ConfigurationError(f"token count {n} is not a square")
        x = f_m.reshape(b * s, t, t, dp).permute(0, 3, 1, 2)
        x = F.relu(self.dec_conv(x))
        x = F.relu(self.dec_up1(x))
        x = torch.sigmoid(self.dec_up2(x))
        return x.reshape(b, s, 16 * t, 16 * t)

    def forward(self, maps: torch.Tensor, goals: torch.Tensor) -> torch.Tensor:
        """maps [B, Cin, M, M], goals [B, C] -> [B, side, side]."""
        f_m = self.encode(maps, goals[:, None, :])
        return self.decode(f_m)[:, 0]

    @torch.no_grad()
    def predict(self, map_data: np.ndarray, goal_vec: np.ndarray) -> np.ndarray:
        """Single-map convenience wrapper; returns a float64 array."""
        maps = torch.as_tensor(np.ascontiguousarray(map_data), dtype=self.dtype)[None]
        goal = torch.as_tensor(np.asarray(goal_vec), dtype=self.dtype)[None]
        return self(maps, goal)[0].numpy().astype(np.float64)


def binary_cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean BCE with predictions clamped to [eps, 1-eps]."""
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def federated_bce_loss(
    model: PolicyModel,
    maps: torch.Tensor,
    goals: torch.Tensor,
    targets: torch.Tensor,
) -> torch.Tensor:
    """Mean BCE over the selected categories and all cells.

    maps [B, Cin, M, M], goals [B, S, C], targets [B, S, H, W] in {0, 1}.
    Targets are nearest-resampled when the decoder side differs from the
    target side (patch != 16)."""
    prob = model.decode(model.encode(maps, goals))
    if prob.shape[-2:] != targets.shape[-2:]:
        b, s = targets.shape[:2]
        targets = F.interpolate(
            targets.reshape(b * s, 1, *targets.shape[-2:]), size=prob.shape[-2:], mode="nearest"
        ).reshape(b, s, *prob.shape[-2:])
    return binary_cross_entropy(prob, targets)


def select_goal(prob: np.ndarray, dist: DistanceField, tau: float = 2.0):
    """argmax of P * exp(-d_geo / tau) over reachable cells.

    Unreachable cells (infinite distance) never win; ties break to the
    smallest row-major index. tau in meters; tau = inf disables weighting.
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    p = np.asarray(prob, dtype=np.float64)
    if p.shape != dist.values.shape:
        raise ConfigurationError(
            f"probability map {p.shape} vs distance field {dist.values.shape}"
        )
    finite = np.isfinite(dist.values)
    if not finite.any():
        raise PlannerError("no reachable cell to select a goal from")
    score = np.full(p.shape, -1.0)
    score[finite] = p[finite] * np.exp(-dist.values[finite] / tau)
    idx = int(np.argmax(score))
    return idx // p.shape[1], idx % p.shape[1]


def save_checkpoint(path, model: PolicyModel) -> None:
    """Binary checkpoint: magic, version, config echo, named f64 tensors."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(
            struct.pack(
                "<9i",
                cfg.goal_dim,
                cfg.map_size,
                cfg.patch,
                cfg.d_model,
                cfg.d_token,
                cfg.heads,
                cfg.ffn,
                cfg.layers,
                cfg.seed,
            )
        )
        state = model.state_dict()
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            arr = tensor.detach().cpu().numpy().astype("<f8")
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> PolicyModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"truncated checkpoint {path}")
        out = blob[off : off + n]
        off += n
        return out

    if take(4) != CKPT_MAGIC:
        raise DataError(f"{path} is not a policy checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    fields = struct.unpack("<9i", take(36))
    cfg = PolicyConfig(
        goal_dim=fields[0],
        map_size=fields[1],
        patch=fields[2],
        d_model=fields[3],
        d_token=fields[4],
        heads=fields[5],
        ffn=fields[6],
        layers=fields[7],
        seed=fields[8],
    )
    (n_tensors,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}i", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    model = PolicyModel(cfg, dtype=torch.float64)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise DataError(f"checkpoint tensors do not match the config echo: {exc}") from exc
    return model.to(dtype)
