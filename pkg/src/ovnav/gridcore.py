"""Coordinate frames, raster map container, projection and patch partitioning.

Conventions used everywhere downstream:

- World frame: x, y in meters, z up. heading is the angle of the agent's
  forward axis measured CCW from +x, kept in [0, 2pi). Positive turn = left.
- Ego (camera) frame: x forward, y left, z up. Azimuth is CCW, so +45deg is
  front-left. Positive tilt looks up.
- Grid frame: cell (row, col) covers [col*h, (col+1)*h) x [row*h, (row+1)*h)
  in world (x, y), h = cell_size. So col tracks x and row tracks y. A map is
  a window onto this lattice with an origin snapped to a multiple of h, which
  keeps map cells aligned with scene cells.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError

TWO_PI = 2.0 * np.pi

SNAPSHOT_MAGIC = b"OVXM"
SNAPSHOT_VERSION = 1


def normalize_angle(a: float) -> float:
    """Wrap an angle into [0, 2pi)."""
    a = float(a) % TWO_PI
    return a if a >= 0.0 else a + TWO_PI


@dataclass
class Pose:
    """Agent pose: allocentric position (m), heading and camera tilt (rad)."""

    x: float
    y: float
    heading: float = 0.0
    tilt: float = 0.0

    TILT_LIMIT = np.pi / 3.0

    def __post_init__(self):
        self.heading = normalize_angle(self.heading)
        self.tilt = float(np.clip(self.tilt, -self.TILT_LIMIT, self.TILT_LIMIT))

    def turned(self, delta: float) -> "Pose":
        return Pose(self.x, self.y, self.heading + delta, self.tilt)

    def moved(self, dist: float) -> "Pose":
        return Pose(
            self.x + dist * np.cos(self.heading),
            self.y + dist * np.sin(self.heading),
            self.heading,
            self.tilt,
        )

    def tilted(self, delta: float) -> "Pose":
        return Pose(self.x, self.y, self.heading, self.tilt + delta)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a map window: M cells per side, cell size in meters, and
    the world coordinate of the (row 0, col 0) cell corner.

    The origin is always snapped onto the cell_size lattice so that windows
    with different origins still share cell boundaries.
    """

    size: int
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    @staticmethod
    def centered_on(x: float, y: float, size: int, cell_size: float) -> "GridSpec":
        """Window whose center cell contains (x, y), lattice-aligned."""
        half = size // 2
        ox = (np.floor(x / cell_size) - half) * cell_size
        oy = (np.floor(y / cell_size) - half) * cell_size
        return GridSpec(size, cell_size, (float(ox), float(oy)))

    @property
    def extent(self) -> float:
        return self.size * self.cell_size

    def cell_of(self, x, y):
        """World point(s) -> (row, col) int arrays. No bounds check."""
        col = np.floor((np.asarray(x) - self.origin[0]) / self.cell_size).astype(np.int64)
        row = np.floor((np.asarray(y) - self.origin[1]) / self.cell_size).astype(np.int64)
        return row, col

    def center_of(self, row, col):
        """Cell center(s) -> world (x, y)."""
        x = self.origin[0] + (np.asarray(col) + 0.5) * self.cell_size
        y = self.origin[1] + (np.asarray(row) + 0.5) * self.cell_size
        return x, y

    def in_bounds(self, row, col):
        return (row >= 0) & (row < self.size) & (col >= 0) & (col < self.size)


class GridMap:
    """Multi-channel square raster, channel-major [C_total, M, M].

    Confidence channels live in [0, 1]; feature channels are finite reals.
    dtype is configurable (float64 keeps long running means exact; snapshots
    are always serialized as f32 per the file format).
    """

    def __init__(self, spec: GridSpec, channels: int, dtype=np.float32, data=None):
        if channels < 1 or spec.size < 1:
            raise ConfigurationError("GridMap needs at least one channel and one cell")
        self.spec = spec
        if data is None:
            data = np.zeros((channels, spec.size, spec.size), dtype=dtype)
        else:
            data = np.asarray(data, dtype=dtype)
            if data.shape != (channels, spec.size, spec.size):
                raise ConfigurationError(
                    f"data shape {data.shape} != {(channels, spec.size, spec.size)}"
                )
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def size(self) -> int:
        return self.spec.size

    @property
    def cell_size(self) -> float:
        return self.spec.cell_size

    def copy(self) -> "GridMap":
        return GridMap(self.spec, self.channels, self.data.dtype, self.data.copy())

    def save(self, path) -> None:
        """Snapshot: magic 'OVXM', version u16, M u32, channels u32,
        cell_size f32, then channel-major f32 little-endian payload."""
        header = SNAPSHOT_MAGIC + struct.pack(
            "<HIIf", SNAPSHOT_VERSION, self.size, self.channels, self.cell_size
        )
        payload = np.ascontiguousarray(self.data, dtype="<f4")
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload.tobytes())

    @staticmethod
    def load(path, dtype=np.float32) -> "GridMap":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != SNAPSHOT_MAGIC:
            raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {SNAPSHOT_MAGIC!r}")
        version, size, channels, cell_size = struct.unpack("<HIIf", raw[4:18])
        if version != SNAPSHOT_VERSION:
            raise DataError(f"{path}: unsupported snapshot version {version}")
        expect = channels * size * size * 4
        body = raw[18:]
        if len(body) != expect:
            raise DataError(f"{path}: payload is {len(body)} bytes, expected {expect}")
        data = np.frombuffer(body, dtype="<f4").reshape(channels, size, size)
        spec = GridSpec(size, float(cell_size))
        return GridMap(spec, channels, dtype, data.astype(dtype))


@dataclass
class LabeledPointSet:
    """Back-projected sensor points in the camera frame with per-point
    category labels, confidences and optional feature vectors."""

    points: np.ndarray  # [K, 3] float64
    labels: np.ndarray  # [K] int64
    confidences: np.ndarray  # [K] float64
    features: np.ndarray | None = None  # [K, C] float64
    dropped: int = 0  # NaN/out-of-range rays, tallied not fatal

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class CellHits:
    """Per-point map-cell hits produced by project_topdown. Out-of-bounds
    points are dropped and tallied, mirroring real projection pipelines."""

    rows: np.ndarray  # [K] int64
    cols: np.ndarray  # [K] int64
    labels: np.ndarray  # [K] int64
    confidences: np.ndarray  # [K] float64
    heights: np.ndarray  # [K] float64, world z of each point
    features: np.ndarray | None = None  # [K, C]
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.rows)


def backproject(
    depths,
    azimuths,
    tilt: float = 0.0,
    sensor_height: float = 0.88,
    labels=None,
    confidences=None,
    features=None,
    heights=None,
    max_range: float = 5.0,
) -> LabeledPointSet:
    """Lift a horizontal ray fan into camera-frame 3-D points.

    Pure geometry: x = d cos(tilt) cos(az), y = d cos(tilt) sin(az),
    z = sensor_height + d sin(tilt), so the recomputed range from the optical
    center (0, 0, sensor_height) reproduces the input depth exactly. When the
    simulator supplies per-ray surface heights (the sampled z of the hit
    object) these override the geometric z; the ray fan is 1-D, so surface
    height is observation data rather than something tilt can recover.

    NaN or out-of-range depths drop the ray and bump the ``dropped`` tally.
    """
    depths = np.asarray(depths, dtype=np.float64)
    azimuths = np.asarray(azimuths, dtype=np.float64)
    if depths.shape != azimuths.shape:
        raise ConfigurationError("depths and azimuths must have the same length")
    k = depths.size
    if k == 0:
        return LabeledPointSet(
            np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0), None, 0
        )

    valid = np.isfinite(depths) & (depths > 0.0) & (depths <= max_range)
    dropped = int(k - valid.sum())

    d = depths[valid]
    az = azimuths[valid]
    ct, st = np.cos(tilt), np.sin(tilt)
    pts = np.empty((d.size, 3), dtype=np.float64)
    pts[:, 0] = d * ct * np.cos(az)
    pts[:, 1] = d * ct * np.sin(az)
    pts[:, 2] = sensor_height + d * st
    if heights is not None:
        pts[:, 2] = np.asarray(heights, dtype=np.float64)[valid]

    if labels is None:
        lab = np.zeros(d.size, dtype=np.int64)
    else:
        lab = np.asarray(labels, dtype=np.int64)[valid]
    if confidences is None:
        conf = np.ones(d.size, dtype=np.float64)
    else:
        conf = np.asarray(confidences, dtype=np.float64)[valid]
    feat = None
    if features is not None:
        feat = np.asarray(features, dtype=np.float64)[valid]

    return LabeledPointSet(pts, lab, conf, feat, dropped)


def project_topdown(points: LabeledPointSet, pose: Pose, spec: GridSpec) -> CellHits:
    """Transform camera-frame points to allocentric map cells.

    Ego -> world is the planar rotation by pose.heading plus translation;
    z passes through untouched (height binning happens in mapping, which
    checks z against the obstacle band). Points landing outside the map
    window are dropped and tallied.
    """
    k = len(points)
    if k == 0:
        return CellHits(
            np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
            np.zeros(0), np.zeros(0), None, points.dropped,
        )
    c, s = np.cos(pose.heading), np.sin(pose.heading)
    xe, ye = points.points[:, 0], points.points[:, 1]
    xw = pose.x + c * xe - s * ye
    yw = pose.y + s * xe + c * ye
    row, col = spec.cell_of(xw, yw)
    ok = spec.in_bounds(row, col)
    dropped = points.dropped + int((~ok).sum())
    feat = None if points.features is None else points.features[ok]
    return CellHits(
        rows=row[ok],
        cols=col[ok],
        labels=points.labels[ok],
        confidences=points.confidences[ok],
        heights=points.points[ok, 2],
        features=feat,
        dropped=dropped,
    )


def partition_patches(data: np.ndarray, patch: int) -> np.ndarray:
    """Split a [C, M, M] raster into non-overlapping patch tokens.

    Returns [(M/patch)^2, C*patch*patch] with tokens in row-major grid order
    and each token flattened channel-major (c, dr, dc). Lossless; see
    reassemble_patches.
    """
    if data.ndim != 3 or data.shape[1] != data.shape[2]:
        raise ConfigurationError(f"expected [C, M, M], got {data.shape}")
    ch, m, _ = data.shape
    if patch < 1 or m % patch != 0:
        raise ConfigurationError(f"map size {m} not divisible by patch {patch}")
    n = m // patch
    # [C, n, p, n, p] -> [n, n, C, p, p] -> [n*n, C*p*p]
    tok = data.reshape(ch, n, patch, n, patch)
    tok = tok.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(tok).reshape(n * n, ch * patch * patch)


def reassemble_patches(tokens: np.ndarray, channels: int, patch: int) -> np.ndarray:
    """Inverse of partition_patches."""
    n2, dim = tokens.shape
    n = int(round(np.sqrt(n2)))
    if n * n != n2 or dim != channels * patch * patch:
        raise ConfigurationError(
            f"token grid {tokens.shape} inconsistent with C={channels}, patch={patch}"
        )
    tok = tokens.reshape(n, n, channels, patch, patch)
    tok = tok.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(tok).reshape(channels, n * patch, n * patch)
