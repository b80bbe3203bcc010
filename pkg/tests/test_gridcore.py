import numpy as np
import pytest

from ovnav.errors import ConfigurationError, DataError
from ovnav.gridcore import (
    GridMap,
    GridSpec,
    LabeledPointSet,
    Pose,
    backproject,
    normalize_angle,
    partition_patches,
    project_topdown,
    reassemble_patches,
)


def test_pose_normalizes_heading_and_clamps_tilt():
    p = Pose(0, 0, heading=-np.pi / 2, tilt=2.0)
    assert 0 <= p.heading < 2 * np.pi
    assert np.isclose(p.heading, 1.5 * np.pi)
    assert p.tilt == pytest.approx(np.pi / 3)
    assert normalize_angle(2 * np.pi) == 0.0


def test_backproject_single_ray_ahead():
    ps = backproject([1.0], [0.0], tilt=0.0, sensor_height=0.88)
    assert len(ps) == 1
    np.testing.assert_allclose(ps.points[0], [1.0, 0.0, 0.88], atol=1e-12)


def test_backproject_45deg():
    ps = backproject([np.sqrt(2.0)], [np.pi / 4], sensor_height=0.88)
    np.testing.assert_allclose(ps.points[0], [1.0, 1.0, 0.88], atol=1e-12)


def test_backproject_roundtrip_range_identity():
    # recomputed range from the optical center must reproduce the depths
    rng = np.random.default_rng(0)
    for trial in range(20):
        k = 64
        d = rng.uniform(0.05, 5.0, k)
        az = rng.uniform(-np.pi, np.pi, k)
        tilt = rng.uniform(-np.pi / 6, np.pi / 6)
        ps = backproject(d, az, tilt=tilt, sensor_height=0.88)
        center = np.array([0.0, 0.0, 0.88])
        back = np.linalg.norm(ps.points - center, axis=1)
        assert np.max(np.abs(back - d) / d) < 1e-9, f"trial {trial}"


def test_backproject_drops_bad_rays_with_tally():
    ps = backproject([1.0, np.nan, 7.0, -0.3], [0.0, 0.1, 0.2, 0.3], max_range=5.0)
    assert len(ps) == 1
    assert ps.dropped == 3


def test_backproject_empty_ok():
    ps = backproject([], [])
    assert len(ps) == 0


def test_backproject_height_override():
    ps = backproject([2.0], [0.0], heights=[1.13])
    assert ps.points[0, 2] == pytest.approx(1.13)


def _pointset(points):
    pts = np.asarray(points, dtype=np.float64)
    return LabeledPointSet(
        pts, np.zeros(len(pts), np.int64), np.ones(len(pts)), None, 0
    )


def test_project_topdown_facing_x():
    spec = GridSpec.centered_on(0.025, 0.025, 192, 0.05)
    pose = Pose(0.025, 0.025, heading=0.0)
    hits = project_topdown(_pointset([[1.0, 0.0, 0.5]]), pose, spec)
    ar, ac = spec.cell_of(pose.x, pose.y)
    assert (ar, ac) == (96, 96)
    assert hits.cols[0] - ac == 20 and hits.rows[0] - ar == 0


def test_project_topdown_facing_y_rotates_offsets():
    spec = GridSpec.centered_on(0.025, 0.025, 192, 0.05)
    pose = Pose(0.025, 0.025, heading=np.pi / 2)
    hits = project_topdown(_pointset([[1.0, 0.0, 0.5]]), pose, spec)
    ar, ac = spec.cell_of(pose.x, pose.y)
    assert hits.rows[0] - ar == 20 and hits.cols[0] - ac == 0


def test_project_topdown_matches_affine_oracle():
    rng = np.random.default_rng(3)
    spec = GridSpec(64, 0.05, (-1.6, -1.6))
    for trial in range(200):
        pose = Pose(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi))
        pt = rng.uniform(-2, 2, size=3)
        hits = project_topdown(_pointset([pt]), pose, spec)
        # independent affine computation
        c, s = np.cos(pose.heading), np.sin(pose.heading)
        xw = pose.x + c * pt[0] - s * pt[1]
        yw = pose.y + s * pt[0] + c * pt[1]
        col = int(np.floor((xw - spec.origin[0]) / spec.cell_size))
        row = int(np.floor((yw - spec.origin[1]) / spec.cell_size))
        inb = 0 <= row < 64 and 0 <= col < 64
        if inb:
            assert len(hits) == 1, f"trial {trial}"
            assert (hits.rows[0], hits.cols[0]) == (row, col), f"trial {trial}"
        else:
            assert len(hits) == 0 and hits.dropped == 1, f"trial {trial}"


def test_project_topdown_90deg_equivariance():
    spec = GridSpec(200, 0.05, (-5.0, -5.0))
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1.5, 1.5, size=(50, 3))
    base = Pose(0.025, 0.025, heading=0.3)
    rot = Pose(0.025, 0.025, heading=0.3 + np.pi / 2)
    h0 = project_topdown(_pointset(pts), base, spec)
    h1 = project_topdown(_pointset(pts), rot, spec)
    ar, ac = spec.cell_of(0.025, 0.025)
    # rotating the pose by +90deg maps offsets (dr, dc) -> (dc, -dr)
    for i in range(len(pts)):
        dr0, dc0 = h0.rows[i] - ar, h0.cols[i] - ac
        dr1, dc1 = h1.rows[i] - ar, h1.cols[i] - ac
        assert (dr1, dc1) == (dc0, -dr0), f"point {i}"


def test_partition_paper_geometry():
    m = np.zeros((18, 720, 720), dtype=np.float32)
    tokens = partition_patches(m, 16)
    assert tokens.shape == (2025, 18 * 256)
    tokens = partition_patches(m, 36)
    assert tokens.shape == (400, 18 * 36 * 36)
    assert int(np.sqrt(400)) == 20


def test_partition_roundtrip_lossless():
    rng = np.random.default_rng(5)
    for patch, m in [(16, 64), (8, 32), (20, 160)]:
        x = rng.standard_normal((5, m, m))
        back = reassemble_patches(partition_patches(x, patch), 5, patch)
        np.testing.assert_array_equal(back, x)


def test_partition_row_major_token_order():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    tok = partition_patches(x, 2)
    # token 0 holds the top-left patch, token 1 the top-right
    np.testing.assert_array_equal(tok[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tok[1], [2, 3, 6, 7])


def test_partition_indivisible_rejected():
    with pytest.raises(ConfigurationError):
        partition_patches(np.zeros((1, 30, 30)), 16)


def test_gridspec_centering_and_roundtrip():
    spec = GridSpec.centered_on(1.37, -2.44, 192, 0.05)
    r, c = spec.cell_of(1.37, -2.44)
    assert (r, c) == (96, 96)
    x, y = spec.center_of(r, c)
    rr, cc = spec.cell_of(x, y)
    assert (rr, cc) == (96, 96)
    # origin lands on the cell lattice
    assert abs(spec.origin[0] / 0.05 - round(spec.origin[0] / 0.05)) < 1e-9


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    gm = GridMap(GridSpec(48, 0.05), 3, np.float32)
    gm.data[...] = rng.random((3, 48, 48), dtype=np.float32)
    path = tmp_path / "m.ovxm"
    gm.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"OVXM"
    back = GridMap.load(path)
    assert back.size == 48 and back.channels == 3
    assert back.cell_size == pytest.approx(0.05)
    np.testing.assert_array_equal(back.data, gm.data)


def test_snapshot_bad_magic(tmp_path):
    p = tmp_path / "bad.ovxm"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataError):
        GridMap.load(p)
