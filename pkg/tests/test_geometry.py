import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lidarloc.errors import InvalidInputError
from lidarloc.geometry import (
    Pose,
    apply_pose,
    compose,
    invert_pose,
    pose_error,
    voxelize,
    yaw_rotation,
)


def random_pose(rng):
    rot = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    return Pose(rot, rng.normal(scale=20.0, size=3))


def test_apply_identity_and_translation():
    cloud = np.random.default_rng(0).normal(size=(10, 3))
    assert np.array_equal(apply_pose(Pose.identity(), cloud), cloud)
    out = apply_pose(Pose.from_translation([0, 0, 5]), [[1.0, 1.0, 1.0]])
    assert np.array_equal(out, [[1.0, 1.0, 6.0]])


def test_apply_yaw_quarter_turn():
    # hand-written Rz(90deg)
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    out = apply_pose(Pose(rz, np.zeros(3)), [[1.0, 0.0, 0.0]])
    assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12, rtol=0)
    out = apply_pose(yaw_rotation(math.pi / 2), [[1.0, 0.0, 0.0]])
    assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12, rtol=0)


def test_apply_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        apply_pose(Pose.identity(), [[0.0, np.nan, 1.0]])


def test_pose_validation():
    with pytest.raises(InvalidInputError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidInputError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


def test_invert_examples():
    inv = invert_pose(Pose.identity())
    assert np.array_equal(inv.rotation, np.eye(3)) and np.array_equal(inv.translation, np.zeros(3))
    inv = invert_pose(Pose.from_translation([1, 2, 3]))
    assert np.array_equal(inv.translation, [-1.0, -2.0, -3.0])


def test_invert_round_trip_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = random_pose(rng)
        x = rng.normal(scale=50.0, size=(20, 3))
        back = apply_pose(invert_pose(p), apply_pose(p, x))
        assert np.max(np.abs(back - x)) <= 1e-9
        ident = compose(p, invert_pose(p))
        assert np.max(np.abs(ident.matrix() - np.eye(4))) <= 1e-9


def test_yaw_rotation_examples():
    p = yaw_rotation(0.0, 0.0)
    assert np.array_equal(p.matrix(), np.eye(4))
    assert np.allclose(apply_pose(yaw_rotation(math.pi), [[1, 0, 0]]), [[-1, 0, 0]], atol=1e-15)
    out = apply_pose(yaw_rotation(math.pi / 2, 10.0), [[2.0, 0.0, 3.0]])
    assert np.allclose(out, [[0.0, 2.0, 13.0]], atol=1e-12, rtol=0)
    assert np.array_equal(yaw_rotation(0.7, 3.0).rotation[2], [0.0, 0.0, 1.0])


def test_pose_error_examples():
    a = Pose.from_translation([1.0, 2.0, 3.0])
    e = pose_error(a, a)
    assert e.position_error == 0.0 and e.orientation_error == 0.0
    e = pose_error(Pose.from_translation([3, 4, 0]), Pose.identity())
    assert e.position_error == pytest.approx(5.0, abs=1e-15) and e.orientation_error == 0.0
    e = pose_error(yaw_rotation(math.radians(30)), Pose.identity())
    assert e.position_error == 0.0
    assert abs(e.orientation_error - 30.0) <= 1e-9


def test_pose_error_tiny_angles_are_accurate():
    # atan2 form keeps precision where arccos(trace) would lose ~8 digits
    angle = 1e-9
    e = pose_error(yaw_rotation(angle), Pose.identity())
    assert abs(e.orientation_error - math.degrees(angle)) < 1e-15


def test_pose_error_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        e_ab, e_ba = pose_error(a, b), pose_error(b, a)
        assert abs(e_ab.orientation_error - e_ba.orientation_error) < 1e-9
        assert 0.0 <= e_ab.orientation_error <= 180.0
        # independent check through scipy's rotation-vector magnitude
        rel = Rotation.from_matrix(b.rotation.T @ a.rotation)
        assert abs(e_ab.orientation_error - math.degrees(rel.magnitude())) < 1e-7


def test_quaternion_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_pose(rng)
        q = p.quaternion()
        assert q[0] >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12
        back = Pose.from_quaternion(q, p.translation)
        assert np.max(np.abs(back.rotation - p.rotation)) < 1e-12


@given(
    st.lists(
        st.tuples(*[st.floats(-100, 100, allow_nan=False) for _ in range(3)]),
        min_size=2,
        max_size=30,
    ),
    st.floats(0, 2 * math.pi),
    st.floats(-50, 50),
)
@settings(max_examples=60, deadline=None)
def test_apply_pose_is_rigid(points, yaw, dz):
    pts = np.array(points)
    rot = Rotation.from_euler("zyx", [yaw, 0.3, -0.2]).as_matrix()
    out = apply_pose(Pose(rot, [1.0, -2.0, dz]), pts)
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.max(np.abs(d_in - d_out)) <= 1e-9


def test_voxelize_examples():
    g = voxelize([[1.0, 2.0, 3.0]], 0.3)
    assert len(g) == 1 and np.array_equal(g.positions[0], [1.0, 2.0, 3.0])

    g = voxelize([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]], 0.3)
    assert len(g) == 1
    assert np.allclose(g.positions[0], [0.05, 0.0, 0.0], atol=1e-15)

    g = voxelize([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 0.3)
    assert len(g) == 2
    # floor(1.0 / 0.3) = 3
    assert g.indices[1, 0] - g.indices[0, 0] == 3
    assert np.array_equal(g.origin, [0.0, 0.0, 0.0])


def test_voxelize_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        voxelize(np.zeros((0, 3)), 0.3)
    with pytest.raises(InvalidInputError):
        voxelize([[0.0, 0.0, 0.0]], 0.0)


def test_voxelize_partition_property():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-5, 5, size=(500, 3))
    g = voxelize(pts, 0.7)
    assert len(g) <= len(pts)
    counts = np.bincount(g.point_voxel, minlength=len(g))
    assert counts.sum() == len(pts) and np.all(counts >= 1)
    cells = np.floor((pts - g.origin) / g.voxel_size).astype(int)
    assert np.array_equal(cells, g.indices[g.point_voxel])
    for v in range(0, len(g), 37):
        assert np.allclose(g.members(v).mean(axis=0), g.positions[v])


@given(st.integers(0, 2**31), st.tuples(*[st.integers(-1000, 1000) for _ in range(3)]))
@settings(max_examples=40, deadline=None)
def test_voxelize_translation_covariant(seed, shift):
    # dyadic coordinates and integer shifts keep the arithmetic exact
    rng = np.random.default_rng(seed)
    pts = rng.integers(-4096, 4096, size=(200, 3)) / 1024.0
    a = voxelize(pts, 0.25)
    b = voxelize(pts + np.array(shift, dtype=float), 0.25)
    assert np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.point_voxel, b.point_voxel)
