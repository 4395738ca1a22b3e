from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatreloc.core import (
    BehindCameraError,
    CameraIntrinsics,
    GeometryError,
    Pose,
    axis_angle_to_matrix,
    back_project,
    compose,
    format_pose_line,
    invert,
    parse_pose_line,
    pose_error,
    project,
    projection_jacobian,
    quat_to_matrix,
    read_poses,
    so3_exp,
    write_poses,
)

from conftest import random_pose

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
seeds = st.integers(0, 2**32 - 1)


def test_compose_identity():
    T = random_pose(np.random.default_rng(0))
    out = compose(Pose.identity(), T)
    assert np.allclose(out.matrix(), T.matrix(), atol=1e-12)


def test_compose_inverse_is_identity():
    T = random_pose(np.random.default_rng(1))
    assert np.allclose(compose(invert(T), T).matrix(), np.eye(4), atol=1e-9)


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_compose_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    X = rng.standard_normal(3)
    direct = a.apply(b.apply(X))
    via = (a.matrix() @ b.matrix() @ np.append(X, 1.0))[:3]
    assert np.allclose(compose(a, b).apply(X), direct, atol=1e-9)
    assert np.allclose(direct, via, atol=1e-9)


def test_quat_identity_and_x90():
    assert np.allclose(quat_to_matrix([1, 0, 0, 0]), np.eye(3))
    c = np.cos(np.pi / 4)
    R = quat_to_matrix([c, c, 0, 0])
    assert np.allclose(R, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-12)


def test_zero_quaternion_rejected():
    with pytest.raises(GeometryError):
        quat_to_matrix([0, 0, 0, 0])


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_quat_matrix_orthonormal(seed):
    q = np.random.default_rng(seed).standard_normal(4)
    R = quat_to_matrix(q / np.linalg.norm(q))
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_pose_quaternion_unit():
    p = Pose([2.0, 0.0, 0.0, 0.0], [0, 0, 0])
    assert abs(np.linalg.norm(p.rotation) - 1.0) < 1e-9


def test_project_examples():
    uv, z = project(K100, Pose.identity(), [0, 0, 2])
    assert np.allclose(uv, [50, 50]) and z == 2
    uv, z = project(K100, Pose.identity(), [1, 0, 2])
    assert np.allclose(uv, [100, 50]) and z == 2


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project(K100, Pose.identity(), [0, 0, -1])


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_project_back_project_roundtrip(seed):
    rng = np.random.default_rng(seed)
    T = random_pose(rng)
    Xc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
    X = T.apply(Xc)
    uv, z = project(K100, T, X)
    assert np.allclose(back_project(K100, T, uv, z), X, atol=1e-9)


def test_jacobian_examples():
    J = projection_jacobian(K100, [0, 0, 2])
    assert np.allclose(J, [[50, 0, 0], [0, 50, 0]])
    J = projection_jacobian(K100, [1, 0, 2])
    assert np.allclose(J[0], [50, 0, -25])
    with pytest.raises(BehindCameraError):
        projection_jacobian(K100, [0, 0, 0])


def test_jacobian_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        xc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
        J = projection_jacobian(K100, xc)
        h = 1e-5 * xc[2]
        num = np.zeros((2, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            num[:, k] = (project(K100, Pose.identity(), xc + d)[0] - project(K100, Pose.identity(), xc - d)[0]) / (2 * h)
        worst = max(worst, np.abs(J - num).max() / np.abs(J).max())
    assert worst < 1e-5


def test_pose_error_examples():
    T = random_pose(np.random.default_rng(3))
    e = pose_error(T, T)
    assert e.translation_err == 0 and e.rotation_err < 1e-6
    Rz = Pose.from_rt(axis_angle_to_matrix([0, 0, 1], np.pi / 2), [0, 0, 0])
    e = pose_error(Rz, Pose.identity())
    assert e.translation_err == 0 and abs(e.rotation_err - 90.0) < 1e-9


@given(seeds, st.floats(0.0, 179.0))
@settings(max_examples=50, deadline=None)
def test_pose_error_constructed_angle(seed, phi):
    rng = np.random.default_rng(seed)
    T = random_pose(rng)
    P = Pose.from_rt(T.R @ axis_angle_to_matrix(rng.standard_normal(3), np.radians(phi)), T.translation)
    assert abs(pose_error(P, T).rotation_err - phi) < 1e-6
    # symmetric rotation component
    assert abs(pose_error(P, T).rotation_err - pose_error(T, P).rotation_err) < 1e-9


def test_intrinsics_invariants():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1, 1, 5, 1, 4, 4)


def test_pose_line_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(5)
    poses = [(f"p{i}", Pose.from_rt(so3_exp(rng.standard_normal(3)), rng.standard_normal(3))) for i in range(20)]
    write_poses(tmp_path / "poses.txt", poses)
    back = read_poses(tmp_path / "poses.txt")
    assert [k for k, _ in poses] == list(back)
    assert all(back[k] == p for k, p in poses)
    pid, p, extra = parse_pose_line(format_pose_line("x", poses[0][1], "ok"))
    assert pid == "x" and p == poses[0][1] and extra == ["ok"]
