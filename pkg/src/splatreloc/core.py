"""Rigid-body geometry, pinhole camera model and pose-error metrics.

Conventions:
    - Quaternions are (w, x, y, z), unit norm.
    - A ``Pose`` is camera-to-world: a camera-frame point ``Xc`` maps to
      world coordinates as ``X = R @ Xc + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

QUAT_EPS = 1e-12
BEHIND_CAMERA_EPS = 1e-8


class GeometryError(ValueError):
    """Invalid geometric input (zero quaternion, bad intrinsics, ...)."""


class BehindCameraError(GeometryError):
    """A point does not lie in front of the camera."""


def normalize_quat(q: Sequence[float]) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < QUAT_EPS:
        raise GeometryError(f"cannot normalize quaternion {q!r}")
    return q / n


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; renormalizes first."""
    w, x, y, z = normalize_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Vectorized ``quat_to_matrix`` for an (N, 4) array (rows renormalized)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(n < QUAT_EPS):
        raise GeometryError("zero quaternion in batch")
    w, x, y, z = (q / n).T
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = normalize_quat(q)
    return q if q[0] >= 0 else -q


def axis_angle_to_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < QUAT_EPS:
        return np.eye(3)
    axis = axis / n
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def so3_exp(omega: Sequence[float]) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        return np.eye(3) + skew(omega)
    return axis_angle_to_matrix(omega / theta, theta)


def skew(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        # already-unit quaternions keep their bits so file round trips are exact
        if abs(float(np.dot(q, q)) - 1.0) > 1e-15:
            q = normalize_quat(q)
        else:
            q = q.copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise GeometryError("non-finite translation")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: Sequence[float]) -> Pose:
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Map point(s) of shape (3,) or (N, 3) through the transform."""
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.translation

    def inverse(self) -> Pose:
        return invert(self)

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """(W, w) such that Xc = W @ X + w."""
        R = self.R
        return R.T, -R.T @ self.translation

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self) -> int:
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    Ra, Rb = a.R, b.R
    return Pose.from_rt(Ra @ Rb, Ra @ b.translation + a.translation)


def invert(T: Pose) -> Pose:
    R = T.R
    return Pose.from_rt(R.T, -R.T @ T.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise GeometryError("image size must be integral")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point outside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Intrinsics for an image resized by ``factor`` (pixel-center aligned)."""
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            round(self.width * factor),
            round(self.height * factor),
        )


@dataclass(frozen=True)
class PoseError:
    translation_err: float
    rotation_err: float


def project(K: CameraIntrinsics, pose: Pose, X: Sequence[float]) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel, camera-frame depth)."""
    W, w = pose.world_to_camera()
    xc = W @ np.asarray(X, dtype=np.float64) + w
    if xc[2] <= BEHIND_CAMERA_EPS:
        raise BehindCameraError(f"point at camera depth {xc[2]:.3g}")
    u = K.fx * xc[0] / xc[2] + K.cx
    v = K.fy * xc[1] / xc[2] + K.cy
    return np.array([u, v]), float(xc[2])


def project_points(K: CameraIntrinsics, pose: Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection without the behind-camera check.

    Returns (N, 2) pixels and (N,) depths; callers filter on depth.
    """
    W, w = pose.world_to_camera()
    xc = np.asarray(X, dtype=np.float64) @ W.T + w
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * xc[:, 0] / z + K.cx, K.fy * xc[:, 1] / z + K.cy], axis=1)
    return uv, z


def back_project(K: CameraIntrinsics, pose: Pose, pixel: Sequence[float], depth: float) -> np.ndarray:
    """World point seen at ``pixel`` with camera-frame depth ``depth``."""
    u, v = pixel
    xc = depth * (K.K_inv @ np.array([u, v, 1.0]))
    return pose.apply(xc)


def projection_jacobian(K: CameraIntrinsics, xc: Sequence[float]) -> np.ndarray:
    x, y, z = np.asarray(xc, dtype=np.float64)
    if z <= BEHIND_CAMERA_EPS:
        raise BehindCameraError(f"point at camera depth {z:.3g}")
    return np.array(
        [
            [K.fx / z, 0.0, -K.fx * x / (z * z)],
            [0.0, K.fy / z, -K.fy * y / (z * z)],
        ]
    )


def rotation_angle_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Angle of R_a^T R_b in degrees.

    Equal to arccos((trace - 1) / 2) with the argument clamped to [-1, 1], but
    evaluated with atan2 of the sine and cosine parts, which stays accurate
    for angles near 0 and 180 degrees where arccos loses half the digits.
    """
    D = R_a.T @ R_b
    cos = np.clip((np.trace(D) - 1.0) / 2.0, -1.0, 1.0)
    sin = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    return float(np.degrees(np.arctan2(sin, cos)))


def pose_error(estimate: Pose, truth: Pose) -> PoseError:
    t_err = float(np.linalg.norm(estimate.translation - truth.translation))
    r_err = min(max(rotation_angle_deg(truth.R, estimate.R), 0.0), 180.0)
    return PoseError(t_err, r_err)


# --- pose text files -------------------------------------------------------


def format_pose_line(pose_id: str, pose: Pose, *extra: str) -> str:
    vals = [*pose.rotation, *pose.translation]
    body = " ".join(repr(float(v)) for v in vals)
    return " ".join([pose_id, body, *extra])


def parse_pose_line(line: str) -> tuple[str, Pose, list[str]]:
    parts = line.split()
    if len(parts) < 8:
        raise ValueError(f"pose line needs 8 fields, got {len(parts)}: {line!r}")
    vals = [float(v) for v in parts[1:8]]
    return parts[0], Pose(vals[:4], vals[4:]), parts[8:]


def write_poses(path, poses: Iterable[tuple[str, Pose]]) -> None:
    with open(path, "w") as fh:
        for pose_id, pose in poses:
            fh.write(format_pose_line(pose_id, pose) + "\n")


def read_poses(path) -> dict[str, Pose]:
    out: dict[str, Pose] = {}
    with open(path) as fh:
        for k, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                pose_id, pose, _ = parse_pose_line(line)
            except ValueError as exc:
                raise ValueError(f"{path}:{k}: {exc}") from exc
            if pose_id in out:
                raise ValueError(f"{path}:{k}: duplicate id {pose_id!r}")
            out[pose_id] = pose
    return out
