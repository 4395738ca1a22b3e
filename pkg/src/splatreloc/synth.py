"""Procedural desk-scale scenes: a textured room of flat Gaussians with a
posed camera trajectory and perturbed queries (ground truth known)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, Pose, axis_angle_to_matrix, compose, matrix_to_quat, pose_error
from .featurizer import COARSE_DIM, LOW_DIM, FeatureDecoder, global_descriptor
from .mapfit import distill_features
from .splat import DatabaseEntry, SceneMap, render

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class SynthConfig:
    n_gaussians: int = 5000
    room: tuple[float, float, float] = (10.0, 10.0, 3.0)
    n_database: int = 100
    n_queries: int = 50
    max_query_offset: float = 0.3
    max_query_angle: float = 10.0
    width: int = 160
    height: int = 120
    focal: float = 128.0
    camera_height: float = 1.5
    trajectory_radius: float = 2.5
    seed: int = 0
    low_dim: int = LOW_DIM
    high_dim: int = COARSE_DIM


@dataclass
class SynthData:
    scene: SceneMap
    intrinsics: CameraIntrinsics
    database_poses: list[Pose]
    query_poses: list[Pose]
    config: SynthConfig = field(repr=False)
    database_images: list[np.ndarray] = field(default_factory=list, repr=False)
    feature_energy: float = 1.0

    @property
    def query_ids(self) -> list[str]:
        return [query_id(i) for i in range(len(self.query_poses))]

    def query_image(self, i: int) -> np.ndarray:
        return render(self.scene, self.intrinsics, self.query_poses[i], channels={"color"}).color


def query_id(i: int) -> str:
    return f"q{i:03d}"


def database_id(i: int) -> str:
    return f"db{i:03d}"


def look_pose(position, yaw: float, pitch: float = 0.0, roll: float = 0.0) -> Pose:
    """Camera-to-world pose at ``position`` looking along (yaw, pitch); OpenCV axes."""
    fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    right = np.cross(fwd, WORLD_UP)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    if roll:
        R = R @ axis_angle_to_matrix([0, 0, 1], roll)
    return Pose(matrix_to_quat(R), position)


def random_rotation_about(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.standard_normal(3)
    angle = np.radians(rng.uniform(0.0, max_deg))
    return axis_angle_to_matrix(axis, angle)


def _color_field(rng: np.random.Generator, n_waves: int = 6):
    freqs = rng.normal(0.0, 2.5, size=(3, n_waves, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(3, n_waves))

    def field_at(X: np.ndarray) -> np.ndarray:
        out = np.zeros((X.shape[0], 3))
        for c in range(3):
            out[:, c] = np.sin(X @ freqs[c].T + phases[c]).sum(axis=1) / np.sqrt(n_waves)
        return out

    return field_at


def _surface_samples(cfg: SynthConfig, rng: np.random.Generator):
    Lx, Ly, Lz = cfg.room
    faces = [
        # (origin, u axis, v axis, extent_u, extent_v)
        (np.array([0, 0, 0.0]), np.array([1, 0, 0.0]), np.array([0, 1, 0.0]), Lx, Ly),  # floor
        (np.array([0, 0, Lz]), np.array([1, 0, 0.0]), np.array([0, 1, 0.0]), Lx, Ly),  # ceiling
        (np.array([0, 0, 0.0]), np.array([1, 0, 0.0]), np.array([0, 0, 1.0]), Lx, Lz),  # y = 0
        (np.array([0, Ly, 0.0]), np.array([1, 0, 0.0]), np.array([0, 0, 1.0]), Lx, Lz),  # y = Ly
        (np.array([0, 0, 0.0]), np.array([0, 1, 0.0]), np.array([0, 0, 1.0]), Ly, Lz),  # x = 0
        (np.array([Lx, 0, 0.0]), np.array([0, 1, 0.0]), np.array([0, 0, 1.0]), Ly, Lz),  # x = Lx
    ]
    areas = np.array([f[3] * f[4] for f in faces])
    counts = rng.multinomial(cfg.n_gaussians, areas / areas.sum())
    centers, rots = [], []
    for (o, u, v, eu, ev), n in zip(faces, counts):
        a = rng.uniform(0, eu, n)
        b = rng.uniform(0, ev, n)
        centers.append(o + a[:, None] * u + b[:, None] * v)
        normal = np.cross(u, v)
        base = np.stack([u, v, normal], axis=1)
        for _ in range(n):
            spin = axis_angle_to_matrix([0, 0, 1], rng.uniform(0, np.pi))
            rots.append(matrix_to_quat(base @ spin))
    return np.concatenate(centers), np.array(rots), areas.sum()


def make_room_scene(cfg: SynthConfig) -> tuple[SceneMap, np.random.Generator]:
    if cfg.n_gaussians <= 0:
        raise ValueError("n_gaussians must be positive")
    rng = np.random.default_rng(cfg.seed)
    centers, rots, area = _surface_samples(cfg, rng)
    n = centers.shape[0]
    spacing = np.sqrt(area / n)
    s_u = spacing * rng.uniform(0.35, 0.7, n)
    s_v = spacing * rng.uniform(0.35, 0.7, n)
    scales = np.stack([s_u, s_v, np.full(n, 0.01)], axis=1)
    opac = rng.uniform(0.85, 0.99, n)
    base = _color_field(rng)(centers)
    colors = np.clip(0.5 + 0.2 * base + rng.uniform(-0.3, 0.3, (n, 3)), 0.0, 1.0)
    feats = rng.standard_normal((n, cfg.low_dim))
    decoder = FeatureDecoder.from_matrix(rng.standard_normal((cfg.high_dim, cfg.low_dim)) / np.sqrt(cfg.low_dim))
    scene = SceneMap(centers, rots, scales, opac, colors, feats, decoder)
    return scene, rng


def trajectory(cfg: SynthConfig, n: int, phase: float = 0.0) -> list[Pose]:
    cx, cy = cfg.room[0] / 2, cfg.room[1] / 2
    poses = []
    for k in range(n):
        th = phase + 2 * np.pi * k / n
        pos = np.array(
            [cx + cfg.trajectory_radius * np.cos(th), cy + cfg.trajectory_radius * np.sin(th), cfg.camera_height]
        )
        pos[2] += 0.2 * np.sin(3 * th)
        yaw = th + 0.35 * np.sin(2 * th)
        pitch = np.radians(-8.0) + np.radians(6.0) * np.cos(5 * th)
        poses.append(look_pose(pos, yaw, pitch))
    return poses


def perturb(pose: Pose, rng: np.random.Generator, max_offset: float, max_deg: float) -> Pose:
    d = rng.standard_normal(3)
    d *= rng.uniform(0, max_offset) / np.linalg.norm(d)
    R = random_rotation_about(rng, max_deg)
    return Pose.from_rt(pose.R @ R, pose.translation + d)


def build_database(scene: SceneMap, K: CameraIntrinsics, poses: list[Pose], low_dim: int, high_dim: int):
    """Distill features from renders at ``poses`` and attach global descriptors.

    Returns (scene with database, database images, kept feature energy).
    """
    images = [render(scene, K, p, channels={"color"}).color for p in poses]
    scene, energy = distill_features(scene, [(im, p, K) for im, p in zip(images, poses)], low_dim, high_dim)
    db = [DatabaseEntry(database_id(i), p, K, global_descriptor(im)) for i, (p, im) in enumerate(zip(poses, images))]
    return scene.replace(database=db), images, energy


def exclude_near(scene: SceneMap, pose: Pose, max_dist: float, max_deg: float) -> SceneMap:
    """Drop database views within both ``max_dist`` meters and ``max_deg`` degrees of ``pose``."""
    keep = []
    for e in scene.database:
        err = pose_error(e.pose, pose)
        if not (err.translation_err <= max_dist and err.rotation_err <= max_deg):
            keep.append(e)
    return scene.with_database(keep)


def make_synthetic(cfg: SynthConfig) -> SynthData:
    scene, rng = make_room_scene(cfg)
    K = CameraIntrinsics(cfg.focal, cfg.focal, cfg.width / 2 - 0.5, cfg.height / 2 - 0.5, cfg.width, cfg.height)
    db = trajectory(cfg, cfg.n_database)
    phases = rng.uniform(0, 2 * np.pi, cfg.n_queries)
    queries = [
        perturb(trajectory(cfg, 1, phase=ph)[0], rng, cfg.max_query_offset, cfg.max_query_angle) for ph in phases
    ]
    if cfg.n_database:
        scene, images, energy = build_database(scene, K, db, cfg.low_dim, cfg.high_dim)
    else:
        images, energy = [], 1.0
    return SynthData(scene, K, db, queries, cfg, images, energy)


__all__ = [
    "SynthConfig", "SynthData", "make_synthetic", "make_room_scene", "build_database", "exclude_near",
    "look_pose", "perturb", "query_id", "database_id", "compose",
]
