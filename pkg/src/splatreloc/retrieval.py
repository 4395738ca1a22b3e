"""Global-descriptor retrieval and adaptive coarse-to-fine viewpoint retrieval.

The adaptive search verifies the top coarse candidates with the sparse
epipolar verifier and stops early once one of them has enough inliers.
Otherwise it renders virtual keyframes at poses perturbed around the best
coarse candidate, retrieves the closest of those by global descriptor and
verifies them too, keeping the running maximum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import IO

import numpy as np

from .core import CameraIntrinsics, Pose, so3_exp
from .featurizer import Keypoints, detect_keypoints, global_descriptor
from .matcher import RANSAC_SEED, sparse_verify
from .splat import DatabaseEntry, SceneMap, render

STRATEGIES = ("random", "normal", "uniform")


class RetrievalError(ValueError):
    """Empty database or an unusable retrieval configuration."""


@dataclass(frozen=True)
class RetrievalConfig:
    k1: int = 10
    k2: int = 150
    k3: int = 5
    a: float = 5.0  # degrees
    b: float = 0.5  # meters
    inlier_threshold: int = 150
    verify_stride: int = 1
    seed: int = 0
    strategy: str = "random"
    max_keypoints: int = 1000

    def __post_init__(self) -> None:
        if self.k1 < 1 or self.k3 < 1:
            raise RetrievalError("k1 and k3 must be at least 1")
        if self.k2 < 0:
            raise RetrievalError("k2 must be non-negative")
        if self.a < 0 or self.b < 0:
            raise RetrievalError("perturbation ranges must be non-negative")
        if self.k2 > 0 and not (self.a > 0 or self.b > 0):
            raise RetrievalError("a fine stage needs a non-zero perturbation range")
        if self.verify_stride < 1:
            raise RetrievalError("verify_stride must be at least 1")
        if self.strategy not in STRATEGIES:
            raise RetrievalError(f"unknown perturbation strategy {self.strategy!r}")

    @classmethod
    def indoor(cls, **kw) -> RetrievalConfig:
        return cls(**{**dict(k1=10, k2=150, k3=5, a=5.0, b=0.5, inlier_threshold=150), **kw})

    @classmethod
    def outdoor(cls, **kw) -> RetrievalConfig:
        return cls(**{**dict(k1=10, k2=100, k3=5, a=5.0, b=0.8, inlier_threshold=300), **kw})

    def in_published_range(self) -> bool:
        """True when k3 < k1 <= 10 < k2 <= 150 and a, b > 0."""
        return self.k3 < self.k1 <= 10 < self.k2 <= 150 and self.a > 0 and self.b > 0

    def without_fine_stage(self) -> RetrievalConfig:
        return replace(self, k2=0)


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    image: np.ndarray
    pose: Pose
    inliers: int
    stage: str  # "coarse" or "fine"
    candidate_id: str
    intrinsics: CameraIntrinsics
    coarse_inliers: int = 0
    trace: tuple[dict, ...] = field(default=(), repr=False)


# --- index -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DescriptorIndex:
    """Exact cosine-similarity index over unit descriptors."""

    ids: tuple[str, ...]
    matrix: np.ndarray  # N x D float64

    def __len__(self) -> int:
        return len(self.ids)

    def search(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape[0] != self.matrix.shape[1]:
            raise RetrievalError(f"query dim {q.shape[0]} != index dim {self.matrix.shape[1]}")
        sims = self.matrix @ q
        order = sorted(range(len(self.ids)), key=lambda i: (-sims[i], self.ids[i]))
        return [(i, float(sims[i])) for i in order[:k]]


@dataclass(frozen=True)
class Candidate:
    index: int
    id: str
    similarity: float


def build_index(database) -> DescriptorIndex:
    entries = list(database)
    if not entries:
        raise RetrievalError("cannot index an empty database")
    dims = {e.descriptor.shape[0] for e in entries}
    if len(dims) != 1:
        raise RetrievalError("database descriptors differ in dimension")
    M = np.stack([np.asarray(e.descriptor, dtype=np.float64) for e in entries])
    M.flags.writeable = False
    return DescriptorIndex(tuple(e.id for e in entries), M)


def coarse_retrieve(query_desc: np.ndarray, index: DescriptorIndex, k1: int) -> tuple[list[Candidate], bool]:
    """Top-k1 entries by cosine similarity, ties broken by id.

    The flag is True when fewer than k1 entries exist and all were returned.
    """
    if k1 < 1:
        raise RetrievalError("k1 must be at least 1")
    hits = index.search(query_desc, k1)
    return [Candidate(i, index.ids[i], s) for i, s in hits], k1 > len(index)


# --- perturbation ------------------------------------------------------------


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def perturb_pose(base: Pose, a: float, b: float, rng: np.random.Generator, strategy: str = "random") -> Pose:
    """Sample a pose within ``a`` degrees and ``b`` meters of ``base``.

    random:  uniform angle on a uniform axis; uniform offset in the ball.
    normal:  angle and offset length from half-normals (sigma = range / 2), clipped.
    uniform: per-axis uniform rotation vector and offset, each axis bounded
             by range / sqrt(3) so the total stays in range.
    """
    if a < 0 or b < 0:
        raise RetrievalError("perturbation ranges must be non-negative")
    a_rad = np.radians(a)
    if strategy == "random":
        omega = _unit(rng) * rng.uniform(0.0, a_rad)
        d = _unit(rng) * b * rng.uniform() ** (1.0 / 3.0)
    elif strategy == "normal":
        omega = _unit(rng) * min(abs(rng.normal(0.0, a_rad / 2)), a_rad)
        d = _unit(rng) * min(abs(rng.normal(0.0, b / 2)), b)
    elif strategy == "uniform":
        omega = rng.uniform(-1.0, 1.0, 3) * a_rad / np.sqrt(3.0)
        d = rng.uniform(-1.0, 1.0, 3) * b / np.sqrt(3.0)
    else:
        raise RetrievalError(f"unknown perturbation strategy {strategy!r}")
    return Pose.from_rt(base.R @ so3_exp(omega), base.translation + d)


# --- database images ---------------------------------------------------------


def database_image(scene: SceneMap, entry: DatabaseEntry) -> np.ndarray:
    """The entry's source image, or a render at its pose when none is stored."""
    key = ("db_image", entry.id)
    img = scene._cache.get(key)
    if img is None:
        if entry.image_path is not None:
            from .io import read_image

            img = read_image(entry.image_path)
        else:
            img = render(scene, entry.intrinsics, entry.pose, channels={"color"}).color
        scene._cache[key] = img
    return img


def scene_index(scene: SceneMap) -> DescriptorIndex:
    idx = scene._cache.get("index")
    if idx is None:
        idx = build_index(scene.database)
        scene._cache["index"] = idx
    return idx


def _db_keypoints(scene: SceneMap, entry: DatabaseEntry, max_kp: int) -> Keypoints:
    key = ("db_kp", entry.id, max_kp)
    kp = scene._cache.get(key)
    if kp is None:
        kp = detect_keypoints(database_image(scene, entry), max_kp)
        scene._cache[key] = kp
    return kp


# --- adaptive retrieval ------------------------------------------------------


def adaptive_retrieve(
    query_image: np.ndarray,
    scene: SceneMap,
    cfg: RetrievalConfig = RetrievalConfig(),
    intrinsics: CameraIntrinsics | None = None,
    trace_out: IO[str] | None = None,
) -> RetrievalResult:
    if not scene.database:
        raise RetrievalError("scene has no database entries")
    index = scene_index(scene)
    q_desc = global_descriptor(query_image)
    q_kp = detect_keypoints(query_image, cfg.max_keypoints)
    trace: list[dict] = []

    def log(stage: str, cid: str, n: int) -> None:
        rec = {"stage": stage, "id": cid, "N": int(n)}
        trace.append(rec)
        if trace_out is not None:
            trace_out.write(json.dumps(rec) + "\n")

    ranked, _ = coarse_retrieve(q_desc, index, cfg.k1 * cfg.verify_stride)
    candidates = ranked[:: cfg.verify_stride][: cfg.k1]

    best_n, best = -1, None
    for cand in candidates:
        entry = scene.database[cand.index]
        res = sparse_verify(
            query_image, None, cfg.max_keypoints, RANSAC_SEED, keypoints_q=q_kp,
            keypoints_r=_db_keypoints(scene, entry, cfg.max_keypoints),
        )
        log("coarse", entry.id, res.inliers)
        if res.inliers > best_n:
            best_n, best = res.inliers, entry
        if best_n >= cfg.inlier_threshold:
            break
    assert best is not None
    K = intrinsics if intrinsics is not None else best.intrinsics
    result = RetrievalResult(
        database_image(scene, best), best.pose, best_n, "coarse", best.id, best.intrinsics, best_n
    )
    if best_n >= cfg.inlier_threshold or cfg.k2 == 0:
        return replace(result, trace=tuple(trace))

    rng = np.random.default_rng(cfg.seed)
    poses = [perturb_pose(best.pose, cfg.a, cfg.b, rng, cfg.strategy) for _ in range(cfg.k2)]
    views: list[tuple[int, np.ndarray, np.ndarray]] = []
    for j, p in enumerate(poses):
        try:
            img = render(scene, K, p, channels={"color"}).color
        except (ValueError, FloatingPointError):
            continue
        views.append((j, img, global_descriptor(img)))
    if views:
        sims = np.array([float(d @ q_desc) for _, _, d in views])
        order = sorted(range(len(views)), key=lambda i: (-sims[i], views[i][0]))[: cfg.k3]
        for i in order:
            j, img, _ = views[i]
            res = sparse_verify(query_image, img, cfg.max_keypoints, RANSAC_SEED, keypoints_q=q_kp)
            vid = f"virtual:{j}"
            log("fine", vid, res.inliers)
            if res.inliers > result.inliers:
                result = RetrievalResult(img, poses[j], res.inliers, "fine", vid, K, best_n)
    return replace(result, trace=tuple(trace))
