"""Feature-augmented Gaussian scene and its forward rasterizer.

Two renderers share one compositing rule:

* ``render`` bins primitives into 16x16 pixel tiles and composites each tile
  in parallel (numba), front to back.
* ``render_reference`` loops over every primitive for every pixel in one
  global depth order. It is slow and exists only as a correctness oracle.

Compositing constants (both renderers): a primitive touches a pixel only
within Mahalanobis distance 3 of its projected mean, per-pixel opacity is
clamped to ``ALPHA_MAX``, contributions below ``ALPHA_MIN`` are skipped, and
a pixel stops accumulating once its transmittance would drop below ``T_MIN``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Collection, Sequence

import numpy as np

from ._raster import (
    ALPHA_MAX,
    ALPHA_MIN,
    MAHALANOBIS_CUTOFF_SQ,
    T_MIN,
    TILE,
    composite_tiles,
)
from .core import (
    BEHIND_CAMERA_EPS,
    BehindCameraError,
    CameraIntrinsics,
    Pose,
    normalize_quat,
    projection_jacobian,
    quat_to_matrix,
    quats_to_matrices,
)
from .featurizer import FeatureDecoder

DILATION = 0.3
MIN_DET = 1e-12
NEAR_PLANE = 0.1
FRUSTUM_MARGIN = 1.3
DEPTH_ALPHA_EPS = 1e-6
ALL_CHANNELS = frozenset({"color", "depth", "feature"})

QUAT_TOL = 1e-5
DESC_TOL = 1e-6


class SceneInvariantError(ValueError):
    """A scene, primitive or database entry violates a type invariant."""


@dataclass(frozen=True)
class GaussianPrimitive:
    center: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    feature: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", normalize_quat(self.rotation))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64).ravel())
        object.__setattr__(self, "opacity", float(self.opacity))
        if np.any(self.scale <= 0):
            raise SceneInvariantError("scales must be strictly positive")
        if not 0.0 < self.opacity <= 1.0:
            raise SceneInvariantError("opacity must lie in (0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise SceneInvariantError("color must lie in [0, 1]")
        if not np.all(np.isfinite(self.feature)):
            raise SceneInvariantError("feature must be finite")


@dataclass(frozen=True)
class DatabaseEntry:
    id: str
    pose: Pose
    intrinsics: CameraIntrinsics
    descriptor: np.ndarray
    image_path: str | None = None

    def __post_init__(self) -> None:
        d = np.asarray(self.descriptor, dtype=np.float32).ravel().copy()
        n = float(np.linalg.norm(d.astype(np.float64)))
        if abs(n - 1.0) > DESC_TOL:
            raise SceneInvariantError(f"descriptor of {self.id!r} has norm {n}")
        d.flags.writeable = False
        object.__setattr__(self, "descriptor", d)


def _frozen(a, dtype, shape) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=dtype).reshape(shape)).copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SceneMap:
    """Immutable primitive arrays (float64, struct-of-arrays), decoder and database."""

    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    decoder: FeatureDecoder
    database: tuple[DatabaseEntry, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = np.asarray(self.centers).reshape(-1, 3).shape[0]
        c_low = self.decoder.in_dim
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("centers", _frozen(self.centers, np.float64, (n, 3)))
        set_("rotations", _frozen(self.rotations, np.float64, (n, 4)))
        set_("scales", _frozen(self.scales, np.float64, (n, 3)))
        set_("opacities", _frozen(self.opacities, np.float64, (n,)))
        set_("colors", _frozen(self.colors, np.float64, (n, 3)))
        set_("features", _frozen(self.features, np.float64, (n, c_low)))
        set_("database", tuple(self.database))
        self.validate()

    def validate(self) -> None:
        for name in ("centers", "rotations", "scales", "opacities", "colors", "features"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SceneInvariantError(f"non-finite values in {name}")
        qn = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if np.any(np.abs(qn - 1.0) > QUAT_TOL):
            raise SceneInvariantError("primitive quaternion is not unit norm")
        if np.any(self.scales <= 0):
            raise SceneInvariantError("primitive scale must be strictly positive")
        if np.any(self.opacities <= 0) or np.any(self.opacities > 1):
            raise SceneInvariantError("primitive opacity outside (0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise SceneInvariantError("primitive color outside [0, 1]")
        dims = {e.descriptor.shape[0] for e in self.database}
        if len(dims) > 1:
            raise SceneInvariantError("database descriptors differ in dimension")
        ids = [e.id for e in self.database]
        if len(set(ids)) != len(ids):
            raise SceneInvariantError("duplicate database ids")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dims(self) -> tuple[int, int]:
        return self.decoder.in_dim, self.decoder.out_dim

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [
            GaussianPrimitive(
                self.centers[i], self.rotations[i], self.scales[i],
                float(self.opacities[i]), self.colors[i], self.features[i],
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_primitives(
        cls,
        primitives: Sequence[GaussianPrimitive],
        decoder: FeatureDecoder,
        database: Sequence[DatabaseEntry] = (),
    ) -> SceneMap:
        c_low = decoder.in_dim
        if not primitives:
            return cls.empty(decoder, database)
        return cls(
            centers=[g.center for g in primitives],
            rotations=[g.rotation for g in primitives],
            scales=[g.scale for g in primitives],
            opacities=[g.opacity for g in primitives],
            colors=[g.color for g in primitives],
            features=np.stack([g.feature for g in primitives]).reshape(-1, c_low),
            decoder=decoder,
            database=database,
        )

    @classmethod
    def empty(cls, decoder: FeatureDecoder, database: Sequence[DatabaseEntry] = ()) -> SceneMap:
        z = np.zeros
        return cls(z((0, 3)), z((0, 4)), z((0, 3)), z(0), z((0, 3)), z((0, decoder.in_dim)), decoder, database)

    def replace(self, **changes) -> SceneMap:
        kw = dict(
            centers=self.centers, rotations=self.rotations, scales=self.scales,
            opacities=self.opacities, colors=self.colors, features=self.features,
            decoder=self.decoder, database=self.database,
        )
        kw.update(changes)
        return SceneMap(**kw)

    def with_database(self, database: Sequence[DatabaseEntry]) -> SceneMap:
        """Same primitives with another database; per-entry caches are shared."""
        out = self.replace(database=database)
        out._cache.update({k: v for k, v in self._cache.items() if isinstance(k, tuple)})
        return out

    def entry(self, entry_id: str) -> DatabaseEntry:
        for e in self.database:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def equals(self, other: SceneMap) -> bool:
        """Bit-exact comparison of every stored value."""
        arrays = ("centers", "rotations", "scales", "opacities", "colors", "features")
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        if not self.decoder.equals(other.decoder) or len(self.database) != len(other.database):
            return False
        for a, b in zip(self.database, other.database):
            if (a.id, a.intrinsics, a.image_path) != (b.id, b.intrinsics, b.image_path):
                return False
            if a.pose != b.pose or not np.array_equal(a.descriptor, b.descriptor):
                return False
        return True


@dataclass(frozen=True, eq=False)
class RenderedView:
    color: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, alpha-normalized
    depth_raw: np.ndarray  # H x W, composited without normalization
    feature_low: np.ndarray  # C' x H x W
    alpha_acc: np.ndarray  # H x W


# --- covariance --------------------------------------------------------------


def world_covariance(g: GaussianPrimitive) -> np.ndarray:
    R = quat_to_matrix(g.rotation)
    return R @ np.diag(g.scale**2) @ R.T


def screen_covariance(
    g: GaussianPrimitive, K: CameraIntrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray, float]:
    """2D covariance (dilated), projected mean and camera depth.

    Raises ``BehindCameraError`` if the center is not in front of the camera.
    """
    W, w = pose.world_to_camera()
    xc = W @ g.center + w
    if xc[2] <= BEHIND_CAMERA_EPS:
        raise BehindCameraError("primitive behind camera")
    J = projection_jacobian(K, xc)
    cov_cam = W @ world_covariance(g) @ W.T
    cov2d = J @ cov_cam @ J.T + DILATION * np.eye(2)
    mu = np.array([K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy])
    return cov2d, mu, float(xc[2])


@dataclass(frozen=True)
class Projected:
    """Per-primitive screen-space quantities, already culled and depth-sorted."""

    index: np.ndarray  # original primitive indices, front to back
    means: np.ndarray  # (M, 2)
    conics: np.ndarray  # (M, 3) inverse covariance (a, b, c)
    cov2d: np.ndarray  # (M, 2, 2)
    depths: np.ndarray  # (M,)
    radii: np.ndarray  # (M,) 3-sigma pixel radius


def in_frustum(xc: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Near-plane and widened-frustum test on camera-frame centers (N, 3)."""
    xc = np.atleast_2d(xc)
    z = xc[:, 2]
    lim_x = FRUSTUM_MARGIN * max(K.cx + 0.5, K.width - K.cx - 0.5) / K.fx
    lim_y = FRUSTUM_MARGIN * max(K.cy + 0.5, K.height - K.cy - 0.5) / K.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (z > NEAR_PLANE) & (np.abs(xc[:, 0]) <= lim_x * z) & (np.abs(xc[:, 1]) <= lim_y * z)
    return ok


def project_scene(scene: SceneMap, K: CameraIntrinsics, pose: Pose) -> Projected:
    W, w = pose.world_to_camera()
    centers = scene.centers.astype(np.float64)
    xc = centers @ W.T + w
    z = xc[:, 2]
    keep = in_frustum(xc, K)
    idx = np.nonzero(keep)[0]
    xc = xc[idx]
    z = z[idx]
    R = quats_to_matrices(scene.rotations[idx].astype(np.float64))
    s2 = scene.scales[idx].astype(np.float64) ** 2
    # camera-frame covariance: (W R) diag(s^2) (W R)^T
    WR = np.einsum("ij,njk->nik", W, R)
    cov_cam = np.einsum("nij,nj,nkj->nik", WR, s2, WR)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * xc[:, 0] / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * xc[:, 1] / (z * z)
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = det >= MIN_DET
    idx, xc, z, cov2d, a, b, c, det = idx[ok], xc[ok], z[ok], cov2d[ok], a[ok], b[ok], c[ok], det[ok]
    means = np.stack([K.fx * xc[:, 0] / z + K.cx, K.fy * xc[:, 1] / z + K.cy], axis=1)
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = 3.0 * np.sqrt(lam)
    # ties broken by original primitive index
    order = np.lexsort((idx, z))
    return Projected(idx[order], means[order], conics[order], cov2d[order], z[order], radii[order])


def _normalized_features(features: np.ndarray) -> np.ndarray:
    f = features.astype(np.float64)
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return np.divide(f, n, out=np.zeros_like(f), where=n > 0)


def _finish(color, depth_raw, feat, alpha, channels) -> RenderedView:
    depth = np.divide(depth_raw, alpha, out=np.zeros_like(depth_raw), where=alpha > DEPTH_ALPHA_EPS)
    if "feature" in channels and feat.shape[0]:
        n = np.linalg.norm(feat, axis=0)
        feat = np.divide(feat, n[None], out=np.zeros_like(feat), where=n[None] > 0)
    return RenderedView(color=color, depth=depth, depth_raw=depth_raw, feature_low=feat, alpha_acc=alpha)


def _bin_tiles(proj: Projected, width: int, height: int):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    if len(proj.index) == 0:
        empty = np.zeros(n_tiles, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.int64), tiles_x
    mx, my, r = proj.means[:, 0], proj.means[:, 1], proj.radii
    x0 = np.clip(np.floor((mx - r) / TILE), 0, tiles_x).astype(np.int64)
    x1 = np.clip(np.floor((mx + r) / TILE) + 1, 0, tiles_x).astype(np.int64)
    y0 = np.clip(np.floor((my - r) / TILE), 0, tiles_y).astype(np.int64)
    y1 = np.clip(np.floor((my + r) / TILE) + 1, 0, tiles_y).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(n_tiles, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.int64), tiles_x
    gid = np.repeat(np.arange(len(counts)), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    tx = np.repeat(x0, counts) + offs % nxr
    ty = np.repeat(y0, counts) + offs // nxr
    tile_id = ty * tiles_x + tx
    # stable by tile, then by depth rank (gid is already the depth rank)
    order = np.lexsort((gid, tile_id))
    tile_list = gid[order]
    sorted_tiles = tile_id[order]
    tile_start = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="left")
    tile_end = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="right")
    return tile_start.astype(np.int64), tile_end.astype(np.int64), tile_list.astype(np.int64), tiles_x


def render(
    scene: SceneMap,
    K: CameraIntrinsics,
    pose: Pose,
    channels: Collection[str] = ALL_CHANNELS,
) -> RenderedView:
    """Tiled forward rasterization of the requested channels.

    Planes not requested come back as zeros. ``alpha_acc`` is always filled.
    """
    channels = frozenset(channels)
    unknown = channels - ALL_CHANNELS
    if unknown:
        raise ValueError(f"unknown channels {sorted(unknown)}")
    proj = project_scene(scene, K, pose)
    start, end, tile_list, tiles_x = _bin_tiles(proj, K.width, K.height)
    c_low = scene.features.shape[1]
    want_feat = "feature" in channels
    if want_feat:
        feats = _normalized_features(scene.features[proj.index])
    else:
        feats = np.zeros((len(proj.index), 0))
    color, depth_raw, feat, alpha = composite_tiles(
        start, end, tile_list,
        np.ascontiguousarray(proj.means), np.ascontiguousarray(proj.conics),
        scene.opacities[proj.index].astype(np.float64),
        scene.colors[proj.index].astype(np.float64),
        proj.depths.astype(np.float64),
        np.ascontiguousarray(feats),
        K.width, K.height, tiles_x,
        "color" in channels, "depth" in channels, want_feat,
    )
    if not want_feat:
        feat = np.zeros((c_low, K.height, K.width))
    return _finish(color, depth_raw, feat, alpha, channels)


def render_reference(scene: SceneMap, K: CameraIntrinsics, pose: Pose) -> RenderedView:
    """Brute-force oracle: every pixel visits every primitive in global depth order."""
    prims = scene.primitives
    entries = []
    for i, g in enumerate(prims):
        W, w = pose.world_to_camera()
        if not in_frustum(W @ g.center + w, K)[0]:
            continue
        try:
            cov, mu, z = screen_covariance(g, K, pose)
        except BehindCameraError:
            continue
        if np.linalg.det(cov) < MIN_DET:
            continue
        entries.append((z, i, np.linalg.inv(cov), mu))
    entries.sort(key=lambda e: (e[0], e[1]))
    H, Wd = K.height, K.width
    c_low = scene.features.shape[1]
    ys, xs = np.mgrid[0:H, 0:Wd].astype(np.float64)
    T = np.ones((H, Wd))
    done = np.zeros((H, Wd), dtype=bool)
    color = np.zeros((H, Wd, 3))
    depth = np.zeros((H, Wd))
    feat = np.zeros((c_low, H, Wd))
    for z, i, conic, mu in entries:
        g = prims[i]
        dx, dy = xs - mu[0], ys - mu[1]
        m2 = conic[0, 0] * dx * dx + 2.0 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy
        a = np.minimum(g.opacity * np.exp(-0.5 * m2), ALPHA_MAX)
        live = (~done) & (m2 <= MAHALANOBIS_CUTOFF_SQ) & (a >= ALPHA_MIN)
        test_T = T * (1.0 - a)
        stop = live & (test_T < T_MIN)
        done |= stop
        live &= ~stop
        wgt = np.where(live, a * T, 0.0)
        color += g.color[None, None, :] * wgt[..., None]
        depth += z * wgt
        nf = np.linalg.norm(g.feature)
        if nf > 0:
            feat += (g.feature / nf)[:, None, None] * wgt[None]
        T = np.where(live, test_T, T)
    return _finish(color, depth, feat, 1.0 - T, ALL_CHANNELS)
