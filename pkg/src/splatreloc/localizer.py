"""Depth lifting, RANSAC-PnP and the iterative render-and-match relocalizer."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .core import CameraIntrinsics, Pose, pose_error, so3_exp
from .featurizer import decode_features, encode_coarse, encode_fine
from .matcher import FineMatches, MatchConfig, coarse_match, fine_match
from .retrieval import RetrievalConfig, RetrievalResult, adaptive_retrieve
from .splat import SceneMap, render

MIN_ALPHA = 0.5
TUKEY_C = 4.685
SCALE_FLOOR = 0.02  # pixels; keeps the robust scale positive on exact data
IRLS_ROUNDS = 10


class LocalizationError(ValueError):
    """Invalid localizer input or configuration."""


@dataclass(frozen=True, eq=False)
class Correspondences2D3D:
    pixels: np.ndarray  # N x 2
    points: np.ndarray  # N x 3, world frame

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        X = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if px.shape[0] != X.shape[0]:
            raise LocalizationError("pixel and point counts differ")
        if not np.all(np.isfinite(X)):
            raise LocalizationError("world points must be finite")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", X)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def subset(self, mask: np.ndarray) -> Correspondences2D3D:
        return Correspondences2D3D(self.pixels[mask], self.points[mask])


# --- lifting -----------------------------------------------------------------


def bilinear(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``plane`` at pixel centers (x, y); returns (values, in-bounds mask)."""
    H, W = plane.shape
    ok = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), W - 2 if W > 1 else 0)
    y0 = np.minimum(np.floor(yc).astype(np.int64), H - 2 if H > 1 else 0)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xc - x0
    fy = yc - y0
    v = (
        plane[y0, x0] * (1 - fx) * (1 - fy)
        + plane[y0, x1] * fx * (1 - fy)
        + plane[y1, x0] * (1 - fx) * fy
        + plane[y1, x1] * fx * fy
    )
    return v, ok


def lift(
    matches: FineMatches, depth: np.ndarray, alpha_acc: np.ndarray, K: CameraIntrinsics, T: Pose
) -> Correspondences2D3D:
    """Back-project reference pixels with the rendered depth into world points.

    Matches whose reference pixel has accumulated alpha below 0.5 (at any of
    the four bilinear taps) or non-positive depth are dropped.
    """
    if len(matches) == 0:
        return Correspondences2D3D(np.zeros((0, 2)), np.zeros((0, 3)))
    xr = np.asarray(matches.ref_pts, dtype=np.float64)
    d, ok = bilinear(np.asarray(depth, dtype=np.float64), xr[:, 0], xr[:, 1])
    a_min = _min_tap(np.asarray(alpha_acc, dtype=np.float64), xr[:, 0], xr[:, 1])
    keep = ok & (a_min >= MIN_ALPHA) & (d > 0)
    xr, d = xr[keep], d[keep]
    rays = np.column_stack([xr, np.ones(len(xr))]) @ K.K_inv.T
    Xw = T.apply(rays * d[:, None])
    return Correspondences2D3D(np.asarray(matches.query_pts, dtype=np.float64)[keep], Xw)


def _min_tap(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    H, W = plane.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, H - 1)
    x1 = np.clip(x0 + 1, 0, W - 1)
    y1 = np.clip(y0 + 1, 0, H - 1)
    return np.minimum.reduce([plane[y0, x0], plane[y0, x1], plane[y1, x0], plane[y1, x1]])


# --- P3P ---------------------------------------------------------------------


def _kabsch(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimizing ||R A_i + t - B_i||."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, cb - R @ ca


def _polish_depths(s: np.ndarray, cosines, dists, steps: int = 3) -> np.ndarray:
    """Newton on the three law-of-cosines equations in the camera depths.

    Near-double quartic roots leave the elimination with only a few digits.
    """
    ca, cb, cg = cosines
    target = np.array(dists)
    for _ in range(steps):
        s1, s2, s3 = s
        r = np.array([
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg,
        ]) - target
        J = np.array([
            [0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
            [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
            [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0],
        ])
        try:
            step = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.abs(step).max() > 0.1 * s.min():
            break
        s = s - step
    return s


def p3p(bearings: np.ndarray, points: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """All world-to-camera (R, t) consistent with three bearing/point pairs.

    Writes the camera depths as s2 = u s1, s3 = v s1 and eliminates u from two
    law-of-cosines quadratics via their resultant, which is a quartic in v.
    """
    f = bearings / np.linalg.norm(bearings, axis=1, keepdims=True)
    X = np.asarray(points, dtype=np.float64)
    a2 = np.sum((X[1] - X[2]) ** 2)
    b2 = np.sum((X[0] - X[2]) ** 2)
    c2 = np.sum((X[0] - X[1]) ** 2)
    if min(a2, b2, c2) < 1e-18:
        return []
    ca, cb, cg = f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]
    # coefficients in v, lowest order first
    w = np.array([1.0, -2.0 * cb, 1.0])  # 1 + v^2 - 2 v cos(beta)
    p2 = np.array([b2])
    p1 = np.array([-2.0 * b2 * cg])
    p0 = P.polysub([b2], c2 * w)
    q2 = np.array([b2])
    q1 = np.array([0.0, -2.0 * b2 * ca])
    q0 = P.polysub([0.0, 0.0, b2], a2 * w)
    t1 = P.polysub(P.polymul(p2, q0), P.polymul(p0, q2))
    t2 = P.polysub(P.polymul(p2, q1), P.polymul(p1, q2))
    t3 = P.polysub(P.polymul(p1, q0), P.polymul(p0, q1))
    res = P.polysub(P.polymul(t1, t1), P.polymul(t2, t3))
    res = np.trim_zeros(res, "b")
    if len(res) < 2:
        return []
    roots = P.polyroots(res)
    scale = max(1.0, float(np.max(np.abs(roots))))
    out = []
    for r in roots:
        if abs(r.imag) > 1e-6 * scale:
            continue
        v = r.real
        if v <= 0:
            continue
        den_s = P.polyval(v, w)
        if den_s <= 0:
            continue
        s1 = np.sqrt(b2 / den_s)
        den_u = P.polyval(v, P.polysub(p1, q1))
        us = []
        if abs(den_u) > 1e-10 * b2:
            us.append(P.polyval(v, P.polysub(q0, p0)) / den_u)
        else:
            us.extend(np.real(P.polyroots([P.polyval(v, p0), p1[0], b2])))
        for u in us:
            if u <= 0:
                continue
            s = _polish_depths(np.array([s1, u * s1, v * s1]), (ca, cb, cg), (a2, b2, c2))
            Xc = f * s[:, None]
            d_c = [np.sum((Xc[1] - Xc[2]) ** 2), np.sum((Xc[0] - Xc[2]) ** 2), np.sum((Xc[0] - Xc[1]) ** 2)]
            if np.max(np.abs(np.array(d_c) - [a2, b2, c2])) > 1e-4 * max(a2, b2, c2):
                continue
            R, t = _kabsch(X, Xc)
            out.append((R, t))
    return out


# --- PnP ---------------------------------------------------------------------


@dataclass(frozen=True)
class PnPConfig:
    reproj_threshold: float = 3.0
    max_iterations: int = 5000
    confidence: float = 0.9999
    min_inliers: int = 6
    seed: int = 0
    refine_steps: int = 20

    def __post_init__(self) -> None:
        if not self.reproj_threshold > 0:
            raise LocalizationError("reproj_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise LocalizationError("confidence must lie in (0, 1)")
        if self.max_iterations < 1 or self.min_inliers < 3:
            raise LocalizationError("max_iterations >= 1 and min_inliers >= 3 required")


@dataclass(frozen=True, eq=False)
class PnPResult:
    pose: Pose | None
    inliers: np.ndarray
    iterations: int
    reason: str = "ok"

    @property
    def success(self) -> bool:
        return self.pose is not None


def reprojection_errors(R: np.ndarray, t: np.ndarray, K: np.ndarray, X: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Pixel errors for world-to-camera (R, t); points at z <= 0 get +inf."""
    Xc = X @ R.T + t
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * Xc[:, 0] / z + K[0, 2]
        v = K[1, 1] * Xc[:, 1] / z + K[1, 2]
    e = np.hypot(u - px[:, 0], v - px[:, 1])
    return np.where(z > 1e-8, e, np.inf)


def _is_collinear(X: np.ndarray, tol: float = 1e-9) -> bool:
    if len(X) < 3:
        return True
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    return sv[1] <= tol * max(sv[0], 1e-300)


def refine_pose(
    R: np.ndarray,
    t: np.ndarray,
    K: np.ndarray,
    X: np.ndarray,
    px: np.ndarray,
    steps: int = 20,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton (with Levenberg damping) on the (weighted) reprojection error."""
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    sw = np.ones(2 * len(X)) if weights is None else np.sqrt(np.tile(weights, 2))

    def resid(R_, t_):
        Xc = X @ R_.T + t_
        r_ = np.concatenate([fx * Xc[:, 0] / Xc[:, 2] + cx - px[:, 0], fy * Xc[:, 1] / Xc[:, 2] + cy - px[:, 1]])
        return sw * r_, Xc

    r, Xc = resid(R, t)
    cost = r @ r
    lam = 1e-6
    for _ in range(steps):
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        n = len(z)
        Ju = np.zeros((n, 3))
        Jv = np.zeros((n, 3))
        Ju[:, 0] = fx / z
        Ju[:, 2] = -fx * x / z**2
        Jv[:, 1] = fy / z
        Jv[:, 2] = -fy * y / z**2
        # left perturbation: Xc' = exp(w) Xc + dt
        dXdw = np.zeros((n, 3, 3))
        dXdw[:, 0, 1], dXdw[:, 0, 2] = z, -y
        dXdw[:, 1, 0], dXdw[:, 1, 2] = -z, x
        dXdw[:, 2, 0], dXdw[:, 2, 1] = y, -x
        J = np.zeros((2 * n, 6))
        J[:n, :3] = np.einsum("nk,nkj->nj", Ju, dXdw)
        J[n:, :3] = np.einsum("nk,nkj->nj", Jv, dXdw)
        J[:n, 3:] = Ju
        J[n:, 3:] = Jv
        J *= sw[:, None]
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(8):
            try:
                delta = -np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = so3_exp(delta[:3])
            R_new = dR @ R
            t_new = dR @ t + delta[3:]
            r_new, Xc_new = resid(R_new, t_new)
            if np.all(Xc_new[:, 2] > 0):
                c_new = r_new @ r_new
                if c_new <= cost:
                    R, t, r, Xc, cost = R_new, t_new, r_new, Xc_new, c_new
                    lam = max(lam / 10, 1e-12)
                    improved = True
                    break
            lam *= 10
        if not improved or np.max(np.abs(delta)) < 1e-15:
            break
    return R, t


def _tukey_weights(e: np.ndarray) -> np.ndarray:
    scale = max(1.4826 * float(np.median(e)), SCALE_FLOOR)
    u = e / (TUKEY_C * scale)
    return np.where(u < 1.0, (1.0 - u**2) ** 2, 0.0)


def _robust_refit(
    R: np.ndarray, t: np.ndarray, K: np.ndarray, X: np.ndarray, px: np.ndarray, thr: float, steps: int
) -> tuple[np.ndarray, np.ndarray]:
    """IRLS with Tukey weights over the inliers.

    A stray correspondence that lands inside the inlier threshold biases a
    plain least-squares refit; the redescending weights drop it once the
    residual scale of the true inliers is known.
    """
    inl = reprojection_errors(R, t, K, X, px) < thr
    Xi, pi = X[inl], px[inl]
    if len(Xi) < 6:
        return R, t
    for _ in range(IRLS_ROUNDS):
        w = _tukey_weights(reprojection_errors(R, t, K, Xi, pi))
        if np.count_nonzero(w) < 6:
            break
        R_new, t_new = refine_pose(R, t, K, Xi, pi, steps, w)
        done = np.abs(R_new - R).max() < 1e-14 and np.abs(t_new - t).max() < 1e-14
        R, t = R_new, t_new
        if done:
            break
    return R, t


def pnp_ransac(corrs: Correspondences2D3D, K: CameraIntrinsics, cfg: PnPConfig = PnPConfig()) -> PnPResult:
    n = len(corrs)
    none = np.zeros(n, dtype=bool)
    if n < 4:
        return PnPResult(None, none, 0, "too few correspondences")
    X, px = corrs.points, corrs.pixels
    if _is_collinear(X):
        return PnPResult(None, none, 0, "degenerate: collinear points")
    Km = K.K
    bearings = np.column_stack([px, np.ones(n)]) @ K.K_inv.T
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.reproj_threshold
    best_count, best_cost, best = 0, np.inf, None
    needed = cfg.max_iterations
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = rng.choice(n, 3, replace=False)
        if _is_collinear(X[idx], 1e-6):
            continue
        for R, t in p3p(bearings[idx], X[idx]):
            e = reprojection_errors(R, t, Km, X, px)
            inl = e < thr
            cnt = int(inl.sum())
            cost = float(np.sum(np.minimum(e, thr) ** 2))
            if cnt > best_count or (cnt == best_count and cost < best_cost):
                best_count, best_cost, best = cnt, cost, (R, t)
                w = cnt / n
                if w >= 1.0:
                    needed = 0
                else:
                    denom = np.log1p(-(w**3))
                    needed = int(np.ceil(np.log(1 - cfg.confidence) / denom)) if denom < 0 else cfg.max_iterations
    if best is None or best_count < 3:
        return PnPResult(None, none, it, "no consistent hypothesis")
    R, t = best
    inl = reprojection_errors(R, t, Km, X, px) < thr
    for _ in range(5):
        if inl.sum() < 4:
            break
        R, t = refine_pose(R, t, Km, X[inl], px[inl], cfg.refine_steps)
        new = reprojection_errors(R, t, Km, X, px) < thr
        if np.array_equal(new, inl):
            break
        inl = new
    R, t = _robust_refit(R, t, Km, X, px, thr, cfg.refine_steps)
    inl = reprojection_errors(R, t, Km, X, px) < thr
    if inl.sum() < cfg.min_inliers:
        return PnPResult(None, inl, it, "too few inliers")
    if _is_collinear(X[inl]):
        return PnPResult(None, inl, it, "degenerate: collinear inliers")
    W = Pose.from_rt(R, t)
    return PnPResult(W.inverse(), inl, it)


# --- relocalization ----------------------------------------------------------


@dataclass(frozen=True)
class LocalizerConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    pnp: PnPConfig = field(default_factory=PnPConfig)
    n_refine: int = 4

    def __post_init__(self) -> None:
        if self.n_refine < 0:
            raise LocalizationError("n_refine must be non-negative")


@dataclass
class IterationRecord:
    pose: Pose
    matches: int
    inliers: int
    degenerate: bool = False
    seconds: float = 0.0


@dataclass
class RelocalizationTrace:
    retrieval: RetrievalResult
    initial: IterationRecord | None
    refinements: list[IterationRecord] = field(default_factory=list)
    failed: bool = False
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def initial_pose(self) -> Pose:
        return self.initial.pose if self.initial is not None else self.retrieval.pose

    @property
    def final_pose(self) -> Pose:
        if self.failed:
            return self.retrieval.pose
        if self.refinements:
            return self.refinements[-1].pose
        return self.initial_pose

    @property
    def status(self) -> str:
        if self.failed:
            return "failed"
        if any(r.degenerate for r in self.refinements):
            return "degraded"
        return "ok"


def match_and_solve(
    query_image: np.ndarray,
    scene: SceneMap,
    K: CameraIntrinsics,
    ref_pose: Pose,
    cfg: LocalizerConfig,
    query_coarse=None,
) -> tuple[PnPResult, int]:
    """Render at ``ref_pose``, match the query against it, lift and solve PnP."""
    view = render(scene, K, ref_pose)
    Fq = query_coarse if query_coarse is not None else encode_coarse(query_image)
    Fr = decode_features(view.feature_low, scene.decoder, Fq.grid)
    cm = coarse_match(Fq, Fr, cfg.match)
    fq, fr = encode_fine(query_image, view.color)
    fm = fine_match(cm, fq, fr, cfg.match)
    corrs = lift(fm, view.depth, view.alpha_acc, K, ref_pose)
    return pnp_ransac(corrs, K, cfg.pnp), len(corrs)


def relocalize(
    query_image: np.ndarray,
    scene: SceneMap,
    cfg: LocalizerConfig = LocalizerConfig(),
    intrinsics: CameraIntrinsics | None = None,
    trace_out: IO[str] | None = None,
) -> RelocalizationTrace:
    t0 = time.perf_counter()
    ret = adaptive_retrieve(query_image, scene, cfg.retrieval, intrinsics, trace_out)
    K = intrinsics if intrinsics is not None else ret.intrinsics
    timings = {"retrieval": time.perf_counter() - t0}
    Fq = encode_coarse(query_image)

    t1 = time.perf_counter()
    res, n_match = match_and_solve(query_image, scene, K, ret.pose, cfg, Fq)
    timings["initial"] = time.perf_counter() - t1
    if not res.success:
        return RelocalizationTrace(ret, None, failed=True, timings=timings)
    initial = IterationRecord(res.pose, n_match, int(res.inliers.sum()), seconds=timings["initial"])
    trace = RelocalizationTrace(ret, initial, timings=timings)
    current = res.pose
    for _ in range(cfg.n_refine):
        t2 = time.perf_counter()
        res, n_match = match_and_solve(query_image, scene, K, current, cfg, Fq)
        dt = time.perf_counter() - t2
        if res.success:
            current = res.pose
            trace.refinements.append(IterationRecord(current, n_match, int(res.inliers.sum()), seconds=dt))
        else:
            trace.refinements.append(IterationRecord(current, n_match, int(res.inliers.sum()), True, dt))
    timings["refinement"] = sum(r.seconds for r in trace.refinements)
    timings["total"] = time.perf_counter() - t0
    return trace


# --- evaluation --------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationReport:
    count: int
    median_translation: float
    median_rotation: float
    recall: dict[tuple[float, float], float]

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("count", float(self.count)),
            ("median_translation_m", self.median_translation),
            ("median_rotation_deg", self.median_rotation),
        ]
        for (m, d), r in self.recall.items():
            out.append((f"recall@{m:g}m_{d:g}deg", r))
        return out

    def to_csv(self) -> str:
        return "metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in self.rows())

    def to_text(self) -> str:
        lines = [
            f"queries: {self.count}",
            f"median translation error: {self.median_translation * 100:.3f} cm",
            f"median rotation error: {self.median_rotation:.4f} deg",
        ]
        for (m, d), r in self.recall.items():
            lines.append(f"recall @ ({m * 100:g} cm, {d:g} deg): {r:.1f}%")
        return "\n".join(lines) + "\n"


DEFAULT_THRESHOLDS = ((0.05, 5.0), (0.02, 2.0), (0.01, 1.0))


def lower_median(values: Sequence[float]) -> float:
    s = sorted(values)
    return float(s[(len(s) - 1) // 2])


def evaluate(
    estimates: Sequence[tuple[Pose, Pose]], thresholds: Sequence[tuple[float, float]] = DEFAULT_THRESHOLDS
) -> EvaluationReport:
    """Median errors (lower median for even counts) and recall percentages."""
    if not estimates:
        raise LocalizationError("nothing to evaluate")
    errs = [pose_error(est, gt) for est, gt in estimates]
    te = np.array([e.translation_err for e in errs])
    re = np.array([e.rotation_err for e in errs])
    recall = {
        (float(m), float(d)): 100.0 * float(np.mean((te <= m) & (re <= d))) for m, d in thresholds
    }
    return EvaluationReport(len(errs), lower_median(te), lower_median(re), recall)
