"""Hybrid coarse-to-fine dense matching and sparse epipolar verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featurizer import FeatureMap, Keypoints, detect_keypoints


class MatchError(ValueError):
    """Incompatible feature maps or invalid matching configuration."""


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.1
    theta: float = 0.2
    window: int = 5
    subpixel_temperature: float = 4.0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise MatchError("tau must be positive")
        if not 0.0 <= self.theta < 1.0:
            raise MatchError("theta must lie in [0, 1)")
        if self.window < 1 or self.window % 2 == 0:
            raise MatchError("window must be a positive odd integer")
        if not self.subpixel_temperature > 0:
            raise MatchError("subpixel_temperature must be positive")


@dataclass(frozen=True, eq=False)
class CoarseMatches:
    query_idx: np.ndarray  # flat cell indices into the query grid
    ref_idx: np.ndarray
    confidence: np.ndarray
    query_grid: tuple[int, int]
    ref_grid: tuple[int, int]
    stride: int = 8

    def __len__(self) -> int:
        return len(self.query_idx)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.query_idx.tolist(), self.ref_idx.tolist()))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel centers (x, y) of the matched query and reference cells."""
        return _cell_center(self.query_idx, self.query_grid, self.stride), _cell_center(
            self.ref_idx, self.ref_grid, self.stride
        )


def _cell_center(idx: np.ndarray, grid: tuple[int, int], stride: int) -> np.ndarray:
    r, c = np.divmod(np.asarray(idx), grid[1])
    half = (stride - 1) / 2.0
    return np.stack([c * stride + half, r * stride + half], axis=1).astype(np.float64)


@dataclass(frozen=True, eq=False)
class FineMatches:
    query_pts: np.ndarray  # N x 2 pixels (x, y)
    ref_pts: np.ndarray  # N x 2 pixels (x, y)
    confidence: np.ndarray
    coarse_ref_centers: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.query_pts)

    @classmethod
    def empty(cls) -> FineMatches:
        z = np.zeros((0, 2))
        return cls(z, z.copy(), np.zeros(0), z.copy())

    def to_csv(self) -> str:
        lines = ["qx,qy,rx,ry,conf"]
        for (qx, qy), (rx, ry), c in zip(self.query_pts, self.ref_pts, self.confidence):
            lines.append(f"{qx!r},{qy!r},{rx!r},{ry!r},{c!r}")
        return "\n".join(lines) + "\n"


# --- coarse ------------------------------------------------------------------


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    S = np.ascontiguousarray(S)
    e = np.exp(S - S.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _similarity(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """A @ B.T evaluated in an argument-order-independent way.

    Swapping the arguments yields the exact transpose, which keeps the
    mutual-nearest-neighbour result symmetric bit for bit.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if (A.shape, A.tobytes()) <= (B.shape, B.tobytes()):
        return A @ B.T
    return np.ascontiguousarray((B @ A.T).T)


def dual_softmax(A: np.ndarray, B: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """(P_row, P_col) for S = <A, B> / tau; P_col is normalized over query rows."""
    S = _similarity(A, B) / tau
    P_qr = _softmax_rows(S)
    P_rq = np.ascontiguousarray(_softmax_rows(S.T).T)
    return P_qr, P_rq


def coarse_match(F_q: FeatureMap, F_r: FeatureMap, cfg: MatchConfig = MatchConfig()) -> CoarseMatches:
    if F_q.dim != F_r.dim:
        raise MatchError(f"feature dims differ: {F_q.dim} vs {F_r.dim}")
    if F_q.grid != F_r.grid:
        raise MatchError(f"grids differ: {F_q.grid} vs {F_r.grid}")
    A, B = F_q.flat(), F_r.flat()
    if A.shape[0] == 0:
        z = np.zeros(0, dtype=np.int64)
        return CoarseMatches(z, z.copy(), np.zeros(0), F_q.grid, F_r.grid, F_q.stride)
    P_qr, P_rq = dual_softmax(A, B, cfg.tau)
    best_j = np.argmax(P_qr, axis=1)
    best_i = np.argmax(P_rq, axis=0)
    i = np.arange(A.shape[0])
    mutual = best_i[best_j] == i
    p1 = P_qr[i, best_j]
    p2 = P_rq[i, best_j]
    keep = mutual & (p1 >= cfg.theta) & (p2 >= cfg.theta)
    qi = i[keep]
    rj = best_j[keep]
    conf = np.minimum(p1[keep], p2[keep])
    return CoarseMatches(qi.astype(np.int64), rj.astype(np.int64), conf, F_q.grid, F_r.grid, F_q.stride)


# --- fine --------------------------------------------------------------------


def _fine_center(idx: np.ndarray, grid: tuple[int, int], ratio: int) -> tuple[np.ndarray, np.ndarray]:
    r, c = np.divmod(np.asarray(idx), grid[1])
    return r * ratio + ratio // 2, c * ratio + ratio // 2


def _windows(F: np.ndarray, rows: np.ndarray, cols: np.ndarray, half: int) -> np.ndarray:
    """Stack of (M, w*w, C) windows centered at fine cells (rows, cols)."""
    offs = np.arange(-half, half + 1)
    rr = rows[:, None, None] + offs[None, :, None]
    cc = cols[:, None, None] + offs[None, None, :]
    win = F[:, rr, cc]  # C x M x w x w
    M = rows.shape[0]
    return np.moveaxis(win, 0, -1).reshape(M, -1, F.shape[0])


def fine_match(
    coarse: CoarseMatches, Fq_fine: FeatureMap, Fr_fine: FeatureMap, cfg: MatchConfig = MatchConfig()
) -> FineMatches:
    """Refine coarse matches inside W x W fine windows.

    The query point is the center of its window. The reference offset is a
    symmetric local soft-argmax over the 3 x 3 cells around each peak: half
    the difference between the expected reference position given the query
    center (center row of P_f) and the expected query position given the
    reference center (center column of P_f). Identical windows therefore give
    exactly zero offset.
    """
    if len(coarse) == 0:
        return FineMatches.empty()
    if Fq_fine.dim != Fr_fine.dim:
        raise MatchError("fine feature dims differ")
    ratio = coarse.stride // Fq_fine.stride
    if ratio * Fq_fine.stride != coarse.stride or Fr_fine.stride != Fq_fine.stride:
        raise MatchError("fine stride must divide the coarse stride")
    half = cfg.window // 2
    qr, qc = _fine_center(coarse.query_idx, coarse.query_grid, ratio)
    rr, rc = _fine_center(coarse.ref_idx, coarse.ref_grid, ratio)
    Hq, Wq = Fq_fine.grid
    Hr, Wr = Fr_fine.grid
    inside = (
        (qr - half >= 0) & (qr + half < Hq) & (qc - half >= 0) & (qc + half < Wq)
        & (rr - half >= 0) & (rr + half < Hr) & (rc - half >= 0) & (rc + half < Wr)
    )
    if not np.any(inside):
        return FineMatches.empty()
    sel = np.nonzero(inside)[0]
    wq = _windows(np.asarray(Fq_fine.data, dtype=np.float64), qr[sel], qc[sel], half)
    wr = _windows(np.asarray(Fr_fine.data, dtype=np.float64), rr[sel], rc[sel], half)
    S = np.einsum("mic,mjc->mij", wq, wr) / cfg.tau
    e_row = np.exp(S - S.max(axis=2, keepdims=True))
    P_row = e_row / e_row.sum(axis=2, keepdims=True)
    e_col = np.exp(S - S.max(axis=1, keepdims=True))
    P_col = e_col / e_col.sum(axis=1, keepdims=True)
    P = P_row * P_col
    center = (cfg.window * cfg.window) // 2
    fwd = P[:, center, :]
    bwd = P[:, :, center]
    peak = fwd.max(axis=1)
    offs = np.arange(-half, half + 1, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    grid = np.stack([ox.ravel(), oy.ravel()], axis=1)  # (w*w, 2) in fine cells, (x, y)

    cell_rc = np.stack([oy.ravel(), ox.ravel()], axis=1)

    def expect(p: np.ndarray) -> np.ndarray:
        # tempered expectation over the 3 x 3 cells around the argmax
        peak_rc = cell_rc[np.argmax(p, axis=1)]
        near = np.all(np.abs(cell_rc[None, :, :] - peak_rc[:, None, :]) <= 1, axis=2)
        w = np.power(p, 1.0 / cfg.subpixel_temperature) * near
        w = w / np.maximum(w.sum(axis=1, keepdims=True), 1e-300)
        return w @ grid

    offset = 0.5 * (expect(fwd) - expect(bwd)) * Fr_fine.stride
    s = Fq_fine.stride
    q_pts = np.stack([qc[sel] * s + (s - 1) / 2.0, qr[sel] * s + (s - 1) / 2.0], axis=1)
    r_center = np.stack([rc[sel] * s + (s - 1) / 2.0, rr[sel] * s + (s - 1) / 2.0], axis=1)
    r_pts = r_center + offset
    keep = peak >= cfg.theta
    _, coarse_ref = coarse.cell_centers()
    order = np.argsort(coarse.query_idx[sel][keep], kind="stable")
    return FineMatches(
        q_pts[keep][order], r_pts[keep][order], peak[keep][order], coarse_ref[sel][keep][order]
    )


# --- sparse verification -----------------------------------------------------

RATIO_TEST = 0.8
SAMPSON_PX = 2.0
RANSAC_ITERS = 1000
RANSAC_SEED = 42


def mutual_ratio_matches(a: Keypoints, b: Keypoints, ratio: float = RATIO_TEST) -> np.ndarray:
    """(M, 2) index pairs passing mutual NN and Lowe's ratio test (a -> b)."""
    if len(a) < 2 or len(b) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    sim = a.descriptors @ b.descriptors.T
    d2 = np.maximum(2.0 - 2.0 * sim, 0.0)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    idx = np.arange(len(a))
    mutual = nn_ba[nn_ab] == idx
    part = np.partition(d2, 1, axis=1)
    best = np.sqrt(part[:, 0])
    second = np.sqrt(part[:, 1])
    ok = mutual & (best < ratio * second)
    return np.stack([idx[ok], nn_ab[ok]], axis=1)


def _normalize_pts(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = p.mean(axis=0)
    d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    ph = np.column_stack([p, np.ones(len(p))]) @ T.T
    return ph, T


def _eight_point_batch(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Fundamental matrices from batches of normalized homogeneous correspondences.

    x1, x2: (B, n, 3). Returns (B, 3, 3) rank-2 matrices (normalized coordinates).
    """
    A = np.einsum("bni,bnj->bnij", x2, x1).reshape(x1.shape[0], x1.shape[1], 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[:, -1, :].reshape(-1, 3, 3)
    U, S, Vt2 = np.linalg.svd(F)
    S[:, 2] = 0.0
    return U @ (S[:, :, None] * Vt2)


def sampson_distance(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Sampson error (squared pixels) for F of shape (..., 3, 3) against (n, 3) points."""
    Fx1 = np.einsum("...ij,nj->...ni", F, x1)
    Ftx2 = np.einsum("...ji,nj->...ni", F, x2)
    num = np.einsum("ni,...ni->...n", x2, Fx1) ** 2
    den = Fx1[..., 0] ** 2 + Fx1[..., 1] ** 2 + Ftx2[..., 0] ** 2 + Ftx2[..., 1] ** 2
    return num / np.maximum(den, 1e-300)


def fundamental_ransac(
    p1: np.ndarray, p2: np.ndarray, threshold: float = SAMPSON_PX, iters: int = RANSAC_ITERS, seed: int = RANSAC_SEED
) -> tuple[np.ndarray | None, np.ndarray]:
    """8-point RANSAC. Returns (F in pixel coordinates, inlier mask)."""
    n = len(p1)
    if n < 8:
        return None, np.zeros(n, dtype=bool)
    h1, T1 = _normalize_pts(p1)
    h2, T2 = _normalize_pts(p2)
    rng = np.random.default_rng(seed)
    samples = np.argsort(rng.random((iters, n)), axis=1)[:, :8]
    Fn = _eight_point_batch(h1[samples], h2[samples])
    F = np.einsum("ji,bjk,kl->bil", T2, Fn, T1)
    X1 = np.column_stack([p1, np.ones(n)])
    X2 = np.column_stack([p2, np.ones(n)])
    thr2 = threshold * threshold
    counts = np.empty(iters, dtype=np.int64)
    chunk = 250
    for s in range(0, iters, chunk):
        counts[s:s + chunk] = (sampson_distance(F[s:s + chunk], X1, X2) < thr2).sum(axis=1)
    best = int(np.argmax(counts))
    F_best = F[best]
    mask = sampson_distance(F_best, X1, X2) < thr2
    if mask.sum() >= 8:
        Fr = _eight_point_batch(h1[mask][None], h2[mask][None])[0]
        Fr = T2.T @ Fr @ T1
        mask_r = sampson_distance(Fr, X1, X2) < thr2
        if mask_r.sum() >= mask.sum():
            F_best, mask = Fr, mask_r
    return F_best, mask


@dataclass(frozen=True, eq=False)
class VerifyResult:
    inliers: int
    query_pts: np.ndarray
    ref_pts: np.ndarray
    tentative: int


def sparse_verify(
    image_q: np.ndarray,
    image_r: np.ndarray,
    max_kp: int = 1000,
    seed: int = RANSAC_SEED,
    keypoints_q: Keypoints | None = None,
    keypoints_r: Keypoints | None = None,
) -> VerifyResult:
    """Count epipolar-consistent keypoint matches between two images.

    Precomputed keypoints may be passed for either side; the matching image
    argument is then ignored.
    """
    kq = keypoints_q if keypoints_q is not None else detect_keypoints(image_q, max_kp)
    kr = keypoints_r if keypoints_r is not None else detect_keypoints(image_r, max_kp)
    pairs = mutual_ratio_matches(kq, kr)
    empty = np.zeros((0, 2))
    if len(pairs) < 8:
        return VerifyResult(0, empty, empty, len(pairs))
    p1 = kq.points[pairs[:, 0]]
    p2 = kr.points[pairs[:, 1]]
    _, mask = fundamental_ransac(p1, p2, seed=seed)
    return VerifyResult(int(mask.sum()), p1[mask], p2[mask], len(pairs))
