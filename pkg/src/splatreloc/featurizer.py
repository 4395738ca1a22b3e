"""Deterministic image features and the scene-specific feature decoder.

The dense encoders stand in for learned backbones. Each pixel gets a small
set of channels (soft-binned signed gradient orientations, gradient energy,
centered color); the channels are Gaussian-pooled, sampled at 2x2 sub-bins
around every cell center, and mapped to the output width by a fixed random
projection. Every operation before the sampling step is translation
equivariant, so shifting the image by one stride shifts interior cells by
exactly one cell.

Externally computed feature maps can replace these encoders; see
``splatreloc.io.load_feature_map``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

COARSE_STRIDE = 8
FINE_STRIDE = 2
COARSE_DIM = 256
LOW_DIM = 64
FINE_DIM = 64
GLOBAL_DIM = 256
N_ORIENT = 8
GEM_P = 3.0
GLOBAL_REGIONS = 3
COARSE_SIGMA = 5.0
COARSE_SURROUND = 15.0
COARSE_SUB_OFFSET = 12.0
COARSE_GRID = 3
FINE_SIGMA = 1.0
FINE_SURROUND = 0.0
FINE_SUB_OFFSET = 3.0
FINE_BANDWIDTH = 0.2
ORIENT_WEIGHT = 2.0
BIAS = 1e-3

_PROJ_SEED = 20240611


class FeatureError(ValueError):
    """Invalid input to an encoder or decoder (empty image, dim mismatch)."""


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # C x H' x W'
    stride: int

    def __post_init__(self) -> None:
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise FeatureError(f"feature map must be C x H x W, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise FeatureError("feature map contains non-finite values")
        if int(self.stride) < 1:
            raise FeatureError("stride must be a positive integer")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def flat(self) -> np.ndarray:
        """Cells as rows: (H' * W', C), row-major over the grid."""
        return self.data.reshape(self.dim, -1).T


@dataclass(frozen=True, eq=False)
class FeatureDecoder:
    """3x3 linear map from C' rendered channels to C channels."""

    weights: np.ndarray  # C x C' x 3 x 3
    bias: np.ndarray  # C

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32).ravel()
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise FeatureError(f"decoder weights must be C x C' x 3 x 3, got {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise FeatureError("decoder bias does not match output dimension")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise FeatureError("decoder weights must be finite")
        w = w.copy()
        b = b.copy()
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def identity(cls, dim: int) -> FeatureDecoder:
        w = np.zeros((dim, dim, 3, 3), dtype=np.float32)
        w[np.arange(dim), np.arange(dim), 1, 1] = 1.0
        return cls(w, np.zeros(dim, dtype=np.float32))

    @classmethod
    def from_matrix(cls, M: np.ndarray, bias: np.ndarray | None = None) -> FeatureDecoder:
        """Decoder that applies ``M`` (C x C') at the center tap only."""
        M = np.asarray(M, dtype=np.float32)
        w = np.zeros((M.shape[0], M.shape[1], 3, 3), dtype=np.float32)
        w[:, :, 1, 1] = M
        b = np.zeros(M.shape[0], dtype=np.float32) if bias is None else bias
        return cls(w, b)

    def equals(self, other: FeatureDecoder) -> bool:
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)


GlobalDescriptor = np.ndarray


@dataclass(frozen=True, eq=False)
class Keypoints:
    points: np.ndarray  # N x 2, (x, y) pixels
    descriptors: np.ndarray  # N x 128, unit norm
    scores: np.ndarray  # N

    def __len__(self) -> int:
        return self.points.shape[0]


# --- dense encoders ----------------------------------------------------------


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0 or img.ndim not in (2, 3) or min(img.shape[:2]) == 0:
        raise FeatureError("empty or malformed image")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] != 3:
        raise FeatureError(f"expected 3 color channels, got {img.shape[2]}")
    return img


def _pad_to_multiple(img: np.ndarray, stride: int) -> np.ndarray:
    H, W = img.shape[:2]
    ph = (-H) % stride
    pw = (-W) % stride
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(H, W) > 1 else "edge")
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def _gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate1d(gray, [-0.5, 0.0, 0.5], axis=1, mode="reflect")
    gy = ndimage.correlate1d(gray, [-0.5, 0.0, 0.5], axis=0, mode="reflect")
    return gx, gy


def orientation_channels(gx: np.ndarray, gy: np.ndarray, n_bins: int = N_ORIENT) -> np.ndarray:
    """Gradient magnitude soft-binned over signed orientation: (n_bins, H, W)."""
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % (2 * np.pi)
    pos = ang / (2 * np.pi) * n_bins
    lo = np.floor(pos).astype(np.int64) % n_bins
    frac = pos - np.floor(pos)
    hi = (lo + 1) % n_bins
    out = np.zeros((n_bins,) + gx.shape)
    rows, cols = np.indices(gx.shape)
    np.add.at(out, (lo, rows, cols), mag * (1 - frac))
    np.add.at(out, (hi, rows, cols), mag * frac)
    return out


def _pixel_channels(img: np.ndarray, orient_weight: float = 2.0) -> np.ndarray:
    gray = to_gray(img)
    gx, gy = _gradients(gray)
    orient = orientation_channels(gx, gy)
    energy = orient.mean(axis=0, keepdims=True)
    centered = orient - energy
    color = np.moveaxis(img, 2, 0) - 0.5
    return np.concatenate([orient_weight * centered, energy, color], axis=0)


@lru_cache(maxsize=None)
def _projection(in_dim: int, out_dim: int, tag: str) -> np.ndarray:
    """Fixed seeded projection with orthonormal columns (inner products preserved)."""
    seed = _PROJ_SEED + sum(ord(ch) for ch in tag) * 1009 + in_dim * 31 + out_dim
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((out_dim, in_dim))
    if out_dim >= in_dim:
        P, _ = np.linalg.qr(G)
    else:
        P = G / np.sqrt(out_dim)
    P = np.ascontiguousarray(P)
    P.flags.writeable = False
    return P


@dataclass(frozen=True)
class _EncoderSpec:
    stride: int
    sigma: float
    surround: float  # 0 disables the band-pass
    sub: float
    dim: int
    bandwidth: float | None  # None: linear projection
    tag: str
    orient_weight: float
    grid: int = 2


def _coarse_spec(dim: int) -> _EncoderSpec:
    return _EncoderSpec(
        COARSE_STRIDE, COARSE_SIGMA, COARSE_SURROUND, COARSE_SUB_OFFSET, dim, None, "coarse", ORIENT_WEIGHT,
        COARSE_GRID,
    )


def _fine_spec(dim: int) -> _EncoderSpec:
    return _EncoderSpec(
        FINE_STRIDE, FINE_SIGMA, FINE_SURROUND, FINE_SUB_OFFSET, dim, FINE_BANDWIDTH, "fine", ORIENT_WEIGHT
    )


SPATIAL_SIGMA_MAX = 2.0


def gaussian_bandpass(ch: np.ndarray, sigma: float, surround: float = 0.0) -> np.ndarray:
    """Per-channel Gaussian blur minus a wider surround blur (C x H x W).

    Boundaries use half-sample symmetric extension. Wide kernels are applied
    as a per-coefficient gain in the DCT-II domain, which diagonalizes that
    extension. Narrow kernels, whose transfer is not negligible at Nyquist,
    are applied spatially with 4 sigma support so no band-limit ringing
    reaches distant pixels.
    """
    if max(sigma, surround) <= SPATIAL_SIGMA_MAX:
        out = ndimage.gaussian_filter(ch, (0, sigma, sigma), mode="reflect", truncate=4.0)
        if surround > 0:
            out = out - ndimage.gaussian_filter(ch, (0, surround, surround), mode="reflect", truncate=4.0)
        return out
    C, H, W = ch.shape
    fy = (np.arange(H) / (2.0 * H))[:, None]
    fx = (np.arange(W) / (2.0 * W))[None, :]
    f2 = fy**2 + fx**2
    gain = np.exp(-2.0 * np.pi**2 * sigma**2 * f2)
    if surround > 0:
        gain = gain - np.exp(-2.0 * np.pi**2 * surround**2 * f2)
    coef = sp_fft.dctn(ch, type=2, axes=(1, 2), norm="ortho")
    return sp_fft.idctn(coef * gain, type=2, axes=(1, 2), norm="ortho")


def _pooled_channels(img: np.ndarray, spec: _EncoderSpec) -> np.ndarray:
    return gaussian_bandpass(_pixel_channels(img, spec.orient_weight), spec.sigma, spec.surround)


def _sample(pooled: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear samples (C, *x.shape) at pixel coordinates, edge-clamped."""
    H, W = pooled.shape[1:]
    x = np.clip(x, 0.0, W - 1.0)
    y = np.clip(y, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    return (
        pooled[:, y0, x0] * ((1 - fx) * (1 - fy))
        + pooled[:, y0, x1] * (fx * (1 - fy))
        + pooled[:, y1, x0] * ((1 - fx) * fy)
        + pooled[:, y1, x1] * (fx * fy)
    )


def _describe(pooled: np.ndarray, x: np.ndarray, y: np.ndarray, spec: _EncoderSpec) -> np.ndarray:
    offs = np.linspace(-spec.sub, spec.sub, spec.grid) if spec.grid > 1 else np.zeros(1)
    subs = [_sample(pooled, x + dx, y + dy) for dy in offs for dx in offs]
    raw = np.concatenate(subs + [np.full((1,) + np.shape(x), BIAS)], axis=0)
    if spec.bandwidth is None:
        P = _projection(raw.shape[0], spec.dim, spec.tag)
        feat = (P @ raw.reshape(raw.shape[0], -1)).reshape((spec.dim,) + raw.shape[1:])
        return feat / np.maximum(np.linalg.norm(feat, axis=0, keepdims=True), 1e-300)
    raw = raw / np.maximum(np.linalg.norm(raw, axis=0, keepdims=True), 1e-300)
    return kernel_features(raw, spec.dim, spec.bandwidth, spec.tag)


def _dense_encode(img: np.ndarray, spec: _EncoderSpec) -> FeatureMap:
    img = _pad_to_multiple(_check_image(img), spec.stride)
    H, W = img.shape[:2]
    pooled = _pooled_channels(img, spec)
    hc, wc = H // spec.stride, W // spec.stride
    half = (spec.stride - 1) / 2.0
    y, x = np.meshgrid(np.arange(hc) * spec.stride + half, np.arange(wc) * spec.stride + half, indexing="ij")
    return FeatureMap(_describe(pooled, x, y, spec), spec.stride)


def encode_coarse_at(image: np.ndarray, points: np.ndarray, dim: int = COARSE_DIM) -> np.ndarray:
    """Coarse features evaluated at arbitrary pixel positions: (N, dim).

    At cell centers this reproduces ``encode_coarse`` exactly.
    """
    spec = _coarse_spec(dim)
    img = _pad_to_multiple(_check_image(image), spec.stride)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return _describe(_pooled_channels(img, spec), pts[:, 0], pts[:, 1], spec).T


@lru_cache(maxsize=None)
def _rff_params(in_dim: int, out_dim: int, bandwidth: float, tag: str) -> tuple[np.ndarray, np.ndarray]:
    seed = _PROJ_SEED + sum(ord(ch) for ch in tag) * 7919 + in_dim * 131 + out_dim
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((out_dim, in_dim)) / bandwidth
    b = rng.uniform(0.0, 2.0 * np.pi, out_dim)
    W.flags.writeable = False
    b.flags.writeable = False
    return W, b


def kernel_features(raw: np.ndarray, out_dim: int, bandwidth: float, tag: str) -> np.ndarray:
    """Random Fourier features of unit raw descriptors, L2 normalized per cell.

    Inner products approximate exp(-|x - y|^2 / (2 h^2)), so ``bandwidth`` h
    sets how quickly similarity decays as descriptors move apart.
    """
    W, b = _rff_params(raw.shape[0], out_dim, float(bandwidth), tag)
    flat = raw.reshape(raw.shape[0], -1)
    z = np.cos(W @ flat + b[:, None]).reshape((out_dim,) + raw.shape[1:])
    return z / np.maximum(np.linalg.norm(z, axis=0, keepdims=True), 1e-300)


def encode_coarse(image: np.ndarray, dim: int = COARSE_DIM) -> FeatureMap:
    """Stride-8 dense features, unit norm per cell."""
    return _dense_encode(image, _coarse_spec(dim))


def encode_fine(image_q: np.ndarray, image_r: np.ndarray, dim: int = FINE_DIM) -> tuple[FeatureMap, FeatureMap]:
    """Stride-2 dense features for a query/reference pair, unit norm per cell."""
    return (
        _dense_encode(image_q, _fine_spec(dim)),
        _dense_encode(image_r, _fine_spec(dim)),
    )


def gem(x: np.ndarray, p: float = GEM_P) -> np.ndarray:
    """Generalized mean over axis 0 of clamped (N, C) values."""
    x = np.maximum(x, 1e-6)
    return np.mean(x**p, axis=0) ** (1.0 / p)


def global_descriptor(image: np.ndarray, dim: int = GLOBAL_DIM) -> np.ndarray:
    """Regional generalized-mean pooling of the coarse map, L2 normalized.

    The coarse grid is split into GLOBAL_REGIONS x GLOBAL_REGIONS blocks;
    the per-block GeM vectors are concatenated and projected to ``dim``.
    """
    data = encode_coarse(image).data
    C, H, W = data.shape
    g = GLOBAL_REGIONS
    ys = np.linspace(0, H, g + 1).astype(np.int64)
    xs = np.linspace(0, W, g + 1).astype(np.int64)
    parts = []
    for i in range(g):
        for j in range(g):
            block = data[:, ys[i]:max(ys[i + 1], ys[i] + 1), xs[j]:max(xs[j + 1], xs[j] + 1)]
            parts.append(gem(block.reshape(C, -1).T))
    v = np.concatenate(parts)
    if dim != v.shape[0]:
        v = _projection(v.shape[0], dim, "global") @ v
    return v / np.linalg.norm(v)


# --- sparse keypoints --------------------------------------------------------

HARRIS_K = 0.04
KP_BORDER = 8
KP_NMS = 3
KP_REL_THRESHOLD = 1e-3
DESC_CELLS = 4
DESC_CELL_PX = 4


def harris_response(gray: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="reflect") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    return sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2


def detect_keypoints(image: np.ndarray, max_n: int = 1000) -> Keypoints:
    """Harris corners with 128-d gradient-histogram patch descriptors."""
    img = _check_image(image)
    gray = to_gray(img)
    H, W = gray.shape
    R = harris_response(gray)
    peak = float(R.max()) if R.size else 0.0
    thresh = max(1e-12, KP_REL_THRESHOLD * peak)
    local_max = R == ndimage.maximum_filter(R, size=KP_NMS, mode="constant", cval=-np.inf)
    mask = local_max & (R > thresh)
    b = KP_BORDER
    mask[:b] = mask[H - b:] = False
    mask[:, :b] = mask[:, W - b:] = False
    ys, xs = np.nonzero(mask)
    scores = R[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_n]
    ys, xs, scores = ys[order], xs[order], scores[order]
    desc = _patch_descriptors(gray, xs, ys)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    return Keypoints(pts, desc, scores)


def _patch_descriptors(gray: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if len(xs) == 0:
        return np.zeros((0, DESC_CELLS * DESC_CELLS * N_ORIENT))
    gx, gy = _gradients(ndimage.gaussian_filter(gray, 0.7))
    orient = orientation_channels(gx, gy)
    # box sum over each 4x4 cell; uniform_filter centers an even window at +0.5 px
    cells = ndimage.uniform_filter(orient, size=(1, DESC_CELL_PX, DESC_CELL_PX), mode="constant")
    half = DESC_CELLS * DESC_CELL_PX // 2
    offs = np.arange(DESC_CELLS) * DESC_CELL_PX - half + DESC_CELL_PX // 2
    H, W = gray.shape
    parts = []
    for oy in offs:
        for ox in offs:
            yy = np.clip(ys + oy, 0, H - 1)
            xx = np.clip(xs + ox, 0, W - 1)
            parts.append(cells[:, yy, xx].T)
    d = np.concatenate(parts, axis=1)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    d = np.minimum(d, 0.2)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return d


# --- decoder -----------------------------------------------------------------


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation weights (n_out x n_in), half-pixel centers, clamped edges."""
    M = np.zeros((n_out, n_in))
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    M[np.arange(n_out), i0] += 1.0 - w1
    M[np.arange(n_out), i1] += w1
    return M


def conv3x3(x: np.ndarray, decoder: FeatureDecoder) -> np.ndarray:
    """Zero-padded 3x3 correlation plus bias on a full C' x H x W map."""
    C_in, H, W = x.shape
    if C_in != decoder.in_dim:
        raise FeatureError(f"decoder expects {decoder.in_dim} channels, got {C_in}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    w = decoder.weights.astype(np.float64)
    out = np.broadcast_to(decoder.bias.astype(np.float64)[:, None, None], (decoder.out_dim, H, W)).copy()
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", w[:, :, dy, dx], xp[:, dy:dy + H, dx:dx + W])
    return out


def _conv_at(x: np.ndarray, decoder: FeatureDecoder, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``conv3x3`` evaluated only on the grid ``rows x cols``: C x len(rows) x len(cols)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    taps = []
    for dy in range(3):
        for dx in range(3):
            taps.append(xp[:, rows + dy][:, :, cols + dx])
    patches = np.stack(taps, axis=1)  # C' x 9 x r x c
    w = decoder.weights.astype(np.float64).reshape(decoder.out_dim, decoder.in_dim, 9)
    out = np.einsum("okt,ktrc->orc", w, patches, optimize=True)
    return out + decoder.bias.astype(np.float64)[:, None, None]


def normalize_cells(data: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(data, axis=0, keepdims=True)
    return np.divide(data, n, out=np.zeros_like(data), where=n > 0)


def decode_features(
    f_low_map: np.ndarray, decoder: FeatureDecoder, target: tuple[int, int]
) -> FeatureMap:
    """3x3 decode, bilinear resize to ``target``, per-cell L2 normalize.

    Only the pixels that the bilinear resize reads are decoded.
    """
    x = np.asarray(f_low_map, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != decoder.in_dim:
        raise FeatureError(f"expected {decoder.in_dim} x H x W input, got {x.shape}")
    Ht, Wt = target
    H, W = x.shape[1:]
    Ry = resize_matrix(H, Ht)
    Rx = resize_matrix(W, Wt)
    rows = np.nonzero(Ry.any(axis=0))[0]
    cols = np.nonzero(Rx.any(axis=0))[0]
    y = _conv_at(x, decoder, rows, cols)
    out = np.einsum("ir,orc,jc->oij", Ry[:, rows], y, Rx[:, cols], optimize=True)
    stride = max(1, round(H / Ht))
    return FeatureMap(normalize_cells(out), stride)
