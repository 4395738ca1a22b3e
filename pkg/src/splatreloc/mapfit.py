"""Attribute fitting for a feature splat map with frozen geometry.

The training loss per view is

    L = (1 - lam) * L1(I, I_hat) + lam * (1 - SSIM(I, I_hat)) / 2
        + gamma * mean |F_t - F_hat|

where F_hat is the rendered low-dimensional feature map pushed through the
decoder and resized to the target grid. Gradients are analytic through the
compositing chain and the decoder; parameters are stepped by plain SGD.

``distill_features`` is a closed-form initializer for the feature field: it
averages encoder features at each primitive's projected center over a set of
posed views and compresses them with an SVD.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from ._raster import composite_backward, composite_tiles
from .core import CameraIntrinsics, Pose, project_points
from .featurizer import (
    COARSE_DIM,
    LOW_DIM,
    FeatureDecoder,
    FeatureMap,
    encode_coarse_at,
    resize_matrix,
)
from .splat import SceneMap, _bin_tiles, project_scene, render

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
OPACITY_RANGE = (1e-4, 0.999)
FD_STEP = 1e-4
GRAD_ATOL = 1e-7
VISIBILITY_TOL = 0.05  # relative depth agreement for distillation


class FitError(ValueError):
    """Invalid fitting configuration or mismatched inputs."""


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    learning_rate: float = 1e-3
    lam: float = 0.2
    gamma: float = 1.0
    train_color: bool = True
    train_opacity: bool = True
    train_features: bool = True
    train_decoder: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise FitError("lam must lie in [0, 1]")
        if self.gamma < 0:
            raise FitError("gamma must be non-negative")
        if not self.learning_rate > 0:
            raise FitError("learning_rate must be positive")
        if self.iterations < 0:
            raise FitError("iterations must be non-negative")

    @property
    def trainable(self) -> tuple[str, ...]:
        names = []
        if self.train_color:
            names.append("colors")
        if self.train_opacity:
            names.append("opacities")
        if self.train_features:
            names.append("features")
        if self.train_decoder:
            names += ["decoder_weights", "decoder_bias"]
        return tuple(names)


@dataclass
class FitView:
    image: np.ndarray  # H x W x 3 in [0, 1]
    features: FeatureMap | None
    pose: Pose
    intrinsics: CameraIntrinsics


@dataclass
class FitResult:
    scene: SceneMap
    history: list[tuple[int, float, float, float]] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,loss,loss_rgb,loss_feat\n")
        for it, tot, rgb, feat in self.history:
            buf.write(f"{it},{tot!r},{rgb!r},{feat!r}\n")
        return buf.getvalue()


# --- image losses ------------------------------------------------------------


def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over the first two axes, zero padded, same size.

    The kernel is symmetric, so this operator is its own adjoint.
    """
    g = _gauss_kernel()
    y = ndimage.correlate1d(x, g, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(y, g, axis=1, mode="constant", cval=0.0)


def _as_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise FitError(f"expected an H x W or H x W x C image, got shape {a.shape}")
    return a


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = _as_image(x)
    y = _as_image(y)
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    return ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / (
        (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    )


def _rgb_loss_grad(target: np.ndarray, rendered: np.ndarray, lam: float) -> tuple[float, float, np.ndarray]:
    """(loss, ssim, dloss/drendered) for one image pair."""
    x = _as_image(target)
    y = _as_image(rendered)
    if x.shape != y.shape:
        raise FitError(f"image shapes differ: {x.shape} vs {y.shape}")
    n = x.size
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * (exy - mx * my) + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    ssim = float(S.mean())
    diff = y - x
    l1 = float(np.abs(diff).mean())
    loss = (1.0 - lam) * l1 + lam * (1.0 - ssim) / 2.0
    # d mean(S) / d y through (my, eyy, exy)
    g_my = S * (2 * mx / A1 - 2 * mx / A2 - 2 * my / B1 + 2 * my / B2) / n
    g_exy = S * 2.0 / A2 / n
    g_eyy = -S / B2 / n
    d_ssim = _blur(g_my) + x * _blur(g_exy) + 2.0 * y * _blur(g_eyy)
    grad = (1.0 - lam) * np.sign(diff) / n - 0.5 * lam * d_ssim
    return loss, ssim, grad.reshape(np.shape(rendered))


def loss_rgb(target: np.ndarray, rendered: np.ndarray, lam: float = 0.2) -> float:
    """(1 - lam) * mean |I - I_hat| + lam * (1 - SSIM) / 2, 11 x 11 window, sigma 1.5."""
    if not 0.0 <= lam <= 1.0:
        raise FitError("lam must lie in [0, 1]")
    return _rgb_loss_grad(target, rendered, lam)[0]


def loss_feat(target: FeatureMap, rendered: FeatureMap) -> float:
    """Mean absolute difference of two equally shaped feature maps."""
    a = np.asarray(target.data, dtype=np.float64)
    b = np.asarray(rendered.data, dtype=np.float64)
    if a.shape != b.shape:
        raise FitError(f"feature map shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


# --- differentiable forward / backward ----------------------------------------


@dataclass
class Params:
    """Float64 copies of every fittable attribute."""

    colors: np.ndarray
    opacities: np.ndarray
    features: np.ndarray
    decoder_weights: np.ndarray
    decoder_bias: np.ndarray

    @classmethod
    def from_scene(cls, scene: SceneMap) -> Params:
        f64 = lambda a: np.array(a, dtype=np.float64)  # noqa: E731
        return cls(
            f64(scene.colors), f64(scene.opacities), f64(scene.features),
            f64(scene.decoder.weights), f64(scene.decoder.bias),
        )

    def copy(self) -> Params:
        return Params(*(np.array(getattr(self, n)) for n in PARAM_NAMES))


PARAM_NAMES = ("colors", "opacities", "features", "decoder_weights", "decoder_bias")


def _unit_rows(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return np.divide(f, n, out=np.zeros_like(f), where=n > 0), n


def _normalize_cols(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize along axis 0; zero columns stay zero."""
    n = np.linalg.norm(x, axis=0, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0), n


def _normalize_back(g: np.ndarray, y: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Adjoint of y = x / |x| along axis 0."""
    proj = g - y * np.sum(g * y, axis=0, keepdims=True)
    return np.divide(proj, n, out=np.zeros_like(proj), where=n > 0)


class _ViewGeometry:
    """Projection and tile binning of one view; fixed because geometry is frozen."""

    def __init__(self, scene: SceneMap, K: CameraIntrinsics, pose: Pose) -> None:
        self.K = K
        self.proj = project_scene(scene, K, pose)
        self.bins = _bin_tiles(self.proj, K.width, K.height)


def _decode_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, target: tuple[int, int]):
    """decode_features in float64, keeping what the backward pass needs."""
    C_low, H, Wd = x.shape
    Ht, Wt = target
    Ry = resize_matrix(H, Ht)
    Rx = resize_matrix(Wd, Wt)
    rows = np.nonzero(Ry.any(axis=0))[0]
    cols = np.nonzero(Rx.any(axis=0))[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    taps = [xp[:, rows + dy][:, :, cols + dx] for dy in range(3) for dx in range(3)]
    patches = np.stack(taps, axis=1)  # C' x 9 x r x c
    w = W.reshape(W.shape[0], C_low, 9)
    y = np.einsum("okt,ktrc->orc", w, patches, optimize=True) + b[:, None, None]
    out = np.einsum("ir,orc,jc->oij", Ry[:, rows], y, Rx[:, cols], optimize=True)
    F, nrm = _normalize_cols(out)
    cache = (Ry[:, rows], Rx[:, cols], rows, cols, patches, w, F, nrm, x.shape)
    return F, cache


def _decode_backward(gF: np.ndarray, cache):
    Ry, Rx, rows, cols, patches, w, F, nrm, xshape = cache
    g_out = _normalize_back(gF, F, nrm)
    g_y = np.einsum("ir,oij,jc->orc", Ry, g_out, Rx, optimize=True)
    g_w = np.einsum("orc,ktrc->okt", g_y, patches, optimize=True)
    g_b = g_y.sum(axis=(1, 2))
    g_patches = np.einsum("okt,orc->ktrc", w, g_y, optimize=True)
    C_low, H, Wd = xshape
    g_xp = np.zeros((C_low, H + 2, Wd + 2))
    t = 0
    for dy in range(3):
        for dx in range(3):
            np.add.at(g_xp, (slice(None), (rows + dy)[:, None], (cols + dx)[None, :]), g_patches[:, t])
            t += 1
    return g_xp[:, 1:-1, 1:-1], g_w.reshape(w.shape[0], C_low, 3, 3), g_b


def view_loss_grad(
    params: Params, geom: _ViewGeometry, view: FitView, cfg: FitConfig, want_grad: bool = True
):
    """Loss terms of one view and, optionally, gradients for every parameter."""
    proj = geom.proj
    K = geom.K
    start, end, tile_list, tiles_x = geom.bins
    idx = proj.index
    use_feat = cfg.gamma > 0 and view.features is not None
    unit, fnorm = _unit_rows(params.features[idx])
    feats = unit if use_feat else np.zeros((len(idx), 0))
    means = np.ascontiguousarray(proj.means)
    conics = np.ascontiguousarray(proj.conics)
    opac = np.ascontiguousarray(params.opacities[idx])
    cols = np.ascontiguousarray(params.colors[idx])
    color, _, raw_feat, _ = composite_tiles(
        start, end, tile_list, means, conics, opac, cols,
        np.zeros(len(idx)), np.ascontiguousarray(feats),
        K.width, K.height, tiles_x, True, False, use_feat,
    )
    l_rgb, _, g_color = _rgb_loss_grad(view.image, color, cfg.lam)
    l_feat = 0.0
    g_feat = np.zeros((feats.shape[1], K.height, K.width))
    g_dw = np.zeros_like(params.decoder_weights)
    g_db = np.zeros_like(params.decoder_bias)
    if use_feat:
        low, low_n = _normalize_cols(raw_feat)
        target = np.asarray(view.features.data, dtype=np.float64)
        F, cache = _decode_forward(low, params.decoder_weights, params.decoder_bias, target.shape[1:])
        diff = F - target
        l_feat = float(np.abs(diff).mean())
        if want_grad:
            gF = cfg.gamma * np.sign(diff) / diff.size
            g_low, g_dw, g_db = _decode_backward(gF, cache)
            g_feat = _normalize_back(g_low, low, low_n)
    loss = l_rgb + cfg.gamma * l_feat
    if not want_grad:
        return loss, l_rgb, l_feat, None
    gc, go, gf = composite_backward(
        start, end, tile_list, means, conics, opac, cols, np.ascontiguousarray(feats),
        K.width, K.height, tiles_x, np.ascontiguousarray(g_color), np.ascontiguousarray(g_feat),
    )
    grads = Params(
        np.zeros_like(params.colors), np.zeros_like(params.opacities), np.zeros_like(params.features),
        g_dw, g_db,
    )
    grads.colors[idx] = gc
    grads.opacities[idx] = go
    if use_feat:
        grads.features[idx] = _normalize_back(gf.T, unit.T, fnorm.T).T
    return loss, l_rgb, l_feat, grads


def _mean_loss_grad(params, geoms, views, cfg, want_grad=True):
    tot = rgb = feat = 0.0
    acc = None
    for geom, view in zip(geoms, views):
        l, lr, lf, g = view_loss_grad(params, geom, view, cfg, want_grad)
        tot += l
        rgb += lr
        feat += lf
        if want_grad:
            if acc is None:
                acc = g
            else:
                for n in PARAM_NAMES:
                    getattr(acc, n).__iadd__(getattr(g, n))
    k = len(views)
    if acc is not None:
        for n in PARAM_NAMES:
            getattr(acc, n).__imul__(1.0 / k)
    return tot / k, rgb / k, feat / k, acc


def _check_views(scene: SceneMap, views: Sequence[FitView]) -> list[FitView]:
    views = [v if isinstance(v, FitView) else FitView(*v) for v in views]
    if not views:
        raise FitError("fit needs at least one view")
    for v in views:
        img = np.asarray(v.image)
        if img.shape[:2] != (v.intrinsics.height, v.intrinsics.width):
            raise FitError(f"image shape {img.shape} does not match intrinsics")
        if v.features is not None and v.features.dim != scene.decoder.out_dim:
            raise FitError("target feature dim does not match the decoder output")
    return views


def _to_scene(scene: SceneMap, p: Params, cfg: FitConfig) -> SceneMap:
    changes = {}
    if cfg.train_color:
        changes["colors"] = p.colors
    if cfg.train_opacity:
        changes["opacities"] = p.opacities
    if cfg.gamma > 0 and cfg.train_features:
        changes["features"] = p.features
    if cfg.gamma > 0 and cfg.train_decoder:
        changes["decoder"] = FeatureDecoder(p.decoder_weights, p.decoder_bias)
    return scene.replace(**changes)


def fit(
    scene: SceneMap,
    views: Sequence[FitView],
    cfg: FitConfig = FitConfig(),
    callback: Callable[[int, float], None] | None = None,
) -> FitResult:
    """Plain SGD on the mean per-view loss; geometry stays fixed.

    Opacities are clamped to (1e-4, 0.999) and colors to [0, 1] after each
    step. With gamma = 0 the feature field and decoder are returned untouched.
    """
    if not cfg.trainable:
        raise FitError("no trainable attributes selected")
    views = _check_views(scene, views)
    geoms = [_ViewGeometry(scene, v.intrinsics, v.pose) for v in views]
    p = Params.from_scene(scene)
    history = []
    lr = cfg.learning_rate
    for it in range(cfg.iterations):
        loss, l_rgb, l_feat, g = _mean_loss_grad(p, geoms, views, cfg)
        history.append((it, loss, l_rgb, l_feat))
        if callback is not None:
            callback(it, loss)
        if cfg.train_color:
            p.colors = np.clip(p.colors - lr * g.colors, 0.0, 1.0)
        if cfg.train_opacity:
            p.opacities = np.clip(p.opacities - lr * g.opacities, *OPACITY_RANGE)
        if cfg.gamma > 0 and cfg.train_features:
            p.features = p.features - lr * g.features
        if cfg.gamma > 0 and cfg.train_decoder:
            p.decoder_weights = p.decoder_weights - lr * g.decoder_weights
            p.decoder_bias = p.decoder_bias - lr * g.decoder_bias
    return FitResult(_to_scene(scene, p, cfg), history)


def analytic_gradients(scene: SceneMap, views: Sequence[FitView], cfg: FitConfig) -> tuple[float, Params]:
    views = _check_views(scene, views)
    geoms = [_ViewGeometry(scene, v.intrinsics, v.pose) for v in views]
    loss, _, _, g = _mean_loss_grad(Params.from_scene(scene), geoms, views, cfg)
    return loss, g


def gradient_check(
    scene: SceneMap, view: FitView | Sequence[FitView], cfg: FitConfig = FitConfig(), step: float = FD_STEP
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every entry of every trainable attribute is perturbed. The relative error
    of an entry is |a - n| / max(|a|, |n|, 1e-7), so entries where both
    gradients vanish compare in absolute terms.
    """
    views = _check_views(scene, [view] if isinstance(view, FitView) else view)
    geoms = [_ViewGeometry(scene, v.intrinsics, v.pose) for v in views]
    base = Params.from_scene(scene)
    _, _, _, g = _mean_loss_grad(base, geoms, views, cfg)
    names = {
        "colors": cfg.train_color,
        "opacities": cfg.train_opacity,
        "features": cfg.train_features,
        "decoder_weights": cfg.train_decoder,
        "decoder_bias": cfg.train_decoder,
    }
    worst = 0.0
    for name, on in names.items():
        if not on:
            continue
        arr = getattr(base, name)
        ga = getattr(g, name)
        for i in np.ndindex(arr.shape):
            plus = base.copy()
            getattr(plus, name)[i] += step
            minus = base.copy()
            getattr(minus, name)[i] -= step
            lp = _mean_loss_grad(plus, geoms, views, cfg, want_grad=False)[0]
            lm = _mean_loss_grad(minus, geoms, views, cfg, want_grad=False)[0]
            num = (lp - lm) / (2.0 * step)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), GRAD_ATOL)
            worst = max(worst, err)
    return worst


# --- closed-form feature initialization ---------------------------------------


def distill_features(
    scene: SceneMap,
    views: Sequence[tuple[np.ndarray, Pose, CameraIntrinsics]],
    low_dim: int = LOW_DIM,
    high_dim: int = COARSE_DIM,
) -> tuple[SceneMap, float]:
    """Fit f_low and a center-tap decoder from encoder features of posed images.

    Each primitive collects the coarse encoder feature at its projected
    center in every view where it is visible (rendered depth within 5% of
    its own depth). The per-primitive means are compressed to ``low_dim``
    with an SVD; the decoder maps back with the top right singular vectors.
    Returns the new scene and the fraction of energy kept.
    """
    n = len(scene)
    acc = np.zeros((n, high_dim))
    cnt = np.zeros(n)
    centers = scene.centers.astype(np.float64)
    for image, pose, K in views:
        view = render(scene, K, pose, channels={"depth"})
        uv, z = project_points(K, pose, centers)
        ok = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
        idx = np.nonzero(ok)[0]
        u = np.rint(uv[idx, 0]).astype(np.int64)
        v = np.rint(uv[idx, 1]).astype(np.int64)
        idx = idx[np.abs(view.depth[v, u] - z[idx]) < VISIBILITY_TOL * z[idx]]
        if len(idx) == 0:
            continue
        f = encode_coarse_at(image, uv[idx], high_dim)
        np.add.at(acc, idx, f)
        np.add.at(cnt, idx, 1.0)
    seen = cnt > 0
    if not np.any(seen):
        raise FitError("no primitive is visible in any distillation view")
    acc[seen] /= cnt[seen, None]
    _, S, Vt = np.linalg.svd(acc[seen], full_matrices=False)
    k = min(low_dim, Vt.shape[0])
    B = np.zeros((high_dim, low_dim))
    B[:, :k] = Vt[:k].T
    low = acc @ B
    # unseen primitives get the mean feature so no row is zero
    if not np.all(seen):
        low[~seen] = low[seen].mean(axis=0)
    energy = float((S[:k] ** 2).sum() / max((S**2).sum(), 1e-300))
    return scene.replace(features=low, decoder=FeatureDecoder.from_matrix(B)), energy
