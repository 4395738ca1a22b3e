from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import splatreloc.mapfit as mapfit
from splatreloc.core import CameraIntrinsics, Pose
from splatreloc.featurizer import FeatureDecoder, FeatureMap, decode_features
from splatreloc.mapfit import (
    FitConfig,
    FitError,
    FitResult,
    FitView,
    analytic_gradients,
    distill_features,
    fit,
    gradient_check,
    loss_feat,
    loss_rgb,
    ssim_map,
)
from splatreloc.splat import GaussianPrimitive, SceneMap, render

from conftest import grad_check_case, random_scene, small_camera, texture

K32 = CameraIntrinsics(32.0, 32.0, 15.5, 15.5, 32, 32)
seeds = st.integers(0, 2**32 - 1)


def single_gaussian(color=(0.2, 0.5, 0.7)) -> SceneMap:
    g = GaussianPrimitive(np.array([0, 0, 2.0]), [1, 0, 0, 0], (0.4, 0.4, 0.4), 0.8, color, (1.0, 0.0))
    return SceneMap.from_primitives([g], FeatureDecoder.identity(2))


# --- losses ------------------------------------------------------------------


def test_loss_rgb_identical_zero():
    img = texture(np.random.default_rng(0), 32, 40)
    assert abs(loss_rgb(img, img)) < 1e-12


def test_loss_rgb_pure_l1():
    a = np.full((20, 20, 3), 0.3)
    assert loss_rgb(a, a + 0.1, lam=0.0) == pytest.approx(0.1, abs=1e-12)


def direct_ssim(x: np.ndarray, y: np.ndarray, r: int, c: int) -> float:
    """SSIM of one channel at (r, c) from an explicit 11 x 11 Gaussian window."""
    t = np.arange(11) - 5.0
    w = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * 1.5**2))
    w /= w.sum()
    px, py = x[r - 5 : r + 6, c - 5 : c + 6], y[r - 5 : r + 6, c - 5 : c + 6]
    mx, my = (w * px).sum(), (w * py).sum()
    vx = (w * (px - mx) ** 2).sum()
    vy = (w * (py - my) ** 2).sum()
    cxy = (w * (px - mx) * (py - my)).sum()
    c1, c2 = 0.01**2, 0.03**2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_ssim_matches_direct_window():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0, 1, (30, 34)), rng.uniform(0, 1, (30, 34))
    S = ssim_map(x, y)[..., 0]
    for r in range(5, 25, 3):
        for c in range(5, 29, 3):
            assert abs(S[r, c] - direct_ssim(x, y, r, c)) < 1e-6


def test_loss_rgb_shape_mismatch():
    with pytest.raises(FitError):
        loss_rgb(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_loss_feat_examples():
    rng = np.random.default_rng(2)
    a = FeatureMap(rng.standard_normal((5, 4, 6)), 8)
    assert loss_feat(a, a) == 0.0
    assert loss_feat(a, FeatureMap(a.data + 0.5, 8)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(FitError):
        loss_feat(a, FeatureMap(np.zeros((5, 4, 5)), 8))


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_loss_feat_recomputation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 5, 7))
    ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(loss_feat(FeatureMap(a, 8), FeatureMap(b, 8)) - ref) < 1e-9


# --- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_gradient_check_random_scene(seed):
    scene, view = grad_check_case(seed)
    assert gradient_check(scene, view) < 1e-4


def test_gradient_check_constant_scene():
    scene = single_gaussian((0.5, 0.5, 0.5))
    v = render(scene, K32, Pose.identity())
    F = decode_features(v.feature_low, scene.decoder, (4, 4))
    view = FitView(v.color, F, Pose.identity(), K32)
    _, g = analytic_gradients(scene, [view], FitConfig())
    for name in mapfit.PARAM_NAMES:
        assert np.abs(getattr(g, name)).max() < 1e-7
    # both gradients sit below the 1e-7 floor, so < 1 means |analytic - numeric| < 1e-7
    assert gradient_check(scene, view) < 1.0


def test_gradient_check_skips_detached(monkeypatch):
    scene, view = grad_check_case(4, n=6)
    real = mapfit._mean_loss_grad

    def broken(params, geoms, views, cfg, want_grad=True):
        out = real(params, geoms, views, cfg, want_grad)
        if want_grad:
            out[3].features = out[3].features + 1.0
        return out

    monkeypatch.setattr(mapfit, "_mean_loss_grad", broken)
    assert gradient_check(scene, view, FitConfig(train_features=False)) < 1e-4
    assert gradient_check(scene, view, FitConfig()) > 1e-2


# --- fitting -----------------------------------------------------------------


def test_fit_stationary_at_exact_targets():
    scene = random_scene(np.random.default_rng(5), n=20)
    K = small_camera(32)
    v = render(scene, K, Pose.identity())
    F = decode_features(v.feature_low, scene.decoder, (4, 4))
    res = fit(scene, [FitView(v.color, F, Pose.identity(), K)], FitConfig(iterations=5))
    assert all(abs(h[1]) < 1e-9 for h in res.history)
    assert np.abs(res.scene.colors - scene.colors).max() < 1e-9


def test_fit_single_gaussian_color_converges():
    scene = single_gaussian()
    tc = np.array([[0.4, 0.35, 0.55]])
    target = render(scene.replace(colors=tc), K32, Pose.identity()).color
    cfg = FitConfig(iterations=500, learning_rate=0.02, gamma=0.0, train_opacity=False)
    res = fit(scene, [FitView(target, None, Pose.identity(), K32)], cfg)
    assert np.abs(res.scene.colors - tc).max() < 1e-3


def test_fit_small_rate_monotone():
    scene = single_gaussian()
    target = render(scene.replace(colors=[[0.4, 0.35, 0.55]]), K32, Pose.identity()).color
    cfg = FitConfig(iterations=100, learning_rate=1e-4, gamma=0.0)
    res = fit(scene, [FitView(target, None, Pose.identity(), K32)], cfg)
    losses = [h[1] for h in res.history]
    assert len(losses) == 100 and np.all(np.diff(losses) <= 0)


def test_fit_gamma_zero_keeps_features():
    scene, view = grad_check_case(6)
    res = fit(scene, [view], FitConfig(iterations=3, learning_rate=0.01, gamma=0.0))
    assert np.array_equal(res.scene.features, scene.features)
    assert np.array_equal(res.scene.decoder.weights, scene.decoder.weights)
    assert np.array_equal(res.scene.decoder.bias, scene.decoder.bias)
    assert not np.array_equal(res.scene.colors, scene.colors)


def test_fit_keeps_geometry_and_clamps():
    scene, view = grad_check_case(7)
    res = fit(scene, [view], FitConfig(iterations=3, learning_rate=50.0))
    for name in ("centers", "rotations", "scales"):
        assert np.array_equal(getattr(res.scene, name), getattr(scene, name))
    assert res.scene.opacities.min() >= 1e-4 and res.scene.opacities.max() <= 0.999
    assert res.scene.colors.min() >= 0 and res.scene.colors.max() <= 1


def test_fit_config_errors():
    scene, view = grad_check_case(8, n=4)
    off = dict(train_color=False, train_opacity=False, train_features=False, train_decoder=False)
    with pytest.raises(FitError):
        fit(scene, [view], FitConfig(**off))
    with pytest.raises(FitError):
        FitConfig(lam=1.5)
    with pytest.raises(FitError):
        FitConfig(gamma=-1)
    with pytest.raises(FitError):
        fit(scene, [FitView(np.zeros((8, 8, 3)), None, Pose.identity(), K32)])


def test_history_csv():
    text = FitResult(single_gaussian(), [(0, 1.0, 0.5, 0.5)]).history_csv()
    assert text == "iter,loss,loss_rgb,loss_feat\n0,1.0,0.5,0.5\n"


# --- distillation ------------------------------------------------------------


def test_distill_features(room):
    scene, K, poses = room
    views = [(render(scene, K, p, channels={"color"}).color, p, K) for p in poses[:4]]
    out, energy = distill_features(scene, views, 4, 16)
    assert 0 < energy <= 1
    assert out.features.shape == (len(scene), 4) and np.all(np.isfinite(out.features))
    assert out.decoder.in_dim == 4 and out.decoder.out_dim == 16
    again, e2 = distill_features(scene, views, 4, 16)
    assert np.array_equal(again.features, out.features) and e2 == energy


def test_distill_nothing_visible():
    scene = random_scene(np.random.default_rng(9), n=10)
    behind = Pose.from_rt(np.diag([1.0, -1.0, -1.0]), [0, 0, 0])
    with pytest.raises(FitError):
        distill_features(scene, [(np.zeros((64, 64, 3)), behind, small_camera())], 2, 8)
