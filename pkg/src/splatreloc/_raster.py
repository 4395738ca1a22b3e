"""Numba kernels for tiled front-to-back alpha compositing."""

from __future__ import annotations

import numpy as np
from numba import njit, prange

MAHALANOBIS_CUTOFF_SQ = 9.0
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE = 16


@njit(cache=True, parallel=True)
def composite_tiles(
    tile_start,
    tile_end,
    tile_list,
    means,
    conics,
    opacities,
    colors,
    depths,
    feats,
    width,
    height,
    tiles_x,
    want_color,
    want_depth,
    want_feat,
):
    n_tiles = tile_start.shape[0]
    C = feats.shape[1]
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    feat = np.zeros((C, height, width))
    alpha = np.zeros((height, width))
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        s = tile_start[t]
        e = tile_end[t]
        if s == e:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                d = 0.0
                for k in range(s, e):
                    gi = tile_list[k]
                    dx = px - means[gi, 0]
                    dy = py - means[gi, 1]
                    m2 = conics[gi, 0] * dx * dx + 2.0 * conics[gi, 1] * dx * dy + conics[gi, 2] * dy * dy
                    if m2 > MAHALANOBIS_CUTOFF_SQ:
                        continue
                    a = opacities[gi] * np.exp(-0.5 * m2)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < T_MIN:
                        break
                    w = a * T
                    if want_color:
                        r += colors[gi, 0] * w
                        g += colors[gi, 1] * w
                        b += colors[gi, 2] * w
                    if want_depth:
                        d += depths[gi] * w
                    if want_feat:
                        for c in range(C):
                            feat[c, py, px] += feats[gi, c] * w
                    T = test_T
                color[py, px, 0] = r
                color[py, px, 1] = g
                color[py, px, 2] = b
                depth[py, px] = d
                alpha[py, px] = 1.0 - T
    return color, depth, feat, alpha


@njit(cache=True)
def composite_backward(
    tile_start,
    tile_end,
    tile_list,
    means,
    conics,
    opacities,
    colors,
    feats,
    width,
    height,
    tiles_x,
    g_color,
    g_feat,
):
    """Gradients of a scalar loss w.r.t. per-primitive color, opacity and feature.

    ``g_color`` (H, W, 3) and ``g_feat`` (C, H, W) hold dL/d(composited plane).
    Each pixel replays the forward traversal and then walks its contributors
    back to front with running suffix sums. Serial: primitives are shared
    across tiles, so accumulation order stays fixed.
    """
    M = means.shape[0]
    C = feats.shape[1]
    grad_c = np.zeros((M, 3))
    grad_o = np.zeros(M)
    grad_f = np.zeros((M, C))
    n_tiles = tile_start.shape[0]
    acc_c = np.zeros(3)
    acc_f = np.zeros(C)
    for t in range(n_tiles):
        s = tile_start[t]
        e = tile_end[t]
        if s == e:
            continue
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        ids = np.empty(e - s, dtype=np.int64)
        al = np.empty(e - s)
        Ts = np.empty(e - s)
        gs = np.empty(e - s)
        clamped = np.empty(e - s, dtype=np.bool_)
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                n = 0
                for k in range(s, e):
                    gi = tile_list[k]
                    dx = px - means[gi, 0]
                    dy = py - means[gi, 1]
                    m2 = conics[gi, 0] * dx * dx + 2.0 * conics[gi, 1] * dx * dy + conics[gi, 2] * dy * dy
                    if m2 > MAHALANOBIS_CUTOFF_SQ:
                        continue
                    G = np.exp(-0.5 * m2)
                    a = opacities[gi] * G
                    cl = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        cl = True
                    if a < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < T_MIN:
                        break
                    ids[n] = gi
                    al[n] = a
                    Ts[n] = T
                    gs[n] = G
                    clamped[n] = cl
                    n += 1
                    T = test_T
                acc_c[:] = 0.0
                acc_f[:] = 0.0
                for m in range(n - 1, -1, -1):
                    gi = ids[m]
                    a = al[m]
                    w = a * Ts[m]
                    dl_da = 0.0
                    for ch in range(3):
                        gc = g_color[py, px, ch]
                        grad_c[gi, ch] += gc * w
                        dl_da += gc * (colors[gi, ch] * Ts[m] - acc_c[ch] / (1.0 - a))
                        acc_c[ch] += colors[gi, ch] * w
                    for c in range(C):
                        gf = g_feat[c, py, px]
                        grad_f[gi, c] += gf * w
                        dl_da += gf * (feats[gi, c] * Ts[m] - acc_f[c] / (1.0 - a))
                        acc_f[c] += feats[gi, c] * w
                    if not clamped[m]:
                        grad_o[gi] += dl_da * gs[m]
    return grad_c, grad_o, grad_f
