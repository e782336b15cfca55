"""Pure-numpy rasterizer backend.

Reference implementation of the compositing forward/backward.  Per tile it
builds the (pixel x splat) alpha matrix and emulates the serial front-to-back
loop with cumulative products; the early-termination and skip rules match the
numba backend exactly (transmittance floor checked *before* each splat,
sub-threshold alphas skipped without advancing transmittance).
"""

from __future__ import annotations

import numpy as np

from .binning import ALPHA_MAX, ALPHA_SKIP, T_MIN, TILE


def _tile_alphas(ids, mean2d, conic, alpha_base, px, py):
    dx = px[:, None] - mean2d[ids, 0][None, :]
    dy = py[:, None] - mean2d[ids, 1][None, :]
    a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    g = np.exp(-0.5 * q)
    raw = alpha_base[ids][None, :] * g
    valid = raw >= ALPHA_SKIP
    alpha = np.minimum(raw, ALPHA_MAX) * valid
    t_prev = np.cumprod(1.0 - alpha, axis=1)
    t_prev = np.concatenate([np.ones((alpha.shape[0], 1)), t_prev[:, :-1]], axis=1)
    live = t_prev >= T_MIN
    w = alpha * t_prev * live
    return dx, dy, g, raw, valid, alpha, t_prev, live, w


def _pixel_grid(ty, tx, height, width):
    y0, x0 = ty * TILE, tx * TILE
    ys = np.arange(y0, min(y0 + TILE, height))
    xs = np.arange(x0, min(x0 + TILE, width))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.ravel(), xx.ravel()


def forward(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
            alpha_base, depth, height, width):
    rgb = np.zeros((height, width, 3))
    acc_alpha = np.zeros((height, width))
    depth_acc = np.zeros((height, width))
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            ids = tile_splats[tile_offsets[t]:tile_offsets[t + 1]]
            if len(ids) == 0:
                continue
            yy, xx = _pixel_grid(ty, tx, height, width)
            px, py = xx + 0.5, yy + 0.5
            *_, w = _tile_alphas(ids, mean2d, conic, alpha_base, px, py)
            rgb[yy, xx] = w @ color[ids]
            acc_alpha[yy, xx] = w.sum(axis=1)
            depth_acc[yy, xx] = w @ depth[ids]
    return rgb, acc_alpha, depth_acc


def backward(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
             alpha_base, depth, height, width, d_rgb, d_alpha):
    n = mean2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_color = np.zeros((n, 3))
    g_base = np.zeros(n)
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            ids = tile_splats[tile_offsets[t]:tile_offsets[t + 1]]
            if len(ids) == 0:
                continue
            yy, xx = _pixel_grid(ty, tx, height, width)
            px, py = xx + 0.5, yy + 0.5
            dx, dy, g, raw, valid, alpha, t_prev, live, w = _tile_alphas(
                ids, mean2d, conic, alpha_base, px, py)
            col = color[ids]  # (K, 3)
            gr = d_rgb[yy, xx]  # (P, 3)
            ga = d_alpha[yy, xx]  # (P,)

            # suffix sums over later splats: S_after[p, i] = sum_{k>i} w c
            wc = w[:, :, None] * col[None, :, :]  # (P, K, 3)
            suff_rgb = wc[:, ::-1].cumsum(axis=1)[:, ::-1] - wc
            suff_a = (w[:, ::-1].cumsum(axis=1)[:, ::-1] - w)

            one_m = 1.0 - alpha
            safe = np.where(one_m > 1e-12, one_m, 1.0)
            d_alpha_full = (gr[:, None, :] * (t_prev[:, :, None] * col[None, :, :]
                                              - suff_rgb / safe[:, :, None])).sum(-1)
            d_alpha_full += ga[:, None] * (t_prev - suff_a / safe)
            d_alpha_full *= live * valid

            d_raw = d_alpha_full * (raw < ALPHA_MAX)
            np.add.at(g_color, ids, (gr[:, None, :] * w[:, :, None]).sum(axis=0))
            np.add.at(g_base, ids, (d_raw * g).sum(axis=0))
            d_q = -0.5 * d_raw * raw
            a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
            d_dx = d_q * (2 * a * dx + 2 * b * dy)
            d_dy = d_q * (2 * b * dx + 2 * c * dy)
            np.add.at(g_mean, ids, np.stack([-d_dx.sum(0), -d_dy.sum(0)], axis=-1))
            d_con = np.stack([(d_q * dx * dx).sum(0),
                              (d_q * 2 * dx * dy).sum(0),
                              (d_q * dy * dy).sum(0)], axis=-1)
            np.add.at(g_conic, ids, d_con)
    return g_mean, g_conic, g_color, g_base
