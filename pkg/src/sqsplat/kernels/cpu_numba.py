"""Numba-compiled rasterizer backend.

Serial per-pixel front-to-back compositing, the hot loop of rendering.  The
backward pass re-walks each pixel's splat list keeping suffix accumulators,
so gradients are exact and accumulation order is fixed (deterministic for
any thread count).
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .binning import ALPHA_MAX, ALPHA_SKIP, T_MIN, TILE


@njit(cache=True)
def _forward_kernel(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
                    alpha_base, depth, height, width, rgb, acc_alpha, depth_acc):
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo, hi = tile_offsets[t], tile_offsets[t + 1]
            if hi == lo:
                continue
            y_end = min(ty * TILE + TILE, height)
            x_end = min(tx * TILE + TILE, width)
            for py in range(ty * TILE, y_end):
                for px in range(tx * TILE, x_end):
                    cx = px + 0.5
                    cy = py + 0.5
                    trans = 1.0
                    r0 = 0.0
                    r1 = 0.0
                    r2 = 0.0
                    aa = 0.0
                    dd = 0.0
                    for s in range(lo, hi):
                        if trans < T_MIN:
                            break
                        i = tile_splats[s]
                        dx = cx - mean2d[i, 0]
                        dy = cy - mean2d[i, 1]
                        q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                             + conic[i, 2] * dy * dy)
                        raw = alpha_base[i] * np.exp(-0.5 * q)
                        if raw < ALPHA_SKIP:
                            continue
                        alpha = raw if raw < ALPHA_MAX else ALPHA_MAX
                        w = alpha * trans
                        r0 += w * color[i, 0]
                        r1 += w * color[i, 1]
                        r2 += w * color[i, 2]
                        aa += w
                        dd += w * depth[i]
                        trans *= 1.0 - alpha
                    rgb[py, px, 0] = r0
                    rgb[py, px, 1] = r1
                    rgb[py, px, 2] = r2
                    acc_alpha[py, px] = aa
                    depth_acc[py, px] = dd


@njit(cache=True)
def _backward_kernel(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
                     alpha_base, depth, height, width, d_rgb, d_alpha,
                     g_mean, g_conic, g_color, g_base):
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo, hi = tile_offsets[t], tile_offsets[t + 1]
            if hi == lo:
                continue
            y_end = min(ty * TILE + TILE, height)
            x_end = min(tx * TILE + TILE, width)
            for py in range(ty * TILE, y_end):
                for px in range(tx * TILE, x_end):
                    cx = px + 0.5
                    cy = py + 0.5
                    # first pass: totals
                    trans = 1.0
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    sa = 0.0
                    for s in range(lo, hi):
                        if trans < T_MIN:
                            break
                        i = tile_splats[s]
                        dx = cx - mean2d[i, 0]
                        dy = cy - mean2d[i, 1]
                        q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                             + conic[i, 2] * dy * dy)
                        raw = alpha_base[i] * np.exp(-0.5 * q)
                        if raw < ALPHA_SKIP:
                            continue
                        alpha = raw if raw < ALPHA_MAX else ALPHA_MAX
                        w = alpha * trans
                        s0 += w * color[i, 0]
                        s1 += w * color[i, 1]
                        s2 += w * color[i, 2]
                        sa += w
                        trans *= 1.0 - alpha

                    gr0 = d_rgb[py, px, 0]
                    gr1 = d_rgb[py, px, 1]
                    gr2 = d_rgb[py, px, 2]
                    ga = d_alpha[py, px]

                    # second pass: s* become suffix sums over later splats
                    trans = 1.0
                    for s in range(lo, hi):
                        if trans < T_MIN:
                            break
                        i = tile_splats[s]
                        dx = cx - mean2d[i, 0]
                        dy = cy - mean2d[i, 1]
                        qa = conic[i, 0]
                        qb = conic[i, 1]
                        qc = conic[i, 2]
                        q = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                        g = np.exp(-0.5 * q)
                        raw = alpha_base[i] * g
                        if raw < ALPHA_SKIP:
                            continue
                        alpha = raw if raw < ALPHA_MAX else ALPHA_MAX
                        w = alpha * trans
                        s0 -= w * color[i, 0]
                        s1 -= w * color[i, 1]
                        s2 -= w * color[i, 2]
                        sa -= w

                        g_color[i, 0] += gr0 * w
                        g_color[i, 1] += gr1 * w
                        g_color[i, 2] += gr2 * w

                        one_m = 1.0 - alpha
                        if one_m < 1e-12:
                            one_m = 1e-12
                        d_a = (gr0 * (trans * color[i, 0] - s0 / one_m)
                               + gr1 * (trans * color[i, 1] - s1 / one_m)
                               + gr2 * (trans * color[i, 2] - s2 / one_m)
                               + ga * (trans - sa / one_m))
                        if raw < ALPHA_MAX:
                            g_base[i] += d_a * g
                            d_q = -0.5 * d_a * raw
                            g_conic[i, 0] += d_q * dx * dx
                            g_conic[i, 1] += d_q * 2.0 * dx * dy
                            g_conic[i, 2] += d_q * dy * dy
                            d_dx = d_q * (2.0 * qa * dx + 2.0 * qb * dy)
                            d_dy = d_q * (2.0 * qb * dx + 2.0 * qc * dy)
                            g_mean[i, 0] -= d_dx
                            g_mean[i, 1] -= d_dy
                        trans *= 1.0 - alpha


def forward(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
            alpha_base, depth, height, width):
    rgb = np.zeros((height, width, 3))
    acc_alpha = np.zeros((height, width))
    depth_acc = np.zeros((height, width))
    _forward_kernel(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
                    alpha_base, depth, height, width, rgb, acc_alpha, depth_acc)
    return rgb, acc_alpha, depth_acc


def backward(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
             alpha_base, depth, height, width, d_rgb, d_alpha):
    n = mean2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_color = np.zeros((n, 3))
    g_base = np.zeros(n)
    _backward_kernel(tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
                     alpha_base, depth, height, width, d_rgb, d_alpha,
                     g_mean, g_conic, g_color, g_base)
    return g_mean, g_conic, g_color, g_base
