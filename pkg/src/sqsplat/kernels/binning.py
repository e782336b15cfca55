"""Tile binning shared by both rasterizer backends.

Splats are assigned to every 16x16 tile their (5 sigma) screen-space radius
touches, then ordered by (tile, depth, splat index).  The splat-index
tie-break makes compositing deterministic for equal depths.
"""

from __future__ import annotations

import numpy as np

TILE = 16

ALPHA_MAX = 0.999
T_MIN = 1e-4
ALPHA_SKIP = 1e-6
LOWPASS = 0.3
RADIUS_SIGMAS = 5.0


def bin_splats(mean2d: np.ndarray, radius: np.ndarray, depth: np.ndarray,
               height: int, width: int):
    """Returns (tile_splats, tile_offsets, ntx, nty).

    tile_splats holds splat indices sorted by (tile id, depth, index);
    tile_offsets[t]:tile_offsets[t+1] slices tile t's entries.
    """
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    n = mean2d.shape[0]
    ntiles = ntx * nty
    if n == 0:
        return (np.empty(0, dtype=np.int64),
                np.zeros(ntiles + 1, dtype=np.int64), ntx, nty)

    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / TILE), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / TILE), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / TILE), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / TILE), 0, nty - 1).astype(np.int64)

    # drop splats fully outside the image
    inside = (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < width) & \
             (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < height)
    nx = np.where(inside, tx1 - tx0 + 1, 0)
    ny = np.where(inside, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, dtype=np.int64),
                np.zeros(ntiles + 1, dtype=np.int64), ntx, nty)

    idx = np.repeat(np.arange(n, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    nx_rep = np.repeat(nx, counts)
    tx = np.repeat(tx0, counts) + local % np.maximum(nx_rep, 1)
    ty = np.repeat(ty0, counts) + local // np.maximum(nx_rep, 1)
    tile_id = ty * ntx + tx

    order = np.lexsort((idx, depth[idx], tile_id))
    tile_splats = idx[order]
    tile_sorted = tile_id[order]
    tile_offsets = np.searchsorted(tile_sorted, np.arange(ntiles + 1))
    return tile_splats, tile_offsets.astype(np.int64), ntx, nty
