"""Quantitative evaluation: Chamfer distance, PSNR, SSIM, part count."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import losses
from .hybrid import HybridScene, SplatSet

PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    chamfer: float | None = None
    part_count: int = 0

    def to_json(self) -> str:
        d = {"psnr": self.psnr, "ssim": self.ssim, "parts": self.part_count}
        if self.chamfer is not None:
            d["cd"] = self.chamfer
        return json.dumps(d)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be non-empty")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0,1] images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Shared SSIM kernel with the loss module (11x11 window, sigma 1.5)."""
    with torch.no_grad():
        return float(losses.ssim(torch.as_tensor(a, dtype=torch.float64),
                                 torch.as_tensor(b, dtype=torch.float64)))


def sample_block_surfaces(scene: HybridScene, n: int, seed: int) -> np.ndarray:
    """Area-weighted surface samples over the alive block meshes."""
    if n <= 0:
        raise ValueError("n must be > 0")
    rng = np.random.default_rng(seed)
    tris = []
    for i in scene.alive_indices():
        b = scene.blocks[i]
        verts = b.world_vertices().detach().numpy()
        tris.append(verts[b._faces])
    if not tris:
        raise ValueError("no alive geometry to sample")
    tris = np.concatenate(tris)
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    prob = areas / areas.sum()
    face_idx = rng.choice(len(tris), size=n, p=prob)
    r = rng.random((n, 2))
    u = np.sqrt(r[:, 0])
    v = r[:, 1]
    bary = np.stack([1 - u, u * (1 - v), u * v], axis=1)
    return np.einsum("nk,nkd->nd", bary, tris[face_idx])


def sample_representation(rep, n: int, seed: int,
                          min_opacity: float = 0.0) -> np.ndarray:
    """Point sample of the current representation for Chamfer evaluation.

    Block-level (HybridScene): area-weighted surface samples.  Point-level
    (SplatSet): splat centers, optionally filtered by opacity, subsampled
    to n.
    """
    if isinstance(rep, HybridScene):
        return sample_block_surfaces(rep, n, seed)
    if isinstance(rep, SplatSet):
        centers = rep.centers.detach().numpy()
        if min_opacity > 0.0:
            keep = rep.opacity.detach().numpy() > min_opacity
            if keep.any():
                centers = centers[keep]
        if len(centers) == 0:
            raise ValueError("no alive geometry to sample")
        if len(centers) > n:
            rng = np.random.default_rng(seed)
            centers = centers[rng.choice(len(centers), size=n, replace=False)]
        return centers
    raise TypeError(f"cannot sample representation of type {type(rep)!r}")
