"""Training objectives: photometric, coverage, overlap, parsimony, opacity
entropy, enter, scale and mask terms, plus ray/point sampling.

Every loss returns a differentiable scalar; total_loss additionally reports
the individual term values for logging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .hybrid import HybridScene, LossWeights, SplatSet
from .render import Camera, RenderedImage

_DTYPE = torch.float64

_P_CLAMP = 1e-6


@dataclass
class RayBatch:
    """Rays with mask labels and stratified in-bbox sample points."""

    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3) unit
    labels: torch.Tensor  # (R,) in {0, 1}
    samples: torch.Tensor  # (R, S, 3)

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class PointSample:
    points: torch.Tensor  # (N, 3)
    owner: torch.Tensor | None = None  # (N,) block id, point-level stage


# ---------------------------------------------------------------------------
# SSIM


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    xs = torch.arange(size, dtype=_DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(xs ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g.outer(g)


_WINDOW = _gaussian_window()


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM with the standard 11x11 / sigma 1.5 window, per-channel
    averaged.  Inputs are (H, W, 3) or (H, W) in [0, 1]."""
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    a = torch.as_tensor(a, dtype=_DTYPE)
    b = torch.as_tensor(b, dtype=_DTYPE)
    if a.dim() == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    x = a.permute(2, 0, 1).unsqueeze(1)  # (C, 1, H, W)
    y = b.permute(2, 0, 1).unsqueeze(1)
    w = _WINDOW.reshape(1, 1, 11, 11)
    # replicate-pad so border windows see local statistics, not zeros
    x = F.pad(x, (5, 5, 5, 5), mode="replicate")
    y = F.pad(y, (5, 5, 5, 5), mode="replicate")
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    mu_x2, mu_y2, mu_xy = mu_x ** 2, mu_y ** 2, mu_x * mu_y
    sig_x = F.conv2d(x * x, w) - mu_x2
    sig_y = F.conv2d(y * y, w) - mu_y2
    sig_xy = F.conv2d(x * y, w) - mu_xy
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mu_xy + c1) * (2 * sig_xy + c2)
    den = (mu_x2 + mu_y2 + c1) * (sig_x + sig_y + c2)
    return (num / den).mean()


def rendering_loss(rendered: RenderedImage, target, lambda_ssim: float = 0.2) -> torch.Tensor:
    """(1 - lambda) L1 + lambda (1 - SSIM) / 2 against a mask-premultiplied
    target image."""
    tgt = torch.as_tensor(target, dtype=_DTYPE)
    if rendered.rgb.shape != tgt.shape:
        raise ValueError("image dimensions differ")
    l1 = torch.abs(rendered.rgb - tgt).mean()
    if lambda_ssim == 0.0:
        return l1
    dssim = (1.0 - ssim(rendered.rgb, tgt)) / 2.0
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * dssim


# ---------------------------------------------------------------------------
# geometric regularizers


def coverage_loss(batch: RayBatch, scene: HybridScene) -> torch.Tensor:
    """Inside-mask rays must pierce some block; outside-mask rays must miss
    every block.  Hard min/max over blocks and samples, mean over rays."""
    if scene.n_alive() == 0:
        raise ValueError("scene has no alive blocks")
    r, s, _ = batch.samples.shape
    pts = batch.samples.reshape(-1, 3)
    d = scene.signed_distances(pts).reshape(-1, r, s)  # (B, R, S)
    d_min = d.amin(dim=(0, 2))
    neg_max = (-d).amax(dim=(0, 2))
    lab = batch.labels
    per_ray = lab * torch.relu(d_min) + (1 - lab) * torch.relu(neg_max)
    return per_ray.mean()


def overlap_loss(pts: PointSample, scene: HybridScene, gamma: float | None = None,
                 k: float = 1.95) -> torch.Tensor:
    """Penalize summed soft occupancy above k at Monte Carlo points."""
    if gamma is not None and gamma <= 0:
        raise ValueError("gamma must be > 0")
    occ = torch.stack([
        b.soft_occupancy(pts.points, gamma if gamma is not None else scene.gamma)
        for b in scene.alive_blocks()
    ])
    return torch.relu(occ.sum(dim=0) - k).mean()


def parsimony_loss(scene: HybridScene) -> torch.Tensor:
    """Mean sqrt(tau) over alive blocks."""
    taus = torch.stack([b.tau() for b in scene.alive_blocks()])
    return torch.sqrt(taus).mean()


def opacity_entropy_loss(batch: RayBatch, scene: HybridScene,
                         gamma: float | None = None) -> torch.Tensor:
    """Cross-entropy between per-ray peak interior occupancy and the mask
    label.  Only samples lying inside some block count; rays without any
    interior sample are skipped."""
    g = gamma if gamma is not None else scene.gamma
    r, s, _ = batch.samples.shape
    pts = batch.samples.reshape(-1, 3)
    d = scene.signed_distances(pts).reshape(-1, r, s)
    occ = torch.stack([b.tau() for b in scene.alive_blocks()]).reshape(-1, 1, 1) \
        * torch.sigmoid(-d / g)
    interior = (d <= 0).any(dim=0)  # (R, S)
    has_interior = interior.any(dim=1)  # (R,)
    if not bool(has_interior.any()):
        return torch.zeros((), dtype=_DTYPE)
    neg = torch.full_like(occ, -1.0)
    occ = torch.where(interior.unsqueeze(0), occ, neg)
    p = occ.amax(dim=(0, 2))  # (R,)
    p = torch.clamp(p, _P_CLAMP, 1 - _P_CLAMP)
    lab = batch.labels
    bce = -(lab * torch.log(p) + (1 - lab) * torch.log(1 - p))
    return bce[has_interior].mean()


def enter_loss(splats: SplatSet, scene: HybridScene,
               sample_idx: np.ndarray | None = None) -> torch.Tensor:
    """Penalize splat centers that sit inside a foreign block (point-level
    stage).  sample_idx optionally restricts to a subset of splats."""
    centers = splats.centers
    ids = splats.block_id
    if sample_idx is not None:
        centers = centers[sample_idx]
        ids = ids[sample_idx]
    n = centers.shape[0]
    if n == 0:
        return torch.zeros((), dtype=_DTYPE)
    total = torch.zeros((), dtype=_DTYPE)
    for m in scene.alive_indices():
        foreign = ids != m
        if not bool(foreign.any()):
            continue
        d = scene.blocks[m].signed_distance(centers[foreign])
        total = total + torch.relu(-d).sum()
    return total / n


def scale_regularization(splats: SplatSet, s_max: float) -> torch.Tensor:
    """Hinge on the larger tangent extent above s_max."""
    if len(splats) == 0:
        return torch.zeros((), dtype=_DTYPE)
    big = torch.maximum(splats.scale2, splats.scale3)
    return torch.relu(big - s_max).mean()


def mask_loss(rendered: RenderedImage, mask) -> torch.Tensor:
    """Binary cross-entropy between accumulated alpha and the mask."""
    m = torch.as_tensor(mask, dtype=_DTYPE)
    if rendered.alpha.shape != m.shape:
        raise ValueError("image dimensions differ")
    a = torch.clamp(rendered.alpha, _P_CLAMP, 1 - _P_CLAMP)
    return -(m * torch.log(a) + (1 - m) * torch.log(1 - a)).mean()


def total_loss(scene: HybridScene, batch: RayBatch | None, pts: PointSample | None,
               rendered: RenderedImage, target, weights: LossWeights,
               stage: str = "block", splats: SplatSet | None = None,
               mask=None, s_max: float | None = None,
               enter_idx: np.ndarray | None = None,
               k_overlap: float = 1.95):
    """Weighted sum of the active stage's terms plus a per-term report."""
    zero = torch.zeros((), dtype=_DTYPE)
    ren = rendering_loss(rendered, target, weights.lambda_ssim)
    terms = {"ren": ren, "cov": zero, "over": zero, "par": zero, "opa": zero,
             "enter": zero, "scale": zero, "mask": zero}
    total = ren
    if stage == "block":
        terms["cov"] = coverage_loss(batch, scene)
        terms["over"] = overlap_loss(pts, scene, k=k_overlap)
        terms["par"] = parsimony_loss(scene)
        terms["opa"] = opacity_entropy_loss(batch, scene)
        total = (total + weights.w_cov * terms["cov"] + weights.w_over * terms["over"]
                 + weights.w_par * terms["par"] + weights.w_opa * terms["opa"])
    elif stage == "point":
        terms["enter"] = enter_loss(splats, scene, enter_idx)
        total = total + weights.w_enter * terms["enter"]
        if s_max is not None:
            terms["scale"] = scale_regularization(splats, s_max)
            total = total + weights.w_scale * terms["scale"]
        if mask is not None:
            terms["mask"] = mask_loss(rendered, mask)
            total = total + weights.w_mask * terms["mask"]
    else:
        raise ValueError(f"unknown stage {stage!r}")
    report = {name: float(v.detach()) for name, v in terms.items()}
    report["total"] = float(total.detach())
    return total, report


# ---------------------------------------------------------------------------
# sampling


def _ray_bbox_span(origin: np.ndarray, direction: np.ndarray, bbox: np.ndarray):
    """Slab test; returns (t0, t1) or None when the ray misses the box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
    t_lo = (bbox[0] - origin) * inv
    t_hi = (bbox[1] - origin) * inv
    t0 = np.nanmax(np.minimum(t_lo, t_hi))
    t1 = np.nanmin(np.maximum(t_lo, t_hi))
    t0 = max(t0, 0.0)
    if t1 <= t0:
        return None
    return t0, t1


def sample_rays(cams: list[Camera], masks: list[np.ndarray], bbox: np.ndarray,
                rays_per_view: int, samples_per_ray: int, seed: int) -> RayBatch:
    """Rays through random pixels with mask labels, stratified samples over
    each ray's bbox intersection.  Rays missing the bbox are resampled."""
    rng = np.random.default_rng(seed)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    origins, dirs, labels, samples = [], [], [], []
    for cam, mask in zip(cams, masks):
        pos = cam.position
        rot_t = cam.rotation.T
        count = 0
        attempts = 0
        while count < rays_per_view:
            attempts += 1
            if attempts > 200 * rays_per_view:
                raise RuntimeError("could not sample rays hitting the scene bbox")
            px = rng.integers(0, cam.width)
            py = rng.integers(0, cam.height)
            d_cam = np.array([(px + 0.5 - cam.cx) / cam.fx,
                              -(py + 0.5 - cam.cy) / cam.fy, -1.0])
            d_world = rot_t @ d_cam
            d_world /= np.linalg.norm(d_world)
            span = _ray_bbox_span(pos, d_world, bbox)
            if span is None:
                continue
            t0, t1 = span
            u = rng.random(samples_per_ray)
            ts = t0 + (t1 - t0) * (np.arange(samples_per_ray) + u) / samples_per_ray
            samples.append(pos[None, :] + ts[:, None] * d_world[None, :])
            origins.append(pos)
            dirs.append(d_world)
            labels.append(float(mask[py, px] > 0.5))
            count += 1
    return RayBatch(
        origins=torch.as_tensor(np.array(origins), dtype=_DTYPE),
        directions=torch.as_tensor(np.array(dirs), dtype=_DTYPE),
        labels=torch.as_tensor(np.array(labels), dtype=_DTYPE),
        samples=torch.as_tensor(np.array(samples), dtype=_DTYPE),
    )


def sample_points(bbox: np.ndarray, n: int, seed: int) -> PointSample:
    """Uniform points in the scene bbox for the overlap loss."""
    rng = np.random.default_rng(seed)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    pts = bbox[0] + rng.random((n, 3)) * (bbox[1] - bbox[0])
    return PointSample(points=torch.as_tensor(pts, dtype=_DTYPE))
