"""Two-stage fitting: block-level decomposition with an adaptive block
count, then point-level splat refinement with frozen superquadrics."""

from __future__ import annotations

import contextlib
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import DBSCAN, KMeans

from . import losses, render
from .config import RunConfig
from .hybrid import Block, HybridScene, LossWeights, SplatSet
from .scene_io import Dataset

_DTYPE = torch.float64

_ADAM_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-15


class AllBlocksPrunedError(RuntimeError):
    pass


@dataclass
class FitReport:
    records: list[dict] = field(default_factory=list)
    part_count: int = 0
    wall_clock: float = 0.0

    def losses(self) -> list[float]:
        return [r["total"] for r in self.records]


def weights_from_config(cfg: RunConfig) -> LossWeights:
    return LossWeights(lambda_ssim=cfg.lambda_ssim, w_cov=cfg.lambda_cov,
                       w_over=cfg.lambda_over, w_par=cfg.lambda_par,
                       w_opa=cfg.lambda_opa, w_enter=cfg.lambda_enter,
                       w_scale=cfg.lambda_scale, w_mask=cfg.lambda_mask)


def _random_quat(rng: np.random.Generator) -> tuple:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return tuple(q)


def _default_block_scale(bbox: np.ndarray, m_init: int) -> float:
    diag = float(np.linalg.norm(bbox[1] - bbox[0]))
    return diag / (4.0 * m_init ** (1.0 / 3.0))


def init_scene(cfg: RunConfig, bbox: np.ndarray,
               init_points: np.ndarray | None = None) -> HybridScene:
    """M_init unit-exponent blocks, centered uniformly in the central 60% of
    the bbox (or at k-means centers of init_points), deterministic under the
    config seed."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    extent = bbox[1] - bbox[0]
    if (extent <= 0).any():
        raise ValueError("degenerate scene bbox")
    rng = np.random.default_rng(cfg.seed)
    if init_points is not None and len(init_points) >= cfg.m_init:
        km = KMeans(n_clusters=cfg.m_init, n_init=4, random_state=cfg.seed)
        centers = km.fit(np.asarray(init_points)).cluster_centers_
    else:
        center = (bbox[0] + bbox[1]) / 2
        centers = center + (rng.random((cfg.m_init, 3)) - 0.5) * 0.6 * extent
    s = _default_block_scale(bbox, cfg.m_init)
    blocks = []
    for i in range(cfg.m_init):
        blocks.append(Block(level=cfg.level, gaussians_per_face=cfg.gaussians_per_face,
                            sh_degree=cfg.sh_degree, eps=(1.0, 1.0),
                            scales=(s, s, s), quat=_random_quat(rng),
                            trans=tuple(centers[i]), tau=0.5,
                            bary_seed=cfg.seed + 1000 + i))
    return HybridScene(blocks=blocks, loss_weights=weights_from_config(cfg),
                       bbox=bbox, c=cfg.c, gamma=cfg.gamma)


def _block_param_groups(block: Block, cfg: RunConfig) -> list[dict]:
    return [
        {"params": [block.trans], "lr": cfg.lr_translation},
        {"params": [block.quat], "lr": cfg.lr_rotation},
        {"params": [block.eps_raw, block.log_scale], "lr": cfg.lr_shape},
        {"params": [block.opacity_logit], "lr": cfg.lr_opacity},
        {"params": [block.sh], "lr": cfg.lr_sh},
    ]


def make_block_optimizer(scene: HybridScene, cfg: RunConfig) -> torch.optim.Adam:
    groups = []
    for b in scene.blocks:
        groups += _block_param_groups(b, cfg)
    return torch.optim.Adam(groups, betas=_ADAM_BETAS, eps=_ADAM_EPS)


def prune_blocks(scene: HybridScene, prune_tau: float) -> int:
    """Mark blocks with tau < prune_tau dead.  Strict inequality: a block at
    exactly the threshold is retained."""
    removed = 0
    for b in scene.alive_blocks():
        if float(b.tau().detach()) < prune_tau:
            b.alive = False
            removed += 1
    return removed


def uncovered_points(scene: HybridScene, reference: np.ndarray) -> np.ndarray:
    """Reference points strictly outside every alive block."""
    pts = torch.as_tensor(reference, dtype=_DTYPE)
    with torch.no_grad():
        d = scene.signed_distances(pts).amin(dim=0)
    return reference[(d > 0).numpy()]


def add_blocks(scene: HybridScene, uncovered: np.ndarray, cfg: RunConfig,
               optimizer: torch.optim.Adam | None = None,
               rng_seed: int = 0) -> int:
    """One new block per DBSCAN cluster of uncovered points, placed at the
    cluster centroid with random rotation; noise points are ignored."""
    if len(uncovered) == 0:
        return 0
    eps = cfg.dbscan_eps_frac * scene.bbox_diag
    labels = DBSCAN(eps=eps, min_samples=cfg.dbscan_min_pts).fit(uncovered).labels_
    added = 0
    rng = np.random.default_rng(rng_seed)
    s = _default_block_scale(scene.bbox, cfg.m_init)
    for lab in sorted(set(labels) - {-1}):
        if len(scene.blocks) >= cfg.m_max:
            break
        centroid = uncovered[labels == lab].mean(axis=0)
        b = Block(level=cfg.level, gaussians_per_face=cfg.gaussians_per_face,
                  sh_degree=cfg.sh_degree, eps=(1.0, 1.0), scales=(s, s, s),
                  quat=_random_quat(rng), trans=tuple(centroid), tau=0.5,
                  bary_seed=rng_seed + 2000 + len(scene.blocks))
        scene.blocks.append(b)
        if optimizer is not None:
            for g in _block_param_groups(b, cfg):
                optimizer.add_param_group(
                    {**g, "betas": _ADAM_BETAS, "eps": _ADAM_EPS})
        added += 1
    return added


def _renormalize_quats(params) -> None:
    with torch.no_grad():
        for q in params:
            q /= torch.linalg.norm(q, dim=-1, keepdim=True)


def _check_finite(scene: HybridScene) -> None:
    for b in scene.alive_blocks():
        for p in b.parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError("non-finite block parameter")


def _premultiplied(ds: Dataset, view: int) -> np.ndarray:
    return ds.images[view] * ds.masks[view][:, :, None]


@contextlib.contextmanager
def _fixed_reduction_order():
    # torch intra-op parallelism reorders floating-point reductions with the
    # thread count, which makes long loss traces depend on it; pin to one
    # thread during fitting so results are reproducible on any machine. The
    # rasterizer kernels are serial regardless, so this is not the hot path.
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n)


def block_level_fit(scene: HybridScene, dataset: Dataset, cfg: RunConfig,
                    init_points: np.ndarray | None = None,
                    checkpoint_fn=None, progress_fn=None) -> FitReport:
    """Block-stage optimization: per step render one view, evaluate the full
    loss, Adam-update all block parameters, prune, and add blocks on the
    configured schedule."""
    t_start = time.perf_counter()
    report = FitReport()
    if len(dataset.train_indices) < 2:
        raise ValueError("need at least 2 training views")
    optimizer = make_block_optimizer(scene, cfg)

    if init_points is None:
        rng = np.random.default_rng(cfg.seed + 7)
        reference = scene.bbox[0] + rng.random((4096, 3)) * (scene.bbox[1] - scene.bbox[0])
    else:
        reference = np.asarray(init_points, dtype=np.float64)

    train = dataset.train_indices
    view_rng = np.random.default_rng(cfg.seed + 11)

    with _fixed_reduction_order():
        for it in range(cfg.iters_block):
            view = train[int(view_rng.integers(len(train)))]
            cam = dataset.cameras[view]
            batch = losses.sample_rays([cam], [dataset.masks[view]], scene.bbox,
                                       cfg.rays_per_view, cfg.samples_per_ray,
                                       seed=cfg.seed * 1_000_003 + it)
            pts = losses.sample_points(scene.bbox, cfg.overlap_points,
                                       seed=cfg.seed * 1_000_003 + it + 500_000)
            splats = scene.attach_all()
            rendered = render.rasterize(splats, cam, cfg.z_near)
            target = _premultiplied(dataset, view)
            loss, rec = losses.total_loss(scene, batch, pts, rendered, target,
                                          scene.loss_weights, stage="block",
                                          k_overlap=cfg.k_overlap)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            _renormalize_quats([b.quat for b in scene.blocks])

            prune_blocks(scene, cfg.prune_tau)
            if scene.n_alive() == 0:
                raise AllBlocksPrunedError(
                    f"all blocks pruned at iteration {it}; check loss weights / init")
            if it in cfg.add_iters:
                uncov = uncovered_points(scene, reference)
                add_blocks(scene, uncov, cfg, optimizer, rng_seed=cfg.seed + it)

            rec["iter"] = it
            rec["parts"] = scene.n_alive()
            report.records.append(rec)
            if __debug__:
                _check_finite(scene)
            if checkpoint_fn and (it + 1) % cfg.checkpoint_every == 0:
                checkpoint_fn(it + 1)
            if progress_fn:
                progress_fn(it, rec)

    report.part_count = scene.n_alive()
    report.wall_clock = time.perf_counter() - t_start
    return report


# ---------------------------------------------------------------------------
# point-level stage


class FreeSplats(torch.nn.Module):
    """Independently learnable splats after decoupling from their blocks.

    The owning block id stays frozen; it defines the foreign-block distance
    fields of the enter loss.
    """

    def __init__(self, centers, quats, scale2, scale3, opacity, sh, block_id):
        super().__init__()
        clamp = lambda t: torch.clamp(t, 1e-6, 1 - 1e-6)
        self.centers = torch.nn.Parameter(centers.detach().clone())
        self.quats = torch.nn.Parameter(quats.detach().clone())
        self.log_scale2 = torch.nn.Parameter(torch.log(scale2.detach()))
        self.log_scale3 = torch.nn.Parameter(torch.log(scale3.detach()))
        self.opacity_logit = torch.nn.Parameter(torch.logit(clamp(opacity.detach())))
        self.sh = torch.nn.Parameter(sh.detach().clone())
        self.register_buffer("block_id", block_id.clone())

    def splats(self) -> SplatSet:
        return SplatSet(centers=self.centers,
                        quats=self.quats / torch.linalg.norm(self.quats, dim=-1, keepdim=True),
                        scale2=torch.exp(self.log_scale2),
                        scale3=torch.exp(self.log_scale3),
                        opacity=torch.sigmoid(self.opacity_logit),
                        sh=self.sh, block_id=self.block_id)

    def __len__(self) -> int:
        return self.centers.shape[0]


def decouple(scene: HybridScene) -> FreeSplats:
    """Free every attached splat: geometry becomes per-splat learnable,
    initialized from the bound state; block ownership is frozen."""
    with torch.no_grad():
        bound = scene.attach_all()
    return FreeSplats(bound.centers, bound.quats, bound.scale2, bound.scale3,
                      bound.opacity, bound.sh, bound.block_id)


def make_point_optimizer(free: FreeSplats, cfg: RunConfig) -> torch.optim.Adam:
    groups = [
        {"params": [free.centers], "lr": cfg.lr_center},
        {"params": [free.quats], "lr": cfg.lr_rotation},
        {"params": [free.log_scale2, free.log_scale3], "lr": cfg.lr_shape},
        {"params": [free.opacity_logit], "lr": cfg.lr_opacity},
        {"params": [free.sh], "lr": cfg.lr_sh},
    ]
    return torch.optim.Adam(groups, betas=_ADAM_BETAS, eps=_ADAM_EPS)


def point_level_refine(free: FreeSplats, scene: HybridScene, dataset: Dataset,
                       cfg: RunConfig, checkpoint_fn=None, progress_fn=None) -> FitReport:
    """Refinement stage: rendering + enter + scale + mask losses on free
    splats; block superquadric parameters stay frozen."""
    t_start = time.perf_counter()
    report = FitReport()
    optimizer = make_point_optimizer(free, cfg)
    s_max = cfg.s_max_frac * scene.bbox_diag
    train = dataset.train_indices
    view_rng = np.random.default_rng(cfg.seed + 13)
    idx_rng = np.random.default_rng(cfg.seed + 17)

    with _fixed_reduction_order():
        for it in range(cfg.iters_point):
            view = train[int(view_rng.integers(len(train)))]
            cam = dataset.cameras[view]
            splats = free.splats()
            rendered = render.rasterize(splats, cam, cfg.z_near)
            target = _premultiplied(dataset, view)
            n = len(free)
            enter_idx = (idx_rng.choice(n, size=cfg.enter_samples, replace=False)
                         if n > cfg.enter_samples else None)
            loss, rec = losses.total_loss(scene, None, None, rendered, target,
                                          scene.loss_weights, stage="point",
                                          splats=splats, mask=dataset.masks[view],
                                          s_max=s_max, enter_idx=enter_idx)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            _renormalize_quats([free.quats])

            rec["iter"] = it
            rec["parts"] = scene.n_alive()
            report.records.append(rec)
            if checkpoint_fn and (it + 1) % cfg.checkpoint_every == 0:
                checkpoint_fn(it + 1)
            if progress_fn:
                progress_fn(it, rec)

    report.part_count = scene.n_alive()
    report.wall_clock = time.perf_counter() - t_start
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, scene: HybridScene, cfg: RunConfig, iteration: int,
                    stage: str, free: FreeSplats | None = None) -> None:
    blocks = [{"state": b.state_dict(), "alive": b.alive,
               "level": b.level, "gaussians_per_face": b.gaussians_per_face,
               "sh_degree": b.sh_degree} for b in scene.blocks]
    payload = {
        "format": "sqsplat-checkpoint-v1",
        "stage": stage,
        "iteration": iteration,
        "config": dataclasses.asdict(cfg),
        "bbox": scene.bbox,
        "blocks": blocks,
        "free": free.state_dict() if free is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != "sqsplat-checkpoint-v1":
        raise ValueError("not a sqsplat checkpoint")
    cfg = RunConfig(**payload["config"])
    blocks = []
    for entry in payload["blocks"]:
        b = Block(level=entry["level"], gaussians_per_face=entry["gaussians_per_face"],
                  sh_degree=entry["sh_degree"])
        b.load_state_dict(entry["state"])
        b.alive = entry["alive"]
        blocks.append(b)
    scene = HybridScene(blocks=blocks, loss_weights=weights_from_config(cfg),
                        bbox=payload["bbox"], c=cfg.c, gamma=cfg.gamma)
    free = None
    if payload["free"] is not None:
        st = payload["free"]
        free = FreeSplats(st["centers"], st["quats"],
                          torch.exp(st["log_scale2"]), torch.exp(st["log_scale3"]),
                          torch.sigmoid(st["opacity_logit"]), st["sh"], st["block_id"])
        free.load_state_dict(st)
    return scene, free, cfg, payload["iteration"], payload["stage"]
