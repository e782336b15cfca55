"""Hybrid blocks: superquadrics with 2D Gaussian splats bound to their faces.

A Block owns the learnable free variables (shape exponents via a sigmoid
map, log scales, quaternion, translation, opacity logit, per-splat SH
coefficients).  Attachment derives every splat's center / tangent frame /
extents from the current surface, so splat geometry is a differentiable
function of block parameters and carries no parameters of its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import sq_core
from .sq_core import EPS_MAX, EPS_MIN, Pose, SqShape

_DTYPE = torch.float64


class DegenerateFaceError(ValueError):
    pass


def barycentric_from_uniform(r1, r2) -> torch.Tensor:
    """Map uniform (r1, r2) in [0,1)^2 to area-uniform barycentric triples.

    u = sqrt(r1), v = r2, alpha = [1-u, u(1-v), u v]; the sqrt compensates
    the triangle's area element so samples are uniform on the face.
    """
    u = torch.sqrt(torch.as_tensor(r1, dtype=_DTYPE))
    v = torch.as_tensor(r2, dtype=_DTYPE)
    return torch.stack([1 - u, u * (1 - v), u * v], dim=-1)


def sample_barycentric(n: int, rng_seed: int) -> torch.Tensor:
    """n area-uniform barycentric triples, deterministic under the seed."""
    if n <= 0:
        raise ValueError("n must be > 0")
    rng = np.random.default_rng(rng_seed)
    r = rng.random((n, 2))
    return barycentric_from_uniform(torch.from_numpy(r[:, 0]), torch.from_numpy(r[:, 1]))


def face_frames(v1: torch.Tensor, v2: torch.Tensor, v3: torch.Tensor, c: float):
    """Tangent frames and extents for a batch of triangles.

    Returns (R, scale2, scale3) with R of shape (F, 3, 3) whose columns are
    (r1 = normal, r2 = centroid->v1, r3 = Gram-Schmidt of centroid->v2) and
    scale2 = c*|m - v1|, scale3 = c*|<v2 - m, r3>|.
    """
    m = (v1 + v2 + v3) / 3.0
    n = torch.cross(v2 - v1, v3 - v1, dim=-1)
    area2 = torch.linalg.norm(n, dim=-1)
    if bool((area2 < 2e-12).any()):
        raise DegenerateFaceError("face area below 1e-12")
    r1 = n / area2.unsqueeze(-1)
    a = v1 - m
    an = torch.linalg.norm(a, dim=-1, keepdim=True)
    r2 = a / an
    w = v2 - m
    w_orth = w - (w * r1).sum(-1, keepdim=True) * r1 - (w * r2).sum(-1, keepdim=True) * r2
    wn = torch.linalg.norm(w_orth, dim=-1, keepdim=True)
    r3 = w_orth / torch.clamp(wn, min=1e-12)
    scale2 = c * an.squeeze(-1)
    scale3 = c * torch.abs((w * r3).sum(-1))
    rot = torch.stack([r1, r2, r3], dim=-1)
    return rot, scale2, scale3


def face_frame(v1, v2, v3, c: float):
    """Single-triangle convenience wrapper around face_frames."""
    as_t = lambda v: torch.as_tensor(v, dtype=_DTYPE).reshape(1, 3)
    rot, s2, s3 = face_frames(as_t(v1), as_t(v2), as_t(v3), c)
    return rot[0], s2[0], s3[0]


def batch_matrix_to_quat(m: torch.Tensor) -> torch.Tensor:
    """(N, 3, 3) rotations -> (N, 4) quaternions (w, x, y, z), differentiable.

    All four Shepperd branches are evaluated and the numerically safe one is
    selected per element, so gradients flow through the chosen branch only.
    """
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    # candidate squared magnitudes (may be <= 0 off-branch; clamp before sqrt)
    qw2 = 1 + m00 + m11 + m22
    qx2 = 1 + m00 - m11 - m22
    qy2 = 1 - m00 + m11 - m22
    qz2 = 1 - m00 - m11 + m22
    cands = torch.stack([qw2, qx2, qy2, qz2], dim=1)
    best = cands.argmax(dim=1)

    r = torch.sqrt(torch.clamp(cands, min=1e-12))
    rw, rx, ry, rz = r[:, 0], r[:, 1], r[:, 2], r[:, 3]

    q_w = torch.stack(
        [0.5 * rw, (m[:, 2, 1] - m[:, 1, 2]) / (2 * rw),
         (m[:, 0, 2] - m[:, 2, 0]) / (2 * rw), (m[:, 1, 0] - m[:, 0, 1]) / (2 * rw)], dim=1)
    q_x = torch.stack(
        [(m[:, 2, 1] - m[:, 1, 2]) / (2 * rx), 0.5 * rx,
         (m[:, 0, 1] + m[:, 1, 0]) / (2 * rx), (m[:, 0, 2] + m[:, 2, 0]) / (2 * rx)], dim=1)
    q_y = torch.stack(
        [(m[:, 0, 2] - m[:, 2, 0]) / (2 * ry), (m[:, 0, 1] + m[:, 1, 0]) / (2 * ry),
         0.5 * ry, (m[:, 1, 2] + m[:, 2, 1]) / (2 * ry)], dim=1)
    q_z = torch.stack(
        [(m[:, 1, 0] - m[:, 0, 1]) / (2 * rz), (m[:, 0, 2] + m[:, 2, 0]) / (2 * rz),
         (m[:, 1, 2] + m[:, 2, 1]) / (2 * rz), 0.5 * rz], dim=1)

    stacked = torch.stack([q_w, q_x, q_y, q_z], dim=0)  # (4, N, 4)
    q = stacked[best, torch.arange(m.shape[0])]
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


@dataclass
class SplatSet:
    """Flat array of 2D Gaussian splats in world space.

    Frames are stored as quaternions; column 1 of the rotation matrix is the
    face normal while the splats are block-bound.
    """

    centers: torch.Tensor  # (N, 3)
    quats: torch.Tensor  # (N, 4)
    scale2: torch.Tensor  # (N,)
    scale3: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,)
    sh: torch.Tensor  # (N, K, 3)
    block_id: torch.Tensor  # (N,) int64

    def __len__(self) -> int:
        return self.centers.shape[0]

    def frames(self) -> torch.Tensor:
        return sq_core.batch_quat_to_matrix(self.quats)

    @staticmethod
    def concatenate(parts: list["SplatSet"]) -> "SplatSet":
        if not parts:
            k = 1
            empty = lambda *s: torch.empty(*s, dtype=_DTYPE)
            return SplatSet(empty(0, 3), empty(0, 4), empty(0), empty(0), empty(0),
                            empty(0, k, 3), torch.empty(0, dtype=torch.int64))
        cat = lambda attr: torch.cat([getattr(p, attr) for p in parts])
        return SplatSet(cat("centers"), cat("quats"), cat("scale2"), cat("scale3"),
                        cat("opacity"), cat("sh"), cat("block_id"))


def _eps_to_raw(eps: float) -> float:
    t = (eps - EPS_MIN) / (EPS_MAX - EPS_MIN)
    t = min(max(t, 1e-6), 1 - 1e-6)
    return math.log(t / (1 - t))


class Block(torch.nn.Module):
    """One superquadric block with its learnable parameters and fixed
    barycentric splat placement."""

    def __init__(self, level: int, gaussians_per_face: int, sh_degree: int,
                 eps=(1.0, 1.0), scales=(0.2, 0.2, 0.2), quat=(1.0, 0, 0, 0),
                 trans=(0.0, 0, 0), tau: float = 0.5, bary_seed: int = 0):
        super().__init__()
        self.level = level
        self.gaussians_per_face = gaussians_per_face
        self.sh_degree = sh_degree
        self.alive = True

        n_faces = 20 * 4 ** level
        n_splats = n_faces * gaussians_per_face
        k = (sh_degree + 1) ** 2

        self.eps_raw = torch.nn.Parameter(torch.tensor(
            [_eps_to_raw(eps[0]), _eps_to_raw(eps[1])], dtype=_DTYPE))
        self.log_scale = torch.nn.Parameter(torch.log(torch.as_tensor(scales, dtype=_DTYPE)))
        self.quat = torch.nn.Parameter(torch.as_tensor(quat, dtype=_DTYPE))
        self.trans = torch.nn.Parameter(torch.as_tensor(trans, dtype=_DTYPE))
        self.opacity_logit = torch.nn.Parameter(torch.tensor(
            math.log(tau / (1 - tau)), dtype=_DTYPE))
        self.sh = torch.nn.Parameter(torch.zeros(n_splats, k, 3, dtype=_DTYPE))

        bary = sample_barycentric(n_splats, bary_seed).reshape(n_faces, gaussians_per_face, 3)
        self.register_buffer("bary", bary)

        verts, faces = sq_core.icosphere(level)
        self._faces = faces
        angles = torch.from_numpy(sq_core.sphere_angles(verts))
        self.register_buffer("angles", angles)

    # --- derived, differentiable views of the free variables ---

    def eps(self) -> torch.Tensor:
        return EPS_MIN + (EPS_MAX - EPS_MIN) * torch.sigmoid(self.eps_raw)

    def shape(self) -> SqShape:
        e = self.eps()
        s = torch.exp(self.log_scale)
        return SqShape(e[0], e[1], s[0], s[1], s[2])

    def pose(self) -> Pose:
        return Pose(self.quat / torch.linalg.norm(self.quat), self.trans)

    def tau(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    # --- geometry ---

    def world_vertices(self) -> torch.Tensor:
        shape = self.shape()
        local = sq_core.sq_vertex(self.angles[:, 0], self.angles[:, 1], shape)
        r = sq_core.quat_to_matrix(self.quat)
        return local @ r.T + self.trans

    def mesh(self) -> sq_core.SqMesh:
        return sq_core.SqMesh(self.world_vertices(), self._faces, self.angles)

    def signed_distance(self, p: torch.Tensor) -> torch.Tensor:
        return sq_core.signed_distance(p, self.shape(), self.pose())

    def soft_occupancy(self, p: torch.Tensor, gamma: float) -> torch.Tensor:
        return soft_occupancy(p, self, gamma)

    def attach(self, c: float, block_id: int) -> SplatSet:
        return attach(self, c, block_id)


def soft_occupancy(p, block: Block, gamma: float) -> torch.Tensor:
    """tau * sigmoid(-D(p) / gamma): differentiable interior indicator in (0, tau)."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    d = block.signed_distance(torch.as_tensor(p, dtype=_DTYPE))
    return block.tau() * torch.sigmoid(-d / gamma)


def attach(block: Block, c: float, block_id: int) -> SplatSet:
    """Bind gaussians_per_face splats to every face of the block's surface.

    Barycentric coordinates are the block's fixed per-face set, so the splats
    track the deforming surface across iterations.  All splats share the
    block opacity tau.
    """
    verts = block.world_vertices()
    faces = block._faces
    v1, v2, v3 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    rot, s2, s3 = face_frames(v1, v2, v3, c)  # (F,3,3), (F,), (F,)

    g = block.gaussians_per_face
    tri = torch.stack([v1, v2, v3], dim=1)  # (F, 3, 3)
    centers = torch.einsum("fgk,fkd->fgd", block.bary, tri).reshape(-1, 3)

    quats = batch_matrix_to_quat(rot)  # (F, 4)
    quats = quats.repeat_interleave(g, dim=0)
    scale2 = s2.repeat_interleave(g)
    scale3 = s3.repeat_interleave(g)
    n = centers.shape[0]
    opacity = block.tau().expand(n)
    ids = torch.full((n,), block_id, dtype=torch.int64)
    return SplatSet(centers, quats, scale2, scale3, opacity, block.sh, ids)


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    w_cov: float = 10.0
    w_over: float = 1.0
    w_par: float = 0.002
    w_opa: float = 0.01
    w_enter: float = 1.0
    w_scale: float = 1.0
    w_mask: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class HybridScene:
    """Ordered block set plus shared loss weights and scene bounds."""

    blocks: list[Block]
    loss_weights: LossWeights
    bbox: np.ndarray  # (2, 3) min/max corners
    c: float = 0.1
    gamma: float = 0.005

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)

    def alive_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.alive]

    def alive_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.alive]

    def n_alive(self) -> int:
        return len(self.alive_blocks())

    @property
    def bbox_diag(self) -> float:
        return float(np.linalg.norm(self.bbox[1] - self.bbox[0]))

    def attach_all(self) -> SplatSet:
        parts = [self.blocks[i].attach(self.c, i) for i in self.alive_indices()]
        return SplatSet.concatenate(parts)

    def signed_distances(self, p: torch.Tensor) -> torch.Tensor:
        """(B_alive, ...) stack of per-block signed distances at points p."""
        return torch.stack([b.signed_distance(p) for b in self.alive_blocks()])

    def occupancies(self, p: torch.Tensor) -> torch.Tensor:
        """(B_alive, ...) stack of soft occupancies at points p."""
        return torch.stack([b.soft_occupancy(p, self.gamma) for b in self.alive_blocks()])

    def parameters(self):
        for b in self.alive_blocks():
            yield from b.parameters()
