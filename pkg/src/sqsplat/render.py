"""Differentiable CPU splatting: projection, SH color, tile compositing.

The compositing inner loop runs in a compiled kernel (see
``sqsplat.kernels``); it is wrapped in a torch autograd Function with a
hand-derived backward, so the full image is differentiable w.r.t. every
upstream parameter through the projection / color graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .hybrid import SplatSet

_DTYPE = torch.float64

Z_NEAR = 0.01

# real SH basis constants (degree 0..3)
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


@dataclass
class Camera:
    """Pinhole camera: focal lengths / principal point in pixels and a 4x4
    row-major world-to-camera transform.  The camera looks down -z with y up."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be > 0")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass
class RenderedImage:
    rgb: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor | None = None  # (H, W), forward-only

    def numpy_rgb(self) -> np.ndarray:
        return self.rgb.detach().numpy()


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """View-dependent RGB from SH coefficients (N, K, 3) and unit directions.

    Follows the splatting convention: result = basis . coeffs + 0.5, clamped
    to >= 0.
    """
    res = _C0 * sh[:, 0]
    if degree >= 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        res = res - _C1 * y * sh[:, 1] + _C1 * z * sh[:, 2] - _C1 * x * sh[:, 3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        res = (res + _C2[0] * xy * sh[:, 4] + _C2[1] * yz * sh[:, 5]
               + _C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
               + _C2[3] * xz * sh[:, 7] + _C2[4] * (xx - yy) * sh[:, 8])
    if degree >= 3:
        res = (res + _C3[0] * y * (3 * xx - yy) * sh[:, 9]
               + _C3[1] * xy * z * sh[:, 10]
               + _C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
               + _C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
               + _C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
               + _C3[5] * z * (xx - yy) * sh[:, 14]
               + _C3[6] * x * (xx - 3 * yy) * sh[:, 15])
    return torch.clamp(res + 0.5, min=0.0)


def project(splats: SplatSet, cam: Camera, z_near: float = Z_NEAR):
    """Project splats to screen space.

    Returns None when everything is culled, else a dict with differentiable
    mean2d / conic / color / alpha and detached depth + bounding radius.
    Splats behind the near plane are culled; a 0.3 px^2 low-pass floor is
    added to the projected covariance diagonal.
    """
    if len(splats) == 0:
        return None
    w_rot = torch.as_tensor(cam.rotation, dtype=_DTYPE)
    w_t = torch.as_tensor(cam.translation, dtype=_DTYPE)

    p_cam = splats.centers @ w_rot.T + w_t
    depth = -p_cam[:, 2]
    keep = depth > z_near
    if not bool(keep.any()):
        return None
    idx = torch.nonzero(keep).squeeze(1)

    p = p_cam[idx]
    d = depth[idx]
    x, y = p[:, 0], p[:, 1]
    u = cam.cx + cam.fx * x / d
    v = cam.cy - cam.fy * y / d
    mean2d = torch.stack([u, v], dim=1)

    frames = splats.frames()[idx]  # (M, 3, 3), columns r1 r2 r3
    a2 = frames[:, :, 1] * splats.scale2[idx].unsqueeze(1)
    a3 = frames[:, :, 2] * splats.scale3[idx].unsqueeze(1)
    cov3 = a2.unsqueeze(2) * a2.unsqueeze(1) + a3.unsqueeze(2) * a3.unsqueeze(1)
    cov_cam = w_rot @ cov3 @ w_rot.T

    zero = torch.zeros_like(d)
    j_row0 = torch.stack([cam.fx / d, zero, cam.fx * x / d ** 2], dim=1)
    j_row1 = torch.stack([zero, -cam.fy / d, -cam.fy * y / d ** 2], dim=1)
    jac = torch.stack([j_row0, j_row1], dim=1)  # (M, 2, 3)
    cov2 = jac @ cov_cam @ jac.transpose(1, 2)
    eye = torch.eye(2, dtype=_DTYPE) * kernels.LOWPASS
    cov2 = cov2 + eye

    ca, cb, cc = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = ca * cc - cb * cb
    conic = torch.stack([cc / det, -cb / det, ca / det], dim=1)

    cam_pos = torch.as_tensor(cam.position, dtype=_DTYPE)
    view = splats.centers[idx] - cam_pos
    view = view / torch.clamp(torch.linalg.norm(view, dim=1, keepdim=True), min=1e-12)
    k = splats.sh.shape[1]
    degree = int(round(np.sqrt(k))) - 1
    color = eval_sh(splats.sh[idx], view, degree)

    with torch.no_grad():
        mid = (ca + cc) / 2
        disc = torch.sqrt(torch.clamp(((ca - cc) / 2) ** 2 + cb * cb, min=0.0))
        radius = kernels.RADIUS_SIGMAS * torch.sqrt(mid + disc)

    return {
        "mean2d": mean2d,
        "conic": conic,
        "color": color,
        "alpha": splats.opacity[idx],
        "depth": d.detach().numpy(),
        "radius": radius.numpy(),
        "keep": idx.numpy(),
    }


class _RasterizeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, color, alpha, bins, depth_np, height, width):
        arrs = (mean2d.detach().numpy(), conic.detach().numpy(),
                color.detach().numpy(), alpha.detach().numpy())
        tile_splats, tile_offsets, ntx, nty = bins
        rgb, acc, depth_acc = kernels.forward(
            tile_splats, tile_offsets, ntx, nty, *arrs, depth_np, height, width)
        ctx.saved = (arrs, bins, depth_np, height, width)
        out_depth = torch.from_numpy(depth_acc)
        ctx.mark_non_differentiable(out_depth)
        return torch.from_numpy(rgb), torch.from_numpy(acc), out_depth

    @staticmethod
    def backward(ctx, g_rgb, g_alpha, _g_depth):
        arrs, bins, depth_np, height, width = ctx.saved
        tile_splats, tile_offsets, ntx, nty = bins
        if g_rgb is None:
            g_rgb_np = np.zeros((height, width, 3))
        else:
            g_rgb_np = np.ascontiguousarray(g_rgb.detach().numpy())
        if g_alpha is None:
            g_alpha_np = np.zeros((height, width))
        else:
            g_alpha_np = np.ascontiguousarray(g_alpha.detach().numpy())
        g_mean, g_conic, g_color, g_base = kernels.backward(
            tile_splats, tile_offsets, ntx, nty, *arrs, depth_np, height, width,
            g_rgb_np, g_alpha_np)
        return (torch.from_numpy(g_mean), torch.from_numpy(g_conic),
                torch.from_numpy(g_color), torch.from_numpy(g_base),
                None, None, None, None)


def _empty_image(cam: Camera) -> RenderedImage:
    h, w = cam.height, cam.width
    return RenderedImage(rgb=torch.zeros(h, w, 3, dtype=_DTYPE),
                         alpha=torch.zeros(h, w, dtype=_DTYPE),
                         depth=torch.zeros(h, w, dtype=_DTYPE))


def rasterize(splats: SplatSet, cam: Camera, z_near: float = Z_NEAR) -> RenderedImage:
    """Render a splat set over an opaque black background."""
    proj = project(splats, cam, z_near)
    if proj is None:
        return _empty_image(cam)
    bins = kernels.bin_splats(proj["mean2d"].detach().numpy(), proj["radius"],
                              proj["depth"], cam.height, cam.width)
    rgb, acc, depth_acc = _RasterizeFn.apply(
        proj["mean2d"], proj["conic"], proj["color"], proj["alpha"],
        bins, proj["depth"], cam.height, cam.width)
    with torch.no_grad():
        depth = depth_acc / torch.clamp(acc.detach(), min=1e-12)
    return RenderedImage(rgb=rgb, alpha=acc, depth=depth)


def render_scene(scene, cam: Camera) -> RenderedImage:
    return rasterize(scene.attach_all(), cam)


def render_with_gradients(scene, cam: Camera, loss_adjoint) -> dict:
    """Gradients of <adjoint, rendered rgb> w.r.t. every block parameter.

    Keys are (block_index, parameter_name); parameters that do not influence
    the image (e.g. fully culled blocks) map to zero gradients.
    """
    adj = torch.as_tensor(loss_adjoint, dtype=_DTYPE)
    img = render_scene(scene, cam)
    loss = (img.rgb * adj).sum()
    names, params = [], []
    for i in scene.alive_indices():
        for name, p in scene.blocks[i].named_parameters():
            names.append((i, name))
            params.append(p)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {key: (g if g is not None else torch.zeros_like(p))
            for key, p, g in zip(names, params, grads)}
