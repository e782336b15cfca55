"""Superquadric geometry kernel.

Parametric surface evaluation, inside-outside / signed-distance fields,
icosphere-topology tessellation and local<->world rigid transforms.  All
functions are pure and operate on float64 torch tensors so they can sit
inside an autograd graph; plain floats / numpy arrays are accepted and
converted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS_MIN = 0.1
EPS_MAX = 1.9

# |base| floor before fractional powers; keeps gradients finite on the
# coordinate planes.
_POW_FLOOR = 1e-8

_DTYPE = torch.float64


def _t(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=_DTYPE)


@dataclass(frozen=True)
class SqShape:
    """Shape exponents and axis scales of one superquadric.

    eps1/eps2 must lie in [EPS_MIN, EPS_MAX]; s1..s3 are strictly positive
    axis extents in scene units.
    """

    eps1: torch.Tensor
    eps2: torch.Tensor
    s1: torch.Tensor
    s2: torch.Tensor
    s3: torch.Tensor

    @staticmethod
    def create(eps1, eps2, s1, s2, s3) -> "SqShape":
        shape = SqShape(_t(eps1), _t(eps2), _t(s1), _t(s2), _t(s3))
        shape.validate()
        return shape

    def validate(self) -> None:
        for e in (self.eps1, self.eps2):
            v = float(e)
            if not (EPS_MIN - 1e-9 <= v <= EPS_MAX + 1e-9):
                raise ValueError(f"shape exponent {v} outside [{EPS_MIN}, {EPS_MAX}]")
        for s in (self.s1, self.s2, self.s3):
            if float(s) <= 0.0:
                raise ValueError("axis scales must be > 0")

    @property
    def scales(self) -> torch.Tensor:
        return torch.stack([_t(self.s1), _t(self.s2), _t(self.s3)])


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (w, x, y, z) + translation."""

    quat: torch.Tensor
    trans: torch.Tensor

    @staticmethod
    def identity() -> "Pose":
        return Pose(torch.tensor([1.0, 0, 0, 0], dtype=_DTYPE), torch.zeros(3, dtype=_DTYPE))

    @staticmethod
    def create(quat, trans) -> "Pose":
        q = _t(quat)
        if abs(float(torch.linalg.norm(q)) - 1.0) > 1e-6:
            raise ValueError("quaternion must be unit norm")
        return Pose(q, _t(trans))

    def rotation(self) -> torch.Tensor:
        return quat_to_matrix(self.quat)


@dataclass
class SqMesh:
    """Tessellated superquadric: vertices + faces + the (theta, phi) pair
    each vertex came from, retained so the same topology can be re-evaluated
    when the shape parameters change."""

    vertices: torch.Tensor  # (V, 3)
    faces: np.ndarray  # (F, 3) int64
    angular_coords: torch.Tensor  # (V, 2) = (theta, phi)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrix from a (w, x, y, z) quaternion, normalized first."""
    q = q / torch.linalg.norm(q)
    w, x, y, z = q[0], q[1], q[2], q[3]
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)])
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)])
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)])
    return torch.stack([row0, row1, row2])


def matrix_to_quat(m: torch.Tensor) -> torch.Tensor:
    """(w, x, y, z) quaternion of a rotation matrix (Shepperd's method,
    branch chosen by the largest diagonal combination)."""
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if float(t) > 0:
        r = torch.sqrt(1 + t)
        w = 0.5 * r
        x = (m[2, 1] - m[1, 2]) / (2 * r)
        y = (m[0, 2] - m[2, 0]) / (2 * r)
        z = (m[1, 0] - m[0, 1]) / (2 * r)
    elif float(m[0, 0]) >= float(m[1, 1]) and float(m[0, 0]) >= float(m[2, 2]):
        r = torch.sqrt(1 + m[0, 0] - m[1, 1] - m[2, 2])
        x = 0.5 * r
        w = (m[2, 1] - m[1, 2]) / (2 * r)
        y = (m[0, 1] + m[1, 0]) / (2 * r)
        z = (m[0, 2] + m[2, 0]) / (2 * r)
    elif float(m[1, 1]) >= float(m[2, 2]):
        r = torch.sqrt(1 - m[0, 0] + m[1, 1] - m[2, 2])
        y = 0.5 * r
        w = (m[0, 2] - m[2, 0]) / (2 * r)
        x = (m[0, 1] + m[1, 0]) / (2 * r)
        z = (m[1, 2] + m[2, 1]) / (2 * r)
    else:
        r = torch.sqrt(1 - m[0, 0] - m[1, 1] + m[2, 2])
        z = 0.5 * r
        w = (m[1, 0] - m[0, 1]) / (2 * r)
        x = (m[0, 2] + m[2, 0]) / (2 * r)
        y = (m[1, 2] + m[2, 1]) / (2 * r)
    return torch.stack([w, x, y, z])


def batch_quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions -> (N, 3, 3) rotation matrices."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return m.reshape(-1, 3, 3)


def spow(x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Signed power sign(x) * |x|**e with the |x| floor applied.

    This is the standard superquadric convention: it keeps the surface real
    for negative cosine/sine bases and the gradient finite at zero crossings.
    """
    return torch.sign(x) * torch.clamp(torch.abs(x), min=_POW_FLOOR) ** e


def sq_vertex(theta, phi, shape: SqShape) -> torch.Tensor:
    """Surface point of a superquadric at azimuth/elevation angles.

    theta in [-pi/2, pi/2], phi in (-pi, pi].  Broadcasts over leading
    dimensions; returns (..., 3).
    """
    theta = _t(theta)
    phi = _t(phi)
    ct = spow(torch.cos(theta), shape.eps1)
    st = spow(torch.sin(theta), shape.eps1)
    cp = spow(torch.cos(phi), shape.eps2)
    sp = spow(torch.sin(phi), shape.eps2)
    return torch.stack([shape.s1 * ct * cp, shape.s2 * st, shape.s3 * ct * sp], dim=-1)


def inside_outside(p, shape: SqShape) -> torch.Tensor:
    """Inside-outside field: < 1 inside, = 1 on the surface, > 1 outside.

    The y axis carries the theta exponent (2/eps1), matching the vertex
    parametrization; x and z carry 2/eps2.
    """
    p = _t(p)
    ax = torch.clamp(torch.abs(p[..., 0] / shape.s1), min=_POW_FLOOR)
    ay = torch.clamp(torch.abs(p[..., 1] / shape.s2), min=_POW_FLOOR)
    az = torch.clamp(torch.abs(p[..., 2] / shape.s3), min=_POW_FLOOR)
    inner = ax ** (2.0 / shape.eps2) + az ** (2.0 / shape.eps2)
    return inner ** (shape.eps2 / shape.eps1) + ay ** (2.0 / shape.eps1)


def signed_distance(p, shape: SqShape, pose: Pose) -> torch.Tensor:
    """Approximate signed distance Psi(pose^-1 p) - 1 for world-frame points."""
    p = _t(p)
    r = pose.rotation()
    local = (p - pose.trans) @ r  # R^T (p - t)
    return inside_outside(local, shape) - 1.0


# ---------------------------------------------------------------------------
# Icosphere topology


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return verts, faces


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere by midpoint subdivision: level L has 20*4^L faces."""
    if not 0 <= level <= 4:
        raise ValueError("icosphere level must be in [0, 4]")
    verts, faces = _icosahedron()
    for _ in range(level):
        verts_list = [v for v in verts]
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key in cache:
                return cache[key]
            m = verts_list[a] + verts_list[b]
            m /= np.linalg.norm(m)
            verts_list.append(m)
            cache[key] = len(verts_list) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def sphere_angles(verts: np.ndarray) -> np.ndarray:
    """(theta, phi) per unit-sphere vertex: theta = asin(y), phi = atan2(z, x)."""
    theta = np.arcsin(np.clip(verts[:, 1], -1.0, 1.0))
    phi = np.arctan2(verts[:, 2], verts[:, 0])
    return np.stack([theta, phi], axis=1)


def tessellate(shape: SqShape, level: int = 2) -> SqMesh:
    """Map a level-L icosphere onto the superquadric surface.

    The icosphere connectivity is kept; every vertex's (theta, phi) is pushed
    through sq_vertex.  Level 2 gives 162 vertices / 320 faces.
    """
    verts, faces = icosphere(level)
    angles = torch.from_numpy(sphere_angles(verts))
    vertices = sq_vertex(angles[:, 0], angles[:, 1], shape)
    return SqMesh(vertices=vertices, faces=faces, angular_coords=angles)


def reevaluate(mesh: SqMesh, shape: SqShape) -> torch.Tensor:
    """Vertex positions for a (possibly updated) shape on mesh topology."""
    a = mesh.angular_coords
    return sq_vertex(a[:, 0], a[:, 1], shape)


def to_world(mesh: SqMesh, pose: Pose) -> SqMesh:
    """Apply v -> R v + t to every vertex; topology unchanged."""
    r = pose.rotation()
    verts = mesh.vertices @ r.T + pose.trans
    return SqMesh(vertices=verts, faces=mesh.faces, angular_coords=mesh.angular_coords)
