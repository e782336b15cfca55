"""Dataset loading, synthetic-scene generation and exporters.

Disk formats: cameras.json + 8-bit PNG images/masks for datasets, OBJ +
scene.json for block meshes, binary little-endian PLY for splats.  Pixel
values map to [0, 1] as v/255 with no gamma transform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import sq_core
from .hybrid import Block, HybridScene, SplatSet
from .render import Camera, RenderedImage, rasterize

_DTYPE = torch.float64

UNIT_BBOX = np.array([[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]])


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[np.ndarray]  # (H, W, 3) float in [0, 1]
    masks: list[np.ndarray]  # (H, W) float in {0, 1}
    bbox: np.ndarray
    name: str = ""
    test_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.cameras)
        if not (len(self.images) == len(self.masks) == n):
            raise DatasetError("camera/image/mask counts differ")
        for cam, img, mask in zip(self.cameras, self.images, self.masks):
            if img.shape[:2] != (cam.height, cam.width) or mask.shape != (cam.height, cam.width):
                raise DatasetError("image dimensions inconsistent with camera")
            if not np.isfinite(img).all():
                raise DatasetError("non-finite pixel values")
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def train_indices(self) -> list[int]:
        test = set(self.test_indices)
        return [i for i in range(len(self)) if i not in test]


@dataclass
class SyntheticTruth:
    primitives: list[dict]
    points: np.ndarray  # (N, 3) surface samples
    labels: np.ndarray  # (N,) part index


def _camera_from_json(entry: dict) -> Camera:
    return Camera(fx=float(entry["fx"]), fy=float(entry["fy"]),
                  cx=float(entry["cx"]), cy=float(entry["cy"]),
                  width=int(entry["width"]), height=int(entry["height"]),
                  world_to_cam=np.array(entry["w2c"], dtype=np.float64))


def _camera_to_json(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "w2c": cam.world_to_cam.tolist()}


def load_dataset(path) -> Dataset:
    """Load cameras.json + images/*.png + masks/*.png from a directory."""
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"missing {cam_file}")
    try:
        meta = json.loads(cam_file.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed cameras.json: {e}") from e

    cams = [_camera_from_json(c) for c in meta["cameras"]]
    img_files = sorted((root / "images").glob("*.png"))
    mask_files = sorted((root / "masks").glob("*.png"))
    if len(img_files) != len(cams) or len(mask_files) != len(cams):
        raise DatasetError(
            f"count mismatch: {len(cams)} cameras, {len(img_files)} images, "
            f"{len(mask_files)} masks")

    images, masks = [], []
    for f in img_files:
        arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0
        images.append(arr)
    for f in mask_files:
        arr = np.asarray(Image.open(f).convert("L"), dtype=np.float64)
        masks.append((arr >= 128).astype(np.float64))

    bbox = np.array(meta["bbox"], dtype=np.float64) if "bbox" in meta else UNIT_BBOX.copy()
    test = list(meta.get("split", {}).get("test", []))
    return Dataset(cameras=cams, images=images, masks=masks, bbox=bbox,
                   name=root.name, test_indices=test)


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    meta = {"cameras": [_camera_to_json(c) for c in ds.cameras],
            "bbox": ds.bbox.tolist()}
    if ds.test_indices:
        meta["split"] = {"test": ds.test_indices}
    (root / "cameras.json").write_text(json.dumps(meta))
    for i, (img, mask) in enumerate(zip(ds.images, ds.masks)):
        save_image_array(img, root / "images" / f"{i:04d}.png")
        save_image_array(mask, root / "masks" / f"{i:04d}.png")


# ---------------------------------------------------------------------------
# synthetic scenes


def _look_at(pos: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    """4x4 world-to-camera for a camera at pos looking at target (-z forward,
    y up, right-handed)."""
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    z_c = -fwd
    x_c = np.cross(up, z_c)
    n = np.linalg.norm(x_c)
    if n < 1e-8:  # looking straight along up: pick another up vector
        up = np.array([1.0, 0.0, 0.0])
        x_c = np.cross(up, z_c)
        n = np.linalg.norm(x_c)
    x_c /= n
    y_c = np.cross(z_c, x_c)
    rot = np.stack([x_c, y_c, z_c])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ pos
    return w2c


def sphere_cameras(n_views: int, resolution: int, radius: float = 2.5,
                   focal_scale: float = 1.3) -> list[Camera]:
    """Cameras on a Fibonacci sphere, all looking at the origin."""
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n_views):
        y = 1.0 - 2.0 * (i + 0.5) / n_views
        r = np.sqrt(max(0.0, 1.0 - y * y))
        ang = golden * i
        pos = radius * np.array([r * np.cos(ang), y, r * np.sin(ang)])
        w2c = _look_at(pos, np.zeros(3), np.array([0.0, 1.0, 0.0]))
        f = focal_scale * resolution
        cams.append(Camera(fx=f, fy=f, cx=resolution / 2, cy=resolution / 2,
                           width=resolution, height=resolution, world_to_cam=w2c))
    return cams


def _truth_blocks(primitives: list[dict], gaussians_per_face: int, c: float,
                  level: int, seed: int) -> list[Block]:
    blocks = []
    c0 = 0.28209479177387814
    for i, prim in enumerate(primitives):
        b = Block(level=level, gaussians_per_face=gaussians_per_face, sh_degree=0,
                  eps=(prim.get("eps1", 1.0), prim.get("eps2", 1.0)),
                  scales=tuple(prim.get("scales", (0.2, 0.2, 0.2))),
                  quat=tuple(prim.get("quat", (1.0, 0, 0, 0))),
                  trans=tuple(prim.get("trans", (0.0, 0, 0))),
                  tau=0.995, bary_seed=seed + 17 * i)
        color = np.asarray(prim.get("color", (0.8, 0.8, 0.8)), dtype=np.float64)
        with torch.no_grad():
            b.sh[:, 0, :] = torch.as_tensor((color - 0.5) / c0, dtype=_DTYPE)
        blocks.append(b)
    return blocks


def sample_truth_points(primitives: list[dict], n_points: int, seed: int):
    """Area-weighted surface samples across all primitives with part labels."""
    rng = np.random.default_rng(seed)
    meshes = []
    for prim in primitives:
        shape = sq_core.SqShape.create(prim.get("eps1", 1.0), prim.get("eps2", 1.0),
                                       *prim.get("scales", (0.2, 0.2, 0.2)))
        pose = sq_core.Pose.create(prim.get("quat", (1.0, 0, 0, 0)),
                                   prim.get("trans", (0.0, 0, 0)))
        mesh = sq_core.to_world(sq_core.tessellate(shape, 2), pose)
        meshes.append(mesh)

    tri_list, label_list = [], []
    for label, mesh in enumerate(meshes):
        v = mesh.vertices.detach().numpy()
        tri_list.append(v[mesh.faces])  # (F, 3, 3)
        label_list.append(np.full(len(mesh.faces), label))
    tris = np.concatenate(tri_list)
    tri_labels = np.concatenate(label_list)
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    prob = areas / areas.sum()
    face_idx = rng.choice(len(tris), size=n_points, p=prob)
    r = rng.random((n_points, 2))
    u = np.sqrt(r[:, 0])
    v = r[:, 1]
    bary = np.stack([1 - u, u * (1 - v), u * v], axis=1)
    pts = np.einsum("nk,nkd->nd", bary, tris[face_idx])
    return pts, tri_labels[face_idx]


def make_synthetic(primitives: list[dict], n_views: int, resolution: int, seed: int,
                   n_truth_points: int = 100_000, gaussians_per_face: int = 12,
                   c: float = 0.35, bbox: np.ndarray | None = None):
    """Render a ground-truth primitive arrangement into a Dataset + truth.

    Images come from this package's own rasterizer with densely attached
    flat-color splats; masks are accumulated alpha > 0.5.
    """
    bbox = UNIT_BBOX.copy() if bbox is None else np.asarray(bbox, dtype=np.float64)
    blocks = _truth_blocks(primitives, gaussians_per_face, c, level=2, seed=seed)
    cams = sphere_cameras(n_views, resolution)

    with torch.no_grad():
        parts = [b.attach(c, i) for i, b in enumerate(blocks)]
        splats = SplatSet.concatenate(parts)
        images, masks = [], []
        for cam in cams:
            img = rasterize(splats, cam)
            rgb = np.clip(img.rgb.numpy(), 0.0, 1.0)
            # quantize like the PNG round trip so in-memory and reloaded
            # datasets are identical
            rgb = np.floor(rgb * 255.0 + 0.5) / 255.0
            images.append(rgb)
            masks.append((img.alpha.numpy() > 0.5).astype(np.float64))

    pts, labels = sample_truth_points(primitives, n_truth_points, seed + 1)
    ds = Dataset(cameras=cams, images=images, masks=masks, bbox=bbox, name="synthetic")
    truth = SyntheticTruth(primitives=primitives, points=pts, labels=labels)
    return ds, truth


# ---------------------------------------------------------------------------
# exporters


def save_image_array(img, path) -> None:
    """8-bit PNG with round-half-up quantization of [0,1] values."""
    arr = np.asarray(img, dtype=np.float64)
    if isinstance(img, torch.Tensor):
        arr = img.detach().numpy()
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q).save(path)


def save_image(img: RenderedImage, path) -> None:
    save_image_array(img.rgb, path)


def export_blocks(scene: HybridScene, path) -> list[Path]:
    """One world-frame OBJ per alive block plus scene.json with parameters."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for i in scene.alive_indices():
        b = scene.blocks[i]
        verts = b.world_vertices().detach().numpy()
        lines = [f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for v in verts]
        lines += [f"f {f[0]+1} {f[1]+1} {f[2]+1}" for f in b._faces]
        obj = root / f"block_{i}.obj"
        obj.write_text("\n".join(lines) + "\n")
        written.append(obj)
        eps = b.eps().detach().numpy()
        entries.append({
            "id": i,
            "eps1": float(eps[0]),
            "eps2": float(eps[1]),
            "s": torch.exp(b.log_scale).detach().numpy().tolist(),
            "quaternion": (b.quat / torch.linalg.norm(b.quat)).detach().numpy().tolist(),
            "t": b.trans.detach().numpy().tolist(),
            "tau": float(b.tau().detach()),
        })
    sj = root / "scene.json"
    sj.write_text(json.dumps({"blocks": entries}, indent=1))
    written.append(sj)
    return written


def load_scene_json(path) -> list[dict]:
    return json.loads(Path(path).read_text())["blocks"]


_PLY_HEADER = """ply
format binary_little_endian 1.0
comment sqsplat splats: position, frame quaternion (w x y z), tangent extents,
comment opacity, owning block id, flattened SH coefficients (K x rgb)
element vertex {n}
property float x
property float y
property float z
property float qw
property float qx
property float qy
property float qz
property float scale2
property float scale3
property float opacity
property int block_id
{sh_props}end_header
"""


def export_splats(splats: SplatSet, path) -> None:
    """Binary little-endian PLY, one vertex element per splat."""
    n = len(splats)
    k3 = splats.sh.shape[1] * 3
    sh_props = "".join(f"property float sh_{i}\n" for i in range(k3))
    header = _PLY_HEADER.format(n=n, sh_props=sh_props)
    to32 = lambda t: t.detach().numpy().astype("<f4")
    body = np.concatenate([
        to32(splats.centers).reshape(n, 3) if n else np.zeros((0, 3), "<f4"),
        to32(splats.quats).reshape(n, 4) if n else np.zeros((0, 4), "<f4"),
        to32(splats.scale2).reshape(n, 1) if n else np.zeros((0, 1), "<f4"),
        to32(splats.scale3).reshape(n, 1) if n else np.zeros((0, 1), "<f4"),
        to32(splats.opacity).reshape(n, 1) if n else np.zeros((0, 1), "<f4"),
        splats.block_id.numpy().astype("<i4").view("<f4").reshape(n, 1)
        if n else np.zeros((0, 1), "<f4"),
        to32(splats.sh).reshape(n, k3) if n else np.zeros((0, k3), "<f4"),
    ], axis=1) if n else np.zeros((0, 11 + k3), "<f4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(body.tobytes())


def load_splats(path) -> SplatSet:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii")
    n = 0
    n_sh = 0
    for line in header.splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.startswith("property float sh_"):
            n_sh += 1
    k = n_sh // 3
    width = 11 + n_sh
    body = np.frombuffer(data[end:], dtype="<f4").reshape(n, width)
    t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=_DTYPE)
    return SplatSet(
        centers=t(body[:, 0:3]),
        quats=t(body[:, 3:7]),
        scale2=t(body[:, 7]),
        scale3=t(body[:, 8]),
        opacity=t(body[:, 9]),
        sh=t(body[:, 11:].reshape(n, k, 3)),
        block_id=torch.as_tensor(
            np.ascontiguousarray(body[:, 10:11]).view("<i4").ravel().astype(np.int64)),
    )
