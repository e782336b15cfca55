import numpy as np
import pytest
import torch

from sqsplat.hybrid import Block, HybridScene, LossWeights
from sqsplat.render import Camera

UNIT_BBOX = np.array([[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]])


def axis_camera(distance: float = 2.0, resolution: int = 32,
                focal: float = 40.0) -> Camera:
    """Camera at (0, 0, distance) looking down -z at the origin."""
    w2c = np.eye(4)
    w2c[2, 3] = -distance
    return Camera(fx=focal, fy=focal, cx=resolution / 2, cy=resolution / 2,
                  width=resolution, height=resolution, world_to_cam=w2c)


def make_block(scales=(0.2, 0.2, 0.2), trans=(0.0, 0, 0), eps=(1.0, 1.0),
               quat=(1.0, 0, 0, 0), tau=0.5, level=1, gaussians_per_face=2,
               sh_degree=0, seed=0) -> Block:
    return Block(level=level, gaussians_per_face=gaussians_per_face,
                 sh_degree=sh_degree, eps=eps, scales=scales, quat=quat,
                 trans=trans, tau=tau, bary_seed=seed)


def make_scene(blocks, bbox=UNIT_BBOX, **kw) -> HybridScene:
    return HybridScene(blocks=blocks, loss_weights=LossWeights(), bbox=bbox, **kw)


def unit_sphere_block(tau=0.5, **kw) -> Block:
    return make_block(scales=(1.0, 1.0, 1.0), tau=tau, **kw)


@pytest.fixture
def camera():
    return axis_camera()


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
