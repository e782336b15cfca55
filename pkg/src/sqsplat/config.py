"""Run configuration: flat TOML keys named after the published
hyperparameters, with CLI-overridable defaults."""

from __future__ import annotations

import dataclasses

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class RunConfig:
    # block schedule
    m_init: int = 8
    m_max: int = 16
    iters_block: int = 30_000
    iters_point: int = 30_000
    add_iters: list[int] = field(default_factory=lambda: [5000, 10000])
    prune_tau: float = 0.1

    # representation
    level: int = 2
    gaussians_per_face: int = 4
    sh_degree: int = 2
    c: float = 0.1

    # losses
    gamma: float = 0.005
    k_overlap: float = 1.95
    lambda_ssim: float = 0.2
    lambda_cov: float = 10.0
    lambda_over: float = 1.0
    lambda_par: float = 0.002
    lambda_opa: float = 0.01
    lambda_enter: float = 1.0
    lambda_scale: float = 1.0
    lambda_mask: float = 1.0
    s_max_frac: float = 0.02  # of scene bbox diagonal

    # sampling
    rays_per_view: int = 512
    samples_per_ray: int = 64
    overlap_points: int = 1024
    enter_samples: int = 4096

    # optimizer
    lr_translation: float = 1.6e-3
    lr_rotation: float = 1e-3
    lr_shape: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_center: float = 1e-3

    # clustering for block adds
    dbscan_eps_frac: float = 0.04  # of scene bbox diagonal
    dbscan_min_pts: int = 10

    # run control
    seed: int = 0
    checkpoint_every: int = 5000
    z_near: float = 0.01
    threads: int = 0  # 0 = hardware default

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.prune_tau < 1:
            raise ValueError("prune_tau must be in (0, 1)")
        if self.iters_block < 0 or self.iters_point < 0:
            raise ValueError("iteration budgets must be >= 0")
        # add iterations past iters_block simply never fire
        for a in self.add_iters:
            if a < 0:
                raise ValueError("add_iters must be non-negative")
        if not 0 <= self.level <= 4:
            raise ValueError("level must be in [0, 4]")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")
        if self.gamma <= 0 or self.c <= 0:
            raise ValueError("gamma and c must be > 0")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        data = tomllib.loads(Path(path).read_text())
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def dump_config(cfg: RunConfig) -> str:
    """Flat TOML that load_config reads back to an identical RunConfig."""
    lines = [f"{f.name} = {_toml_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"
