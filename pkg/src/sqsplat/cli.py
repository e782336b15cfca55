"""Command-line entry point: fit / refine / render / eval / synth.

Progress goes to stderr; machine-readable results (metrics JSON, per-step
loss records) go to stdout or files under the run's output directory.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import metrics, optimize, render, scene_io
from .config import RunConfig, dump_config, load_config


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


def _apply_threads(cfg: RunConfig) -> None:
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)


def _progress(label: str, every: int = 100):
    def cb(it, rec):
        if it % every == 0:
            click.echo(f"[{label}] iter {it} total {rec['total']:.5f} "
                       f"parts {rec['parts']}", err=True)
    return cb


def _write_report(report: optimize.FitReport, path: Path) -> None:
    with open(path, "w") as f:
        for rec in report.records:
            ordered = {"iter": rec["iter"], "ren": rec["ren"], "cov": rec["cov"],
                       "over": rec["over"], "par": rec["par"], "opa": rec["opa"],
                       "enter": rec["enter"], "scale": rec["scale"],
                       "mask": rec["mask"], "total": rec["total"]}
            f.write(json.dumps(ordered) + "\n")


config_options = [
    click.option("--config", "-c", "config_path", type=click.Path(exists=True),
                 default=None, help="TOML config file"),
    click.option("--iters-block", type=int, default=None),
    click.option("--iters-point", type=int, default=None),
    click.option("--m-init", type=int, default=None),
    click.option("--lambda-par", type=float, default=None),
    click.option("--gaussians-per-face", type=int, default=None),
    click.option("--level", type=int, default=None),
    click.option("--seed", type=int, default=None),
    click.option("--threads", type=int, default=None),
]


def with_config_options(fn):
    for opt in reversed(config_options):
        fn = opt(fn)
    return fn


def _build_config(config_path, **overrides) -> RunConfig:
    return load_config(config_path, overrides)


@click.group()
def main():
    """Reconstruct objects from calibrated multi-view images as textured
    superquadric blocks with surface-bound Gaussian splats."""


@main.command("fit")
@click.argument("dataset_path", type=click.Path())
@click.option("--out", "-o", "out_dir", type=click.Path(), required=True)
@click.option("--stage", type=click.Choice(["block", "point", "both"]), default="block")
@click.option("--dump-config", "dump_cfg", is_flag=True,
              help="print effective config TOML and exit")
@with_config_options
def cmd_fit(dataset_path, out_dir, stage, dump_cfg=False, config_path=None,
            **overrides):
    """Run the two-stage fit on a dataset directory."""
    try:
        cfg = _build_config(config_path, **overrides)
    except (ValueError, OSError) as e:
        _fail(str(e))
    if dump_cfg:
        click.echo(dump_config(cfg), nl=False)
        return
    try:
        ds = scene_io.load_dataset(dataset_path)
    except scene_io.DatasetError as e:
        _fail(str(e))
    _apply_threads(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))

    truth_file = Path(dataset_path) / "truth.npz"
    init_points = None
    if truth_file.exists():
        with np.load(truth_file) as z:
            init_points = z["points"]

    scene = optimize.init_scene(cfg, ds.bbox, init_points)
    free = None
    try:
        if stage in ("block", "both"):
            ck = lambda it: optimize.save_checkpoint(
                out / "checkpoint_block.pt", scene, cfg, it, "block")
            report = optimize.block_level_fit(scene, ds, cfg, init_points,
                                              checkpoint_fn=ck,
                                              progress_fn=_progress("block"))
            _write_report(report, out / "report_block.jsonl")
            optimize.save_checkpoint(out / "checkpoint_block.pt", scene, cfg,
                                     cfg.iters_block, "block")
            scene_io.export_blocks(scene, out / "blocks")
        if stage in ("point", "both"):
            free = optimize.decouple(scene)
            ck = lambda it: optimize.save_checkpoint(
                out / "checkpoint_point.pt", scene, cfg, it, "point", free)
            report = optimize.point_level_refine(free, scene, ds, cfg,
                                                 checkpoint_fn=ck,
                                                 progress_fn=_progress("point"))
            _write_report(report, out / "report_point.jsonl")
            optimize.save_checkpoint(out / "checkpoint_point.pt", scene, cfg,
                                     cfg.iters_point, "point", free)
            with torch.no_grad():
                scene_io.export_splats(free.splats(), out / "splats.ply")
    except (optimize.AllBlocksPrunedError, ValueError) as e:
        _fail(str(e))
    click.echo(json.dumps({"status": "ok", "parts": scene.n_alive(),
                           "out": str(out)}))


@main.command("refine")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("dataset_path", type=click.Path())
@click.option("--out", "-o", "out_dir", type=click.Path(), required=True)
@with_config_options
def cmd_refine(checkpoint, dataset_path, out_dir, config_path=None, **overrides):
    """Point-level refinement starting from a block-stage checkpoint."""
    try:
        scene, free, cfg, _, _ = optimize.load_checkpoint(checkpoint)
        ds = scene_io.load_dataset(dataset_path)
    except (ValueError, OSError, scene_io.DatasetError) as e:
        _fail(str(e))
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    _apply_threads(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if free is None:
        free = optimize.decouple(scene)
    report = optimize.point_level_refine(free, scene, ds, cfg,
                                         progress_fn=_progress("point"))
    _write_report(report, out / "report_point.jsonl")
    optimize.save_checkpoint(out / "checkpoint_point.pt", scene, cfg,
                             cfg.iters_point, "point", free)
    with torch.no_grad():
        scene_io.export_splats(free.splats(), out / "splats.ply")
    click.echo(json.dumps({"status": "ok", "parts": scene.n_alive(),
                           "out": str(out)}))


def _scene_splats(scene, free, part: int | None):
    if part is not None:
        if part not in scene.alive_indices():
            raise ValueError(f"part {part} is not an alive block")
    if free is not None:
        splats = free.splats()
        if part is not None:
            keep = (splats.block_id == part).nonzero().squeeze(1)
            from .hybrid import SplatSet
            splats = SplatSet(splats.centers[keep], splats.quats[keep],
                              splats.scale2[keep], splats.scale3[keep],
                              splats.opacity[keep], splats.sh[keep],
                              splats.block_id[keep])
        return splats
    if part is not None:
        return scene.blocks[part].attach(scene.c, part)
    return scene.attach_all()


@main.command("render")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", type=click.Path(), default=None,
              help="take the camera from this dataset")
@click.option("--view", type=int, default=0, help="dataset view index")
@click.option("--camera", "camera_path", type=click.Path(exists=True), default=None,
              help="JSON file with a single camera spec")
@click.option("--part", type=int, default=None, help="render one block in isolation")
@click.option("--out", "-o", "out_png", type=click.Path(), required=True)
def cmd_render(checkpoint, dataset_path, view, camera_path, part, out_png):
    """Render a stored scene from a dataset or explicit camera."""
    try:
        scene, free, cfg, _, _ = optimize.load_checkpoint(checkpoint)
        if camera_path is not None:
            cam = scene_io._camera_from_json(json.loads(Path(camera_path).read_text()))
        elif dataset_path is not None:
            ds = scene_io.load_dataset(dataset_path)
            if not 0 <= view < len(ds):
                raise ValueError(f"view {view} out of range")
            cam = ds.cameras[view]
        else:
            raise ValueError("provide --dataset or --camera")
        with torch.no_grad():
            splats = _scene_splats(scene, free, part)
            img = render.rasterize(splats, cam, cfg.z_near)
        scene_io.save_image(img, out_png)
    except (ValueError, OSError, scene_io.DatasetError) as e:
        _fail(str(e))
    click.echo(json.dumps({"status": "ok", "out": out_png}))


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("dataset_path", type=click.Path())
@click.option("--n-points", type=int, default=20000, help="Chamfer sample size")
def cmd_eval(checkpoint, dataset_path, n_points):
    """PSNR/SSIM on held-out views (train views if no split) and Chamfer
    distance against synthetic truth when available."""
    try:
        scene, free, cfg, _, _ = optimize.load_checkpoint(checkpoint)
        ds = scene_io.load_dataset(dataset_path)
    except (ValueError, OSError, scene_io.DatasetError) as e:
        _fail(str(e))
    views = ds.test_indices or list(range(len(ds)))
    psnrs, ssims = [], []
    with torch.no_grad():
        splats = free.splats() if free is not None else scene.attach_all()
        for v in views:
            img = render.rasterize(splats, ds.cameras[v], cfg.z_near)
            target = ds.images[v] * ds.masks[v][:, :, None]
            rgb = np.clip(img.rgb.numpy(), 0, 1)
            psnrs.append(metrics.psnr(rgb, target))
            ssims.append(metrics.ssim(rgb, target))
    cd = None
    truth_file = Path(dataset_path) / "truth.npz"
    if truth_file.exists():
        with np.load(truth_file) as z:
            truth_pts = z["points"]
        rep = free.splats() if free is not None else scene
        pred = metrics.sample_representation(rep, n_points, seed=cfg.seed,
                                             min_opacity=cfg.prune_tau)
        if len(truth_pts) > n_points:
            rng = np.random.default_rng(cfg.seed)
            truth_pts = truth_pts[rng.choice(len(truth_pts), n_points, replace=False)]
        cd = metrics.chamfer(pred, truth_pts)
    report = metrics.MetricsReport(psnr=float(np.mean(psnrs)),
                                   ssim=float(np.mean(ssims)),
                                   chamfer=cd, part_count=scene.n_alive())
    click.echo(report.to_json())


@main.command("synth")
@click.argument("spec_path", type=click.Path())
@click.option("--out", "-o", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None, help="override the spec seed")
def cmd_synth(spec_path, out_dir, seed):
    """Materialize a synthetic dataset + ground truth from a primitive spec."""
    try:
        spec = json.loads(Path(spec_path).read_text())
        prims = spec["primitives"]
        if not isinstance(prims, list) or not prims:
            raise ValueError("spec must contain a non-empty primitive list")
        ds, truth = scene_io.make_synthetic(
            prims, n_views=int(spec.get("n_views", 20)),
            resolution=int(spec.get("resolution", 64)),
            seed=int(spec["seed"] if seed is None else seed))
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as e:
        _fail(f"invalid synthetic spec: {e}")
    out = Path(out_dir)
    scene_io.save_dataset(ds, out)
    np.savez(out / "truth.npz", points=truth.points, labels=truth.labels)
    (out / "truth_primitives.json").write_text(json.dumps(truth.primitives))
    click.echo(json.dumps({"status": "ok", "views": len(ds), "out": str(out)}))


if __name__ == "__main__":
    main()
