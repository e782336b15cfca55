"""Compare the numba and pure-numpy rasterizer backends.

Runs the same forward + backward compositing workload through both kernel
implementations and reports wall-clock timings and the maximum deviation
between their outputs.  Backend selection for library users goes through the
SQSPLAT_BACKEND environment variable; here we import both modules directly.

Usage: python benchmarks/benchmark_backends.py [--size 128] [--splats 2000]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sqsplat.kernels import binning, cpu_numba, cpu_numpy


def make_workload(n_splats: int, size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    mean2d = rng.uniform(0, size, (n_splats, 2))
    # random SPD conics with footprints of a few pixels
    a = rng.uniform(0.05, 0.4, n_splats)
    c = rng.uniform(0.05, 0.4, n_splats)
    b = rng.uniform(-0.5, 0.5, n_splats) * np.sqrt(a * c)
    conic = np.stack([a, b, c], axis=1)
    color = rng.random((n_splats, 3))
    alpha = rng.uniform(0.2, 0.95, n_splats)
    depth = rng.uniform(1.0, 5.0, n_splats)
    # 5-sigma radii from the conic eigenvalues
    det = a * c - b * b
    tr = 0.5 * (a + c)
    lam_min = tr - np.sqrt(np.maximum(tr * tr - det, 0))
    radius = binning.RADIUS_SIGMAS / np.sqrt(np.maximum(lam_min, 1e-12))
    return mean2d, conic, color, alpha, depth, radius


def run(backend, args, reps: int) -> tuple[dict, float, float]:
    mean2d, conic, color, alpha, depth, radius = args
    size = int(np.ceil(mean2d.max())) + 1
    tile_splats, tile_offsets, ntx, nty = binning.bin_splats(
        mean2d, radius, depth, size, size)
    fwd_args = (tile_splats, tile_offsets, ntx, nty, mean2d, conic, color,
                alpha, depth, size, size)
    rgb, acc, dep = backend.forward(*fwd_args)
    d_rgb = np.ones_like(rgb)
    d_acc = np.ones_like(acc)
    bwd_args = fwd_args + (d_rgb, d_acc)
    backend.backward(*bwd_args)  # warm-up (numba JIT)

    t0 = time.perf_counter()
    for _ in range(reps):
        rgb, acc, dep = backend.forward(*fwd_args)
    t_fwd = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        grads = backend.backward(*bwd_args)
    t_bwd = (time.perf_counter() - t0) / reps
    return {"rgb": rgb, "acc": acc, "grads": grads}, t_fwd, t_bwd


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--splats", type=int, default=2000)
    p.add_argument("--reps", type=int, default=5)
    opts = p.parse_args()

    args = make_workload(opts.splats, opts.size)
    out_nb, fwd_nb, bwd_nb = run(cpu_numba, args, opts.reps)
    out_np, fwd_np, bwd_np = run(cpu_numpy, args, opts.reps)

    diff_rgb = np.abs(out_nb["rgb"] - out_np["rgb"]).max()
    diff_grad = max(np.abs(a - b).max()
                    for a, b in zip(out_nb["grads"], out_np["grads"]))

    print(f"workload: {opts.splats} splats, {opts.size}x{opts.size} px, "
          f"{opts.reps} reps")
    print(f"{'backend':<8} {'forward':>12} {'backward':>12}")
    for name, f, b in [("numba", fwd_nb, bwd_nb), ("numpy", fwd_np, bwd_np)]:
        print(f"{name:<8} {f * 1e3:>10.2f}ms {b * 1e3:>10.2f}ms")
    print(f"speedup: forward {fwd_np / fwd_nb:.1f}x, backward {bwd_np / bwd_nb:.1f}x")
    print(f"max |rgb diff| = {diff_rgb:.3e}, max |grad diff| = {diff_grad:.3e}")


if __name__ == "__main__":
    main()
