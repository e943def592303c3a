"""Compare the compiled and pure-numpy convolution backends.

Times forward + input-grad + weight-grad on every conv shape the networks
actually use at desk scale, then one full content-stage training step per
backend.  Run:  python benchmarks/bench_kernels.py
"""

import tempfile
import time

import numpy as np

from gwainet import kernels
from gwainet.networks import init_model, preset
from gwainet.synthdata import SynthDataset, build_dataset
from gwainet.training import StageConfig, run_stage

# (input shape, weight shape, stride, padding, label)
SHAPES = [
    ((4, 6, 64, 64), (16, 6, 3, 3), 1, 1, "wnet head 64px"),
    ((4, 16, 64, 64), (16, 16, 3, 3), 1, 1, "trunk 3x3 64px"),
    ((4, 16, 64, 64), (16, 16, 3, 3), 2, 1, "downscale s2 64px"),
    ((4, 16, 8, 8), (16, 16, 3, 3), 1, 1, "residual 8px"),
    ((4, 16, 32, 32), (64, 16, 3, 3), 1, 1, "upscale 32px"),
    ((4, 3, 64, 64), (16, 3, 5, 5), 2, 2, "critic 5x5 entry"),
    ((4, 64, 8, 8), (128, 64, 5, 5), 2, 2, "critic 5x5 deep"),
    ((16, 16, 64, 64), (16, 16, 3, 3), 1, 1, "inet early (b16)"),
    ((16, 128, 8, 8), (128, 128, 3, 3), 1, 1, "inet late (b16)"),
]

WARMUP = 3
REPS = 10


def bench_shape(backend, xs, ws, stride, pad):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(xs).astype(np.float32)
    w = rng.standard_normal(ws).astype(np.float32)
    ho = (xs[2] + 2 * pad - ws[2]) // stride + 1
    wo = (xs[3] + 2 * pad - ws[3]) // stride + 1
    g = rng.standard_normal((xs[0], ws[0], ho, wo)).astype(np.float32)
    kernels.set_backend(backend)

    def once():
        kernels.conv2d_forward(x, w, stride, pad)
        kernels.conv2d_input_grad(g, w, x.shape, stride, pad)
        kernels.conv2d_weight_grad(g, x, w.shape, stride, pad)

    for _ in range(WARMUP):
        once()
    t0 = time.perf_counter()
    for _ in range(REPS):
        once()
    return (time.perf_counter() - t0) / REPS


def bench_training_step(backend, dataset):
    kernels.set_backend(backend)
    bundle = init_model(preset("desk"), seed=1)
    warm = StageConfig(stage="content", steps=2, batch_size=4, seed=7)
    run_stage(bundle, dataset, warm)
    timed = StageConfig(stage="content", steps=8, batch_size=4, seed=8)
    t0 = time.perf_counter()
    run_stage(bundle, dataset, timed)
    return (time.perf_counter() - t0) / 8


def main():
    backends = kernels.available_backends()
    print(f"backends built: {backends}\n")
    header = f"{'conv shape':<24}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for xs, ws, stride, pad, label in SHAPES:
        times = {b: bench_shape(b, xs, ws, stride, pad) for b in backends}
        row = f"{label:<24}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{max(times.values()) / min(times.values()):>9.2f}x"
        print(row)

    print("\nfull content-stage training step (desk preset, batch 4):")
    with tempfile.TemporaryDirectory() as td:
        build_dataset(4, 4, 64, seed=5, out_dir=td)
        dataset = SynthDataset.load(td)
        for b in backends:
            dt = bench_training_step(b, dataset)
            print(f"  {b:<8} {dt * 1e3:8.1f} ms/step")
    kernels.set_backend("auto")
    print(f"\ndefault backend (auto): {kernels.backend_name()}")


if __name__ == "__main__":
    main()
