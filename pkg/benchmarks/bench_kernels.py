"""Timing comparison of the numpy and numba kernel lanes.

Per-kernel microbenchmarks run both lanes in one process (the lane
dictionaries are always importable; only the wrappers bind at import
time). The full-step comparison spawns one subprocess per lane with
SPLITGRAD_BACKEND set, which is how a user would switch lanes.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--rows N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from splitgrad import kernels


def best_ms(fn, repeats):
    fn()  # warmup; first numba call compiles
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return min(times)


def kernel_workloads(rows):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, 64))
    w = rng.normal(size=(64, 32))
    a = rng.normal(size=(rows, 16))
    b = rng.normal(size=(rows, 16))
    logits = rng.normal(size=(rows, rows))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    g = rng.normal(size=(rows, rows))
    idx = rng.integers(0, 64, size=rows)
    small = rng.normal(size=(rows, 64))
    y = np.tanh(small)
    adam_args = lambda: (
        rng.normal(size=(64, 32)), np.zeros((64, 32)), np.zeros((64, 32)),
        rng.normal(size=(64, 32)), 1e-3, 0.9, 0.999, 1e-8, 3,
    )
    return {
        "matmul": lambda impl: impl(x, w),
        "pair_scores": lambda impl: impl(a, b),
        "row_softmax": lambda impl: impl(logits),
        "row_softmax_vjp": lambda impl: impl(p, g),
        "scatter_add_rows": lambda impl: impl(np.zeros((64, 64)), idx, small),
        "relu_vjp": lambda impl: impl(small, y),
        "tanh_vjp": lambda impl: impl(y, small),
        "adam_update": lambda impl: impl(*adam_args()),
    }


def bench_kernels(repeats, rows):
    if not kernels.NUMBA_IMPLS:
        print("numba lane unavailable; nothing to compare")
        return
    workloads = kernel_workloads(rows)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'ratio':>7}")
    for name, call in workloads.items():
        t_np = best_ms(lambda: call(kernels.NUMPY_IMPLS[name]), repeats)
        t_nb = best_ms(lambda: call(kernels.NUMBA_IMPLS[name]), repeats)
        ratio = t_np / t_nb if t_nb > 0 else float("inf")
        print(f"{name:<18} {t_np:>10.4f} {t_nb:>10.4f} {ratio:>6.2f}x")


_STEP_SNIPPET = """
import time
import numpy as np
from splitgrad import encoders, kernels, trainer
from splitgrad.loss import aligned_batch

rng = np.random.default_rng(0)
batch = aligned_batch(rng.normal(size=(256, 24)), rng.normal(size=(256, 24)))
pf = encoders.init_params(1, [24, 32, 16])
pg = encoders.init_params(2, [24, 32, 16])
cfg = trainer.TrainConfig(1.0, 16, 16)

opt = encoders.init_optimizer("adam", 1e-3)
trainer.train_step_cached(batch, pf, pg, opt, cfg)  # warmup / compile
times = []
for _ in range({repeats}):
    t0 = time.perf_counter()
    trainer.train_step_cached(batch, pf, pg, opt, cfg)
    times.append((time.perf_counter() - t0) * 1e3)
print(f"{{kernels.active_backend()}} cached step (batch 256, sub 16): "
      f"{{min(times):.2f}} ms")
"""


def bench_full_step(repeats):
    for backend in ("numpy", "numba"):
        env = dict(os.environ, SPLITGRAD_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, "-c", _STEP_SNIPPET.format(repeats=repeats)],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode != 0:
            print(f"{backend}: failed\n{proc.stderr.strip()}")
        else:
            print(proc.stdout.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--rows", type=int, default=256)
    args = parser.parse_args()
    bench_kernels(args.repeats, args.rows)
    print()
    bench_full_step(args.repeats)


if __name__ == "__main__":
    main()
