"""Time the numba kernels against their numpy twins on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Each kernel is run once before timing so JIT compilation is excluded. With
--end-to-end, one short training epoch is also timed under both backends
(each in a subprocess, since the backend is fixed at import time).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from polfuse import _kernels as K


def cases(rng):
    x = rng.standard_normal((100, 32, 13, 13)).astype(np.float32)  # one batch, middle BSFE layer
    cols = K.im2col_numpy(x, 3)
    a = rng.standard_normal((100, 16, 13, 13)).astype(np.float32)
    c = rng.standard_normal((100, 16, 13, 13)).astype(np.float32)
    g = rng.standard_normal((100, 256, 13, 13)).astype(np.float32)
    n = 1200
    deg = rng.integers(1, 20, n)
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    indices = rng.integers(0, n, indptr[-1]).astype(np.int64)
    h = rng.standard_normal((n, 96)).astype(np.float32)
    sim = rng.standard_normal((n, n))
    truth, pred = rng.integers(0, 5, 40000), rng.integers(0, 5, 40000)
    return {
        "im2col 100x32x13x13 k3": ("im2col", (x, 3)),
        "col2im 100x32x13x13 k3": ("col2im", (cols, x.shape, 3)),
        "outer_channels 16x16": ("outer_channels", (a, c)),
        "outer_channels_grad 16x16": ("outer_channels_grad", (g, a, c)),
        "neighbor_mean n=1200": ("neighbor_mean", (h, indptr, indices)),
        "neighbor_mean_grad n=1200": ("neighbor_mean_grad", (h, indptr, indices)),
        "topk_rows n=1200 k=10": ("topk_rows", (sim, 10)),
        "confusion_counts 40000": ("confusion_counts", (truth, pred, 5)),
    }


def best_of(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


EPOCH_SNIPPET = """
import time
from polfuse import data as D, train as TR, _kernels as K
cube = D.generate_synthetic_scene(height=80, width=80)
cfg = TR.TrainConfig(epochs=1, per_class_count=10, bsfe_channels=(16, 32, 16), grid_rows=8, grid_cols=8)
split = D.chessboard_partition(80, 80, 8, 8)
TR.train(cube, split, "black", cfg)  # warm-up, includes JIT compilation
t0 = time.perf_counter()
TR.train(cube, split, "black", cfg)
print(K.BACKEND, time.perf_counter() - t0)
"""


def end_to_end():
    out = {}
    for flag in ("1", "0"):
        env = {**os.environ, "POLFUSE_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, seconds = res.stdout.split()
        out[backend] = float(seconds)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<28}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for label, (name, fargs) in cases(np.random.default_rng(0)).items():
        t_np = best_of(getattr(K, f"{name}_numpy"), fargs, args.repeat)
        t_nb = best_of(getattr(K, f"{name}_numba"), fargs, args.repeat)
        print(f"{label:<28}{1e3 * t_np:>11.2f}{1e3 * t_nb:>11.2f}{t_np / t_nb:>8.2f}x")

    if args.end_to_end:
        t = end_to_end()
        print(f"\none training epoch: numpy {t['numpy']:.2f}s  numba {t['numba']:.2f}s  "
              f"speedup {t['numpy'] / t['numba']:.2f}x")


if __name__ == "__main__":
    main()
