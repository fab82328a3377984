"""Time each hot kernel on the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5]

The numba column excludes compilation (one warm-up call first).
"""
import argparse
import time

import numpy as np

from moodkit import _jit, kernels


def cases(rng):
    perm = np.concatenate([rng.permutation(256)] * 2).astype(np.int64)
    xs = np.linspace(0, 16, 256)
    vals = rng.random(64 ** 3)
    hist = rng.integers(0, 1000, 256)
    x = rng.standard_normal((16, 64, 64, 16)).astype(np.float32)
    xpad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = rng.standard_normal((16 * 64 * 64, 9 * 16)).astype(np.float32)
    vol = rng.random((64, 64, 64))
    pts = [rng.uniform(0, 63, 64 ** 3) for _ in range(3)]
    return {
        "simplex2d 256x256": lambda b: kernels.simplex2d(xs, xs, perm, backend=b),
        "bin_counts 64^3 / 4096": lambda b: kernels.bin_counts(vals, 4096, backend=b),
        "otsu_cut 256 levels": lambda b: kernels.otsu_cut(hist, backend=b),
        "im2col3x3 16x64x64x16": lambda b: kernels.im2col3x3(xpad, backend=b),
        "col2im3x3 16x64x64x16": lambda b: kernels.col2im3x3(cols, x.shape, backend=b),
        "trilinear 64^3 points": lambda b: kernels.trilinear_sample(vol, *pts, backend=b),
    }


def best(fn, repeat):
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return min(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    backends = ["numpy"] + (["numba"] if _jit.HAVE_NUMBA else [])
    print(f"{'kernel':26s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = []
        for b in backends:
            fn(b)  # warm-up / jit
            times.append(best(lambda: fn(b), a.repeat))
        row = f"{name:26s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)
    if not _jit.HAVE_NUMBA:
        print("numba disabled (MOODKIT_DISABLE_NUMBA set or numba missing)")


if __name__ == "__main__":
    main()
