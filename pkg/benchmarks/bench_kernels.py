"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import importlib
import time

import numpy as np


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    from seqvo import _kernels_py

    x = rng.standard_normal((4, 16, 34, 106)).astype(np.float32)
    cols = _kernels_py.im2col(x, 3, 1)
    src = rng.random((18, 3, 32, 104)).astype(np.float32)
    n = 32 * 104
    xs = rng.uniform(-1, 104, (18, n)).astype(np.float32)
    ys = rng.uniform(-1, 32, (18, n)).astype(np.float32)
    g = rng.standard_normal((18, 3, n)).astype(np.float32)
    return {
        "im2col 4x16x34x106 k3": lambda k: k.im2col(x, 3, 1),
        "col2im 4x16x34x106 k3": lambda k: k.col2im(cols, x.shape, 3, 1),
        "bilinear_forward 18x3x32x104": lambda k: k.bilinear_forward(src, xs, ys),
        "bilinear_backward 18x3x32x104": lambda k: k.bilinear_backward(src, xs, ys, g, True),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {}
    for name, mod in (("python", "seqvo._kernels_py"), ("cython", "seqvo._kernels")):
        try:
            backends[name] = importlib.import_module(mod)
        except ImportError:
            print(f"{name} backend not available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} " + " ".join(f"{b:>10s}" for b in backends) + "    speedup")
    for label, fn in cases(rng).items():
        times = {b: _time(lambda: fn(k), args.repeat) for b, k in backends.items()}
        row = " ".join(f"{times[b] * 1e3:8.2f}ms" for b in backends)
        speed = f"{times['python'] / times['cython']:8.1f}x" if len(times) == 2 else ""
        print(f"{label:34s} {row} {speed}")


if __name__ == "__main__":
    main()
