"""Timing comparison of the compiled and numpy kernel backends."""

import argparse
import time

import numpy as np

from latseg import _kernels
from latseg._kernels import numpy_impl


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(impl, n, c, f, side, k, repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, c, side, side))
    w = rng.normal(size=(f, c, k, k))
    b = rng.normal(size=f)
    dy = rng.normal(size=(n, f, side, side))
    fwd = _time(lambda: impl.conv2d_forward(x, w, b, k // 2), repeats)
    bwd = _time(lambda: impl.conv2d_backward(x, w, dy, k // 2), repeats)
    return fwd, bwd


def bench_labeling(impl, side, repeats):
    rng = np.random.default_rng(1)
    masks = [(rng.random((side, side)) > 0.55).astype(np.uint8) for _ in range(50)]

    def run():
        for m in masks:
            impl.label_components(m)

    return _time(run, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--sides", default="16,32,64")
    args = ap.parse_args()

    impls = [numpy_impl]
    if "cython" in _kernels.available_backends():
        from latseg._kernels import _cyimpl

        impls.append(_cyimpl)
    else:
        print("note: compiled backend unavailable, timing numpy only")

    sides = [int(s) for s in args.sides.split(",")]
    print(f"{'kernel':<26} {'side':>5} " + " ".join(f"{i.NAME:>12}" for i in impls))
    for side in sides:
        rows = [bench_conv(i, 8, 8, 16, side, 3, args.repeats) for i in impls]
        print(f"{'conv2d forward (ms)':<26} {side:>5} "
              + " ".join(f"{fwd * 1e3:>12.2f}" for fwd, _ in rows))
        print(f"{'conv2d backward (ms)':<26} {side:>5} "
              + " ".join(f"{bwd * 1e3:>12.2f}" for _, bwd in rows))
    for side in sides:
        times = [bench_labeling(i, side, args.repeats) for i in impls]
        print(f"{'labeling x50 (ms)':<26} {side:>5} "
              + " ".join(f"{t * 1e3:>12.2f}" for t in times))


if __name__ == "__main__":
    main()
