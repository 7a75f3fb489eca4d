"""Compare the compiled depthwise-conv kernels against the numpy fallback.

Times the raw kernel entry points on a few representative shapes, then a
full transformer block forward+backward under each backend.  Run:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import statistics
import time

import numpy as np

from demark import _kernels_np, blocks, kernels, ops
from demark.engine import Tape, backward, tensor

try:
    from demark import _gridconv
except ImportError:
    _gridconv = None


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_raw(repeats):
    shapes = [(2, 8, 64, 64), (1, 16, 128, 128), (4, 32, 32, 32)]
    rng = np.random.default_rng(0)
    print(f"{'shape':18s} {'op':16s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for shape in shapes:
        x = rng.standard_normal(shape).astype(np.float32)
        gy = rng.standard_normal(shape).astype(np.float32)
        k = rng.standard_normal((shape[1], 3, 3)).astype(np.float32)
        for label, np_fn, cy_fn in (
            ("dw3x3_forward",
             lambda: _kernels_np.dw3x3_forward(x, k),
             (lambda: _gridconv.dw3x3_forward(x, k)) if _gridconv else None),
            ("dw3x3_bwd_kernel",
             lambda: _kernels_np.dw3x3_backward_kernel(x, gy),
             (lambda: _gridconv.dw3x3_backward_kernel(x, gy)) if _gridconv else None),
        ):
            t_np = median_time(np_fn, repeats)
            if cy_fn is None:
                print(f"{str(shape):18s} {label:16s} {t_np * 1e3:9.2f}ms {'n/a':>10s}")
                continue
            t_cy = median_time(cy_fn, repeats)
            print(f"{str(shape):18s} {label:16s} {t_np * 1e3:9.2f}ms "
                  f"{t_cy * 1e3:9.2f}ms {t_np / t_cy:7.1f}x")


def block_step(params, x):
    with Tape():
        out = ops.mean(blocks.block_forward(x, params))
        backward(out)
    x.zero_grad()


def bench_block(repeats):
    rng = np.random.default_rng(1)
    params = blocks.init_block(rng, c=16, heads=2, gdfn=True, gdfn_dconv=True)
    x = tensor(rng.standard_normal((1, 16, 32, 32)), requires_grad=True)

    results = {}
    # dispatch reads kernels._impl per call, so swapping it switches backend
    saved = kernels._impl
    try:
        for label, impl in (("numpy", _kernels_np), ("cython", _gridconv)):
            if impl is None:
                continue
            kernels._impl = impl
            block_step(params, x)  # warm-up
            results[label] = median_time(lambda: block_step(params, x), repeats)
    finally:
        kernels._impl = saved

    print()
    print("transformer block (c=16, heads=2, 32x32) forward+backward:")
    for label, t in results.items():
        print(f"  {label:7s} {t * 1e3:9.2f}ms")
    if "numpy" in results and "cython" in results:
        print(f"  speedup {results['numpy'] / results['cython']:.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    if _gridconv is None:
        print("compiled extension unavailable; numpy timings only")
    bench_raw(args.repeats)
    bench_block(args.repeats)


if __name__ == "__main__":
    main()
