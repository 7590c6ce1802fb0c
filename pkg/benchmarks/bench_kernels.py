"""Benchmark the compiled conv3d core against the numpy fallback.

Runs the three kernel entry points (forward, grad wrt input, grad wrt
weight) on shapes taken from the codec and velocity networks, then prints
per-case medians and the speedup.  Both backends are imported directly so
the comparison happens in one process.
"""

import argparse
import statistics
import time

import numpy as np

from flowct.kernels import numpy_backend

try:
    from flowct.kernels import _core
except ImportError:
    _core = None


# (name, x shape, w shape, stride, padding), channels-first
CASES = [
    ("codec_enc_32", (8, 32, 32, 32), (16, 8, 3, 3, 3), (2, 2, 2), (1, 1, 1)),
    ("vel_level0_8", (16, 8, 8, 8), (16, 16, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("vel_down_8", (16, 8, 8, 8), (32, 16, 3, 3, 3), (2, 2, 2), (1, 1, 1)),
    ("vel_level0_16", (16, 16, 16, 8), (16, 16, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
]


def _median_ms(fn, repeats):
    fn()  # warm up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


def bench_case(name, x_shape, w_shape, stride, padding, repeats, rng):
    x = rng.standard_normal(x_shape).astype(np.float32)
    w = rng.standard_normal(w_shape).astype(np.float32)
    out = numpy_backend.conv3d_forward(x, w, stride, padding)
    g = rng.standard_normal(out.shape).astype(np.float32)

    rows = []
    ops = [
        ("forward", lambda b: b.conv3d_forward(x, w, stride, padding)),
        ("grad_input", lambda b: b.conv3d_grad_input(w, g, x.shape, stride, padding)),
        ("grad_weight", lambda b: b.conv3d_grad_weight(x, g, w.shape, stride, padding)),
    ]
    for op_name, call in ops:
        ref = call(numpy_backend)
        t_np = _median_ms(lambda: call(numpy_backend), repeats)
        if _core is None:
            rows.append((f"{name}.{op_name}", t_np, None, None, None))
            continue
        got = call(_core)
        diff = float(np.max(np.abs(got.astype(np.float64) - ref.astype(np.float64))))
        t_cy = _median_ms(lambda: call(_core), repeats)
        rows.append((f"{name}.{op_name}", t_np, t_cy, t_np / t_cy, diff))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timed runs per case (median reported)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _core is None:
        print("compiled core not available; timing numpy backend only")
    rng = np.random.default_rng(args.seed)
    header = f"{'case':<28} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    for case in CASES:
        for name, t_np, t_cy, speedup, diff in bench_case(*case, args.repeats, rng):
            if t_cy is None:
                print(f"{name:<28} {t_np:>10.2f} {'-':>10} {'-':>8} {'-':>10}")
            else:
                print(f"{name:<28} {t_np:>10.2f} {t_cy:>10.2f} {speedup:>7.1f}x {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
