"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the reference texture net (16 base channels, 32x32 inputs,
batch 32).  Each kernel is warmed up once so JIT compilation is excluded.
"""

import argparse
import timeit

import numpy as np

from scoredd import _kernels as K


def cases(rng):
    x = rng.standard_normal((16, 32, 32, 32)).astype(np.float32)
    cols = K.numpy_impl.im2col(x)
    act = rng.standard_normal((32, 64, 16, 16)).astype(np.float32)
    s = 1.0 / (1.0 + np.exp(-act))
    m = rng.uniform(0, 1, (8, 8))
    return {
        "im2col 16x32x32x32": ("im2col", (x,)),
        "col2im 16x32x32x32": ("col2im", (cols, 16, 32, 32, 32)),
        "silu 32x64x16x16": ("silu", (act,)),
        "silu_backward 32x64x16x16": ("silu_backward", (act, act, s)),
        "bilinear 8x8 -> 32x32": ("bilinear_resize", (m, 32, 32)),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    if K.numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, (name, call_args) in cases(np.random.default_rng(0)).items():
        row = []
        for impl in (K.numpy_impl, K.numba_impl):
            fn = getattr(impl, name)
            fn(*call_args)
            row.append(min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat)) * 1e3)
        print(f"{label:28s} {row[0]:10.3f} {row[1]:10.3f} {row[0] / row[1]:8.2f}")


if __name__ == "__main__":
    main()
