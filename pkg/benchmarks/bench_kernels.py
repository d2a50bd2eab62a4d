"""Compare the compiled kernels with the NumPy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on
identical inputs with both backends; the outputs are checked for agreement
before timing.
"""

import timeit

import numpy as np

from flowrecon import _kernels
from flowrecon.operators import RadonOperator


def _cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 16, 16, 16))
    cols = rng.standard_normal((32, 16 * 9, 16 * 16))
    op = RadonOperator((64, 64), 90, 95)
    img = rng.uniform(size=(4, 64, 64))
    sino = rng.standard_normal((4, 90, 95))
    geo = (op.cos, op.sin, op.det, op.ts, op.step)
    return {
        "im2col 32x16x16x16 k3": lambda k: k.im2col(x, 3, 1),
        "col2im 32x16x16x16 k3": lambda k: k.col2im(cols, x.shape, 3, 1),
        "radon_project 4x64x64, 90 angles": lambda k: k.radon_project(img, *geo),
        "radon_backproject 4x90x95": lambda k: k.radon_backproject(sino, *geo, 64, 64),
        "fbp_backproject 4x90x95": lambda k: k.fbp_backproject(sino, op.cos, op.sin,
                                                                float(op.det[0]), 1.0, 64, 64),
    }


def main(repeat=5):
    if _kernels.compiled is None:
        print("compiled kernels unavailable; only the NumPy fallback is installed")
        return
    print(f"{'kernel':40s} {'numpy [ms]':>11s} {'cython [ms]':>12s} {'speed-up':>9s}")
    for name, fn in _cases().items():
        a, b = fn(_kernels.fallback), fn(_kernels.compiled)
        if not np.allclose(a, b, rtol=1e-10, atol=1e-10):
            raise AssertionError(f"{name}: backends disagree")
        t_np = min(timeit.repeat(lambda: fn(_kernels.fallback), number=1, repeat=repeat))
        t_cy = min(timeit.repeat(lambda: fn(_kernels.compiled), number=1, repeat=repeat))
        print(f"{name:40s} {1e3 * t_np:11.2f} {1e3 * t_cy:12.2f} {t_np / t_cy:8.1f}x")


if __name__ == "__main__":
    main()
