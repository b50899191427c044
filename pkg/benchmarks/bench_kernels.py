"""Compare the compiled and numpy stencil kernels on training-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--batch B] [--grid N]
"""
import argparse
import timeit

import numpy as np

from pbfm.kernels import REPLICATE, get_backend


def cases(B, N, C):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((B, C, N, N))
    cols = rng.standard_normal((C * 9, B * N * N))
    K = np.exp(rng.standard_normal((B, N, N)))
    p = rng.standard_normal((B, N, N))
    g = rng.standard_normal((B, N, N))
    h = 1.0 / N
    return {
        "im2col3x3": lambda m: m.im2col3x3(x, REPLICATE),
        "col2im3x3": lambda m: m.col2im3x3(cols, B, C, N, N, REPLICATE),
        "darcy_apply": lambda m: m.darcy_apply(K, p, h),
        "darcy_vjp": lambda m: m.darcy_vjp(K, p, g, h),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--grid", type=int, default=32)
    ap.add_argument("--channels", type=int, default=24)
    args = ap.parse_args(argv)
    py = get_backend("numpy")
    try:
        cy = get_backend("cython")
    except ImportError:
        cy = None
        print("compiled kernels not built; timing numpy only")
    print(f"{'kernel':<12} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases(args.batch, args.grid, args.channels).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<12} {t_py:>10.3f}")
            continue
        a, b = fn(py), fn(cy)
        a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
        assert all(np.allclose(u, v, rtol=1e-12, atol=1e-12) for u, v in zip(a, b)), name
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<12} {t_py:>10.3f} {t_cy:>10.3f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
