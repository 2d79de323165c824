"""Numba vs numpy timing for the hot kernels.

    python benchmarks/bench_kernels.py [--points 20000] [--beams 400] [--dim 3]

The numba timing excludes the first (compiling) call.
"""
import argparse
import time

import numpy as np

from foamopt import kernels


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--beams", type=int, default=400)
    ap.add_argument("--dim", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, (args.points, args.dim))
    v1 = rng.uniform(0, 1, (args.beams, args.dim))
    v2 = v1 + rng.normal(0, 0.05, v1.shape)
    rb = rng.uniform(0.005, 0.02, args.beams)
    p, scale = 16.0, 0.02

    cases = [
        ("beam_union", lambda: kernels._beam_union_numba(pts, v1, v2, rb, p, scale),
         lambda: kernels._beam_union_numpy(pts, v1, v2, rb, p, scale)),
        ("max_beam_phi", lambda: kernels._max_beam_phi_numba(pts, v1, v2, rb),
         lambda: kernels._max_beam_phi_numpy(pts, v1, v2, rb)),
    ]
    print(f"{args.points} points x {args.beams} beams, dim {args.dim}")
    print(f"{'kernel':<14}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'max diff':>12}")
    for name, fast, slow in cases:
        fast()   # compile
        tf, a = _time(fast, args.repeat)
        ts, b = _time(slow, args.repeat)
        print(f"{name:<14}{tf:>12.4f}{ts:>12.4f}{ts / tf:>10.1f}{np.max(np.abs(a - b)):>12.2e}")


if __name__ == "__main__":
    main()
