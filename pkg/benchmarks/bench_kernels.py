"""Compiled vs numpy grid kernels: forward (with tangents) and backward.

Run with ``python benchmarks/bench_kernels.py``; prints one line per case.
"""

import argparse
import timeit

import numpy as np

from hnfd import _kernels_py

try:
    from hnfd import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

CASES = [
    ("dense 2D res 64", 2, 64, 64 * 64, False),
    ("dense 3D res 64", 3, 64, 64**3, False),
    ("hash 3D res 128", 3, 128, 2**14, True),
]


def bench(mod, x, table, res, hashed, repeat):
    fwd = lambda: mod.level_forward(x, table, res, hashed, True)  # noqa: E731
    feats, dfeats, idx, w, dw = fwd()
    g = np.ones_like(feats)
    gd = np.ones_like(dfeats)
    out = np.zeros_like(table)
    bwd = lambda: mod.level_backward(idx, w, dw, g, gd, out)  # noqa: E731
    tf = min(timeit.repeat(fwd, number=1, repeat=repeat))
    tb = min(timeit.repeat(bwd, number=1, repeat=repeat))
    return tf, tb


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=65536)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':18s} {'backend':9s} {'forward ms':>11s} {'backward ms':>12s}")
    for name, m, res, rows, hashed in CASES:
        x = rng.uniform(-1, 1, size=(args.batch, m))
        table = rng.standard_normal((rows, 2))
        results = [("python", bench(_kernels_py, x, table, res, hashed, args.repeat))]
        if _compiled is not None:
            results.append(("compiled", bench(_compiled, x, table, res, hashed, args.repeat)))
        for backend, (tf, tb) in results:
            print(f"{name:18s} {backend:9s} {tf * 1e3:11.2f} {tb * 1e3:12.2f}")
        if len(results) == 2:
            sf = results[0][1][0] / results[1][1][0]
            sb = results[0][1][1] / results[1][1][1]
            print(f"{'':18s} {'speedup':9s} {sf:10.1f}x {sb:11.1f}x")


if __name__ == "__main__":
    main()
