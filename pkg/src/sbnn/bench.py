"""Benchmark the packed popcount kernels: numba vs pure numpy.

    python -m sbnn.bench [--rows R] [--cols C] [--words W] [--repeat N]

Shapes mirror the inference hot loop: a (rows, words) weight-mask matrix
against a (cols, words) window matrix. Both backends are verified to agree
before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ._kernels import BACKEND, backend_pairs


def _time(fn, a, b, repeat):
    fn(a, b)  # warm-up (JIT compile, cache touch)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(a, b)
        best = min(best, time.perf_counter() - t0)
    return best


def run(rows=256, cols=4096, words=8, repeat=5, out=None):
    rng = np.random.default_rng(0)
    a = rng.integers(0, 1 << 63, size=(rows, words)).astype(np.uint64)
    b = rng.integers(0, 1 << 63, size=(cols, words)).astype(np.uint64)
    pairs = backend_pairs()
    ref = None
    for name, k in pairs:
        got = k["and_popcount_matmat"](a, b)
        if ref is None:
            ref = got
        elif not np.array_equal(got, ref):
            raise AssertionError(f"backend {name} disagrees with reference")
    gops = rows * cols * words * 64 / 1e9  # bit positions per call
    lines = [
        f"and_popcount_matmat {rows}x{words} @ {cols}x{words} "
        f"({gops:.2f} Gbit-positions/call), best of {repeat}:"
    ]
    times = {}
    for name, k in pairs:
        dt = _time(k["and_popcount_matmat"], a, b, repeat)
        times[name] = dt
        lines.append(f"  {name:>6}: {dt * 1e3:8.2f} ms   {gops / dt:8.1f} Gbit/s")
    if "numba" in times and "numpy" in times:
        lines.append(f"  speedup numba/numpy: {times['numpy'] / times['numba']:.2f}x")
    lines.append(f"active backend: {BACKEND} (override with SBNN_BACKEND)")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    return times


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=256)
    ap.add_argument("--cols", type=int, default=4096)
    ap.add_argument("--words", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    run(rows=args.rows, cols=args.cols, words=args.words, repeat=args.repeat, out=args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
