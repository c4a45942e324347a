"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case checks that both backends return identical bytes before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from edgeunlearn import kernels


def cases(rng):
    for m, k, n in [(64, 16, 128), (64, 128, 128), (256, 256, 64), (1024, 72, 8)]:
        a = rng.standard_normal((m, k)).astype(np.float32)
        b = rng.standard_normal((k, n)).astype(np.float32)
        yield f"gemm {m}x{k}x{n}", lambda be, a=a, b=b: be.gemm_f32(a, b)
    for rows, cols in [(64, 2048), (13, 16384)]:
        g = rng.standard_normal((rows, cols)).astype(np.float32)

        def sq(be, g=g, cols=cols):
            acc = np.zeros(cols)
            be.square_accumulate(acc, g)
            return acc
        yield f"square_accumulate {rows}x{cols}", sq
    for size in (4096, 36864, 262144):
        theta = rng.standard_normal(size).astype(np.float32)
        d = rng.exponential(1, size).astype(np.float32)
        f = (d * rng.exponential(8, size)).astype(np.float32)

        def damp(be, theta=theta, f=f, d=d, size=size):
            t = theta.copy()
            betas = np.zeros(size, np.float32)
            mask = np.asarray(be.dampen_f32(t, f, d, np.float32(10), np.float32(1), betas)).astype(bool)
            return t, mask, betas
        yield f"dampen {size}", damp


def same(x, y):
    if isinstance(x, tuple):
        return all(same(a, b) for a, b in zip(x, y))
    return np.asarray(x).tobytes() == np.asarray(y).tobytes()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    py, cc = kernels.python_backend, kernels.compiled_backend
    if cc is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    print(f"{'case':<28}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}  identical")
    for name, fn in cases(np.random.default_rng(0)):
        ok = same(fn(py), fn(cc))
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cc = min(timeit.repeat(lambda: fn(cc), number=1, repeat=args.repeat)) * 1e3
        rows.append({"case": name, "python_ms": t_py, "compiled_ms": t_cc, "speedup": t_py / t_cc, "identical": ok})
        print(f"{name:<28}{t_py:>12.3f}{t_cc:>14.3f}{t_py / t_cc:>9.1f}x  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["identical"] for r in rows) else 2


if __name__ == "__main__":
    sys.exit(main())
