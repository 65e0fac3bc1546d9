"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py                # kernel timings
    python3 benchmarks/bench_kernels.py --e2e          # plus a short training run per backend

Shapes mirror the simulator's hot path: a (batch x d) activation times a
(d x d) weight, the transposed product used for weight gradients, and the
column sums used for bias gradients.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from inclusivefl import kernels

E2E = (
    "import time; from inclusivefl.config import ExperimentConfig; from inclusivefl.harness import run_training; "
    "from inclusivefl import kernels; t=time.perf_counter(); "
    "run_training(ExperimentConfig(rounds={rounds}, clients=30, sample_fraction=0.5, width={width}, batch_size=32)); "
    "print(kernels.BACKEND, time.perf_counter()-t)"
)


def best_of(fn, repeat: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_kernels(sizes, repeat: int, number: int):
    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'cython us':>12}{'numpy us':>12}{'speedup':>10}  bits")
    for batch, d in sizes:
        a = rng.standard_normal((batch, d))
        w = rng.standard_normal((d, d))
        g = rng.standard_normal((batch, d))
        cases = {
            f"matmul {batch}x{d} @ {d}x{d}": lambda be: be.matmul(a, w),
            f"matmul {d}x{batch} @ {batch}x{d}": lambda be: be.matmul(a.T, g),
            f"colsum {batch}x{d}": lambda be: be.colsum(g),
        }
        for name, call in cases.items():
            t_np = best_of(lambda: call(kernels.fallback), repeat, number)
            if kernels.compiled is None:
                print(f"{name:<28}{'-':>12}{t_np * 1e6:>12.1f}{'-':>10}  -")
                continue
            t_cy = best_of(lambda: call(kernels.compiled), repeat, number)
            same = call(kernels.compiled).tobytes() == call(kernels.fallback).tobytes()
            print(f"{name:<28}{t_cy * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_cy:>9.1f}x  {'same' if same else 'DIFFER'}")


def bench_e2e(rounds: int, width: int):
    code = E2E.format(rounds=rounds, width=width)
    for force in ("0", "1"):
        env = dict(os.environ, INCLUSIVEFL_PURE_PYTHON=force)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"end-to-end {rounds} rounds, width {width}: {backend:<7} {float(secs):.2f}s")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=200)
    p.add_argument("--e2e", action="store_true", help="also time a short training run per backend")
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--width", type=int, default=16)
    args = p.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels([(32, 4), (64, 16), (64, 48), (256, 64)], args.repeat, args.number)
    if args.e2e:
        bench_e2e(args.rounds, args.width)


if __name__ == "__main__":
    main()
