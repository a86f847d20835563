"""Benchmark the compiled net kernels against the numpy fallback.

Times net_forward and net_backward on the desk-scale layer stack
(64 -> 64 -> 32 -> 10) at two batch sizes and reports the speedup.
Run from the repository root: python benchmarks/bench_kernels.py
"""
import argparse
import time

import numpy as np

from protofed import _kernels_py
from protofed.rng import Rng

try:
    from protofed import _kernels as native
except ImportError:
    native = None

DIMS = [64, 64, 32, 10]
RELU_FLAGS = [True, True, False]
EMBED_LAYER = 1  # last hidden layer feeds the prototype terms


def build_case(batch):
    rng = Rng(7)

    def mat(rows, cols):
        return np.array([[rng.normal() for _ in range(cols)] for _ in range(rows)])

    weights = [mat(d_out, d_in) for d_in, d_out in zip(DIMS[:-1], DIMS[1:])]
    biases = [np.array([rng.normal() for _ in range(d)]) for d in DIMS[1:]]
    x = mat(batch, DIMS[0])
    d_out = mat(batch, DIMS[-1])
    d_embed = mat(batch, DIMS[EMBED_LAYER + 1])
    return x, weights, biases, d_out, d_embed


def time_call(fn, repeats):
    fn()  # warm up
    started = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - started) / repeats * 1e6  # microseconds


def bench_backend(mod, batch, repeats):
    x, weights, biases, d_out, d_embed = build_case(batch)
    fwd = time_call(lambda: mod.net_forward(x, weights, biases, RELU_FLAGS), repeats)
    pre, act = mod.net_forward(x, weights, biases, RELU_FLAGS)
    bwd = time_call(lambda: mod.net_backward(x, pre, act, weights, RELU_FLAGS,
                                             d_out, d_embed, EMBED_LAYER), repeats)
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=2000,
                        help="timed calls per kernel (default 2000)")
    args = parser.parse_args()
    print("layer stack %s, relu %s, %d repeats" % (DIMS, RELU_FLAGS, args.repeats))
    print("%-14s %5s %12s %12s %8s" % ("kernel", "batch", "native us", "python us",
                                       "speedup"))
    for batch in (4, 32):
        python_fwd, python_bwd = bench_backend(_kernels_py, batch, args.repeats)
        if native is None:
            print("%-14s %5d %12s %12.1f %8s" % ("net_forward", batch, "n/a",
                                                 python_fwd, "n/a"))
            print("%-14s %5d %12s %12.1f %8s" % ("net_backward", batch, "n/a",
                                                 python_bwd, "n/a"))
            continue
        native_fwd, native_bwd = bench_backend(native, batch, args.repeats)
        print("%-14s %5d %12.1f %12.1f %7.2fx" % ("net_forward", batch, native_fwd,
                                                  python_fwd, python_fwd / native_fwd))
        print("%-14s %5d %12.1f %12.1f %7.2fx" % ("net_backward", batch, native_bwd,
                                                  python_bwd, python_bwd / native_bwd))
    if native is None:
        print("compiled extension not built; showing the numpy fallback only")


if __name__ == "__main__":
    main()
