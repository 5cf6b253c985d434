"""Time the numba DFT kernels against the numpy fallbacks.

    python benchmarks/bench_kernels.py            # kernels + model forward
    python benchmarks/bench_kernels.py --quick

The model forward pass is timed in two subprocesses, one with
FTX_DISABLE_NUMBA=1, because the backend is fixed at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ftimexer import kernels
from ftimexer._accel import HAS_NUMBA

FORWARD_SNIPPET = """
import timeit, numpy as np
from ftimexer.model import FTimeXer, ModelConfig
from ftimexer._accel import backend_name
m = FTimeXer(ModelConfig(n_endo=1, n_exo=3, lookback={T}, patch_len={P}), seed=0)
rng = np.random.default_rng(0)
xe, xx = rng.normal(size=(64, {T}, 1)), rng.normal(size=(64, {T}, 3))
m.predict(xe, xx)
best = min(timeit.repeat(lambda: m.predict(xe, xx), number=5, repeat=3)) / 5
print(backend_name(), best)
"""


def best_of(fn, number, repeat=5):
    fn()  # warm-up, includes jit compilation
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(sizes, rows):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10}{'n':>6}{'rows':>7}{'numba us':>12}{'numpy us':>12}{'ratio':>8}")
    for n in sizes:
        re = rng.normal(size=(rows, n))
        im = rng.normal(size=(rows, n))
        name = "radix2" if kernels.is_power_of_two(n) else "direct"
        fn = kernels.fft_radix2_rows if name == "radix2" else kernels.dft_direct_rows
        number = max(1, 20000 // (rows * n))
        t_np = best_of(lambda: fn(re, im, backend="numpy"), number)
        if HAS_NUMBA:
            t_nb = best_of(lambda: fn(re, im, backend="numba"), number)
            ratio = f"{t_np / t_nb:8.2f}"
            nb = f"{t_nb * 1e6:12.1f}"
        else:
            nb, ratio = f"{'n/a':>12}", f"{'n/a':>8}"
        print(f"{name:<10}{n:>6}{rows:>7}{nb}{t_np * 1e6:12.1f}{ratio}")


def bench_forward(lookback, patch_len):
    code = FORWARD_SNIPPET.format(T=lookback, P=patch_len)
    for flag in ("0", "1"):
        env = dict(os.environ, FTX_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"forward batch=64 T={lookback}: {backend:<6} {float(seconds) * 1e3:8.2f} ms")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args(argv)
    sizes = [3, 8, 12] if args.quick else [3, 8, 12, 32, 48, 128, 256, 1024]
    rows = 64 if args.quick else 256
    bench_kernels(sizes, rows)
    if not args.quick:
        bench_forward(48, 4)


if __name__ == "__main__":
    main()
