"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best wall time of each backend.
"""

import argparse
import time

import numpy as np

from osdkit import _fallback
from osdkit.audio import SINC_ZEROS, SINC_RESOLUTION, _sinc_table

try:
    from osdkit import _kernels
except ImportError:  # extension not built
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x32 = rng.standard_normal((8, 150, 128, 32)).astype(np.float32)
    x64 = rng.standard_normal((4, 75, 64, 128))
    cols = rng.standard_normal((8, 150, 128, 9, 32)).astype(np.float32)
    wave = rng.standard_normal(16000 * 10)
    table = _sinc_table()
    # 16 kHz -> 8 kHz, 10 s of audio
    resample = (wave, table, 2.0, 80000, 0.5 * 0.9, SINC_RESOLUTION, SINC_ZEROS)
    return [
        ("im2col3x3 f32 (8,150,128,32)", "im2col3x3", (x32,)),
        ("im2col3x3 f64 (4,75,64,128)", "im2col3x3", (x64,)),
        ("col2im3x3 f32 (8,150,128,9,32)", "col2im3x3", (cols,)),
        ("sinc_resample 10 s 16k->8k", "sinc_resample", resample),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<34}{'python [ms]':>12}{'cython [ms]':>12}{'speedup':>9}{'max |diff|':>12}")
    for label, name, inputs in cases(rng):
        py_fn = getattr(_fallback, name)
        t_py = best_of(lambda: py_fn(*inputs), args.repeat)
        if _kernels is None:
            print(f"{label:<34}{t_py * 1e3:>12.2f}{'n/a':>12}{'n/a':>9}{'n/a':>12}")
            continue
        cy_fn = getattr(_kernels, name)
        t_cy = best_of(lambda: cy_fn(*inputs), args.repeat)
        diff = float(np.max(np.abs(np.asarray(py_fn(*inputs)) - np.asarray(cy_fn(*inputs)))))
        print(f"{label:<34}{t_py * 1e3:>12.2f}{t_cy * 1e3:>12.2f}{t_py / t_cy:>9.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
