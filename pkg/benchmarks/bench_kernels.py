"""Time the numba and pure-numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--sizes 1000 32000 152000]

Each row is one kernel at one vocabulary size; "step" is a full contrastive
step (two softmaxes, combine, plausibility mask, argmax) as run per token by
the decoder. Times are medians in microseconds. The two paths are checked
for agreement before timing.
"""

import argparse
import statistics
import time

import numpy as np

from audiocd import _jit, kernels

FLOOR = kernels.KL_FLOOR


def step(ns, expert, amateur):
    p = ns.softmax(expert)
    combined = ns.combine(expert, amateur, 2.0, 1.0)
    return ns.argmax(ns.apc_mask(combined, p, 0.1))


def cases(v, rng):
    expert = rng.normal(0.0, 3.0, v)
    amateur = rng.normal(0.0, 3.0, v)
    p = kernels.NUMPY.softmax(expert)
    q = kernels.NUMPY.softmax(amateur)
    rows = np.stack([kernels.NUMPY.softmax(rng.normal(0.0, 3.0, v)) for _ in range(7)])
    return {
        "combine": lambda ns: ns.combine(expert, amateur, 2.0, 1.0),
        "softmax": lambda ns: ns.softmax(expert),
        "entropy": lambda ns: ns.entropy(p),
        "jsd": lambda ns: ns.jsd(p, q, FLOOR),
        "jsd_rows(7)": lambda ns: ns.jsd_rows(p, rows, FLOOR),
        "apc_mask": lambda ns: ns.apc_mask(expert, p, 0.1),
        "argmax": lambda ns: ns.argmax(expert),
        "step": lambda ns: step(ns, expert, amateur),
    }


def median_us(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e6 * statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 32000, 152000])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not _jit.HAS_NUMBA:
        print("numba is not installed; both columns use the numpy path")
    elif not _jit.JIT_ENABLED:
        print("AUDIOCD_NUMBA is off; the numba column runs the kernels uncompiled")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<12} {'V':>7} {'numba us':>10} {'numpy us':>10} {'speedup':>8}")
    for v in args.sizes:
        for name, fn in cases(v, rng).items():
            a, b = fn(kernels.NUMBA), fn(kernels.NUMPY)  # warm-up doubles as agreement check
            if not np.allclose(a, b, rtol=1e-9, atol=1e-12, equal_nan=True):
                raise SystemExit(f"{name} at V={v}: numba and numpy disagree")
            t_nb = median_us(lambda: fn(kernels.NUMBA), args.repeat)
            t_np = median_us(lambda: fn(kernels.NUMPY), args.repeat)
            print(f"{name:<12} {v:>7} {t_nb:>10.1f} {t_np:>10.1f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
