"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``. Also cross-checks that both
implementations agree bit for bit on random inputs.
"""

import argparse
import time

import numpy as np

from polcon.kernels import ADAM_IMPLS, BEAKER_IMPLS, GAE_IMPLS, HAVE_NUMBA


def _time(fn, args, repeats):
    fn(*args)  # warm-up (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def bench_gae(horizon, repeats):
    rng = np.random.default_rng(0)
    args = (rng.normal(size=horizon), rng.normal(size=horizon),
            rng.random(horizon) < 0.01, 0.3, 0.99, 0.95)
    return {name: _time(fn, args, repeats) for name, fn in GAE_IMPLS.items()}, [
        GAE_IMPLS[name](*args) for name in ("numpy", "numba")
    ]


def bench_adam(n_params, repeats):
    rng = np.random.default_rng(1)
    args = (rng.normal(size=n_params), rng.normal(size=n_params) * 0.01,
            rng.normal(size=n_params) * 0.01, np.abs(rng.normal(size=n_params)) * 1e-4,
            1.0 - 0.9 ** 7, 1.0 - 0.999 ** 7, 3e-4, 0.9, 0.999, 1e-8)
    outs = [np.concatenate(ADAM_IMPLS[name](*args)) for name in ("numpy", "numba")]
    return {name: _time(fn, args, repeats) for name, fn in ADAM_IMPLS.items()}, outs


def bench_beaker(n_params, n_beakers, repeats):
    rng = np.random.default_rng(2)
    args = (rng.normal(size=(n_params, n_beakers)), 2.0 ** np.arange(n_beakers),
            0.01 * 2.0 ** -np.arange(n_beakers - 1), 1.0,
            rng.normal(size=n_params))
    outs = [BEAKER_IMPLS[name](*args) for name in ("numpy", "numba")]
    return {name: _time(fn, args, repeats) for name, fn in BEAKER_IMPLS.items()}, outs


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--horizon", type=int, default=2048)
    parser.add_argument("--params", type=int, default=4677)
    args = parser.parse_args()

    if not HAVE_NUMBA:
        print("numba unavailable; 'numba' column falls back to numpy")

    rows = [
        ("gae", *bench_gae(args.horizon, args.repeats)),
        ("adam", *bench_adam(args.params, args.repeats)),
        ("beaker", *bench_beaker(args.params, 8, args.repeats)),
    ]
    print(f"{'kernel':<8} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>9}  bitwise")
    for name, times, outs in rows:
        identical = all(np.array_equal(outs[0], o) for o in outs[1:])
        speedup = times["numpy"] / times["numba"] if times["numba"] > 0 else float("inf")
        print(f"{name:<8} {times['numpy'] * 1e6:>12.2f} {times['numba'] * 1e6:>12.2f} "
              f"{speedup:>8.2f}x  {identical}")


if __name__ == "__main__":
    main()
