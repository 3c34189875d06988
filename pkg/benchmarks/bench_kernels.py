"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat N] [--scenario]

``--scenario`` also times a 100 s closed-loop run in two fresh interpreters,
one with ``DDSEC_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from ddsec import _accel, _kernels


def _qp(n, rng):
    A = rng.normal(size=(n // 2, n))
    H = A.T @ A + 1e-8 * np.eye(n)
    g = A.T @ rng.normal(size=n // 2)
    lo, hi = -0.1 * np.ones(n), 0.1 * np.ones(n)
    return H, g, lo, hi, 2.0 * np.linalg.eigvalsh(H)[-1]


def _time(fn, repeat):
    fn()  # warm-up (jit compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernels(repeat):
    rng = np.random.default_rng(0)
    H, g, lo, hi, L = _qp(10, rng)
    x0 = np.zeros(10)
    S, F = np.zeros((5, 10)), 1000.0 * np.eye(10)
    dus, dys = rng.normal(size=(400, 10)), rng.normal(size=(400, 5))
    cases = {
        "box_qp_pg (n=10, 200 iters)": lambda use: _kernels.box_qp_pg(H, g, lo, hi, x0, L, 0.0, 200, use),
        "rls_sequence (400 steps, 5x10)": lambda use: _kernels.rls_sequence(S, F, dus, dys, 0.85, use),
    }
    print(f"{'kernel':<34}{'numpy':>12}{'numba':>12}{'speed-up':>10}")
    for name, call in cases.items():
        t_np = _time(lambda: call(False), repeat)
        if _accel.HAVE_NUMBA:
            t_nb = _time(lambda: call(True), repeat)
            print(f"{name:<34}{t_np * 1e3:>10.3f}ms{t_nb * 1e3:>10.3f}ms{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<34}{t_np * 1e3:>10.3f}ms{'n/a':>12}")


def scenario():
    code = ("from dataclasses import replace; import time; from ddsec.harness import *; "
            "sc = replace(load_scenario(bundled_scenario_path()), duration=100.0); run_scenario(sc); "
            "t = time.perf_counter(); run_scenario(sc); print(time.perf_counter() - t)")
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DDSEC_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        print(f"100 s closed loop, {label:<6}{float(out.stdout):8.2f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--scenario", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    kernels(args.repeat)
    if args.scenario:
        scenario()
    print(f"total {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
