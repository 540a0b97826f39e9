"""Compare the compiled kernels with the numpy fallback.

Times the two hot kernels on the built-in networks, then a full 13-bus
``solve`` run under each backend (the backend is chosen at import time, so the
end-to-end runs go through subprocesses).

    python3 benchmarks/bench_kernels.py [--repeat N] [--skip-end-to-end]
"""
import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from voltmulti import _kernels_py, cases
from voltmulti.algebraic import System, constraints_from_network

try:
    from voltmulti import _kernels as compiled
except ImportError:
    compiled = None


def best_time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat):
    rows = []
    rng = np.random.default_rng(0)
    for name in ("three_bus_base", "thirteen_bus"):
        net = cases.builtin_case(name).network
        s = System.build(net, constraints_from_network(net))
        y = rng.uniform(-2, 2, 2 * s.m)
        x0 = s.unknowns_from(rng.uniform(-1, 1, s.m) + 1j * rng.uniform(-1, 1, s.m))
        for kernel in ("network_eval", "newton_solve"):
            times = {}
            for label, impl in (("python", _kernels_py), ("cython", compiled)):
                if impl is None:
                    continue
                if kernel == "network_eval":
                    fn = lambda impl=impl: impl.network_eval(s.Yr, s.rhs, y, s.coef, True)
                else:
                    fn = lambda impl=impl: impl.newton_solve(s.Yr, s.rhs, s.y0, s.L, s.rows, s.coef, x0)
                times[label] = best_time(fn, repeat, 200)
            rows.append((name, kernel, times))
    return rows


def end_to_end(pure):
    env = dict(os.environ)
    if pure:
        env["VOLTMULTI_PURE_PYTHON"] = "1"
    else:
        env.pop("VOLTMULTI_PURE_PYTHON", None)
    start = time.perf_counter()
    subprocess.run([sys.executable, "-m", "voltmulti", "solve", "--case", "thirteen_bus"], env=env, check=True,
                   stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    return time.perf_counter() - start


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'case':<16}{'kernel':<14}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, kernel, t in kernel_rows(args.repeat):
        py, cy = t["python"] * 1e6, t.get("cython", float("nan")) * 1e6
        print(f"{name:<16}{kernel:<14}{py:>12.1f}{cy:>12.1f}{py / cy:>9.1f}x")
    if not args.skip_end_to_end:
        py = end_to_end(pure=True)
        line = f"solve --case thirteen_bus: python {py:.1f} s"
        if compiled is not None:
            cy = end_to_end(pure=False)
            line += f", cython {cy:.1f} s ({py / cy:.1f}x)"
        print(line)


if __name__ == "__main__":
    main()
