"""Wall time of the numba kernels against the numpy fallback on the same workloads.

    python benchmarks/bench_kernels.py [--repeat 3]

The script checks that both backends agree before timing: counts exactly, ℒ values to 1e-12
(summation order differs between the depth-first and breadth-first walks).
"""
import argparse
import math
import time

import numpy as np

from bbmcmd import experiments as ex
from bbmcmd.curves import ModelParams
from bbmcmd.simulator import BarrierSpec, SimConfig, simulate_batch

WORKLOADS = {
    "survival eps=0.3 t=8 x=5 n=2000": lambda b: simulate_batch(
        SimConfig(ModelParams(0.3, 8.0), 5.0, BarrierSpec.origin_only(), dt=0.005, seed=1), 2000,
        stop_on_survival=True, backend=b).survived,
    "strip hits K=3 t=3 n=2000": lambda b: simulate_batch(
        SimConfig(ModelParams(0.3, 3.0), 1.5, BarrierSpec.constant_strip(3.0), dt=0.005, seed=2,
                  record_hits_window=(0.0, 3.0)), 2000, backend=b).hit_counts,
    "max displacement eps=0.3 t=4 n=500": lambda b: simulate_batch(
        SimConfig(ModelParams(0.3, 4.0), 0.0, BarrierSpec.no_absorption(), dt=0.005, seed=3), 500,
        track_cmd=True, backend=b).cmd,
    "FKPP front dx=0.025 t=20": lambda b: ex.fkpp_front(
        ex.FrontTrackerConfig(dx=0.025, horizon=20.0, n_outputs=4), backend=b).fronts,
}


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    print(f"{'workload':40s} {'numba s':>9s} {'numpy s':>9s} {'speedup':>8s}")
    for name, fn in WORKLOADS.items():
        fn("numba")  # compile outside the timing
        t_nb, a = best_of(lambda: fn("numba"), args.repeat)
        t_np, b = best_of(lambda: fn("numpy"), args.repeat)
        a, b = np.asarray(a), np.asarray(b)
        same = np.array_equal(a, b) if a.dtype.kind in "biu" else np.allclose(a, b, rtol=0, atol=1e-12)
        if not same:
            raise SystemExit(f"backends disagree on {name}")
        speed = t_np / t_nb if t_nb > 0 else math.inf
        print(f"{name:40s} {t_nb:9.3f} {t_np:9.3f} {speed:7.1f}x")


if __name__ == "__main__":
    main()
