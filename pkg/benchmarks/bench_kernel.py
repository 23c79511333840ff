#!/usr/bin/env python3
"""Compare the compiled simulator kernel against the pure-Python fallback.

Runs the shipped scenarios with both kernels, checks that outputs match
bit for bit, and reports throughput (simulated intervals per second).

Usage: python benchmarks/bench_kernel.py [--repeats N]
"""

import argparse
import time

import numpy as np

from odcal.simulator import Simulator, build_congested_toy, build_medium_grid
from odcal.simulator.engine import kernel_name


def run(scenario, kernel, repeats):
    truth = scenario.demand.realize(scenario.seeds.get("demand", 0))
    best = float("inf")
    frames = None
    for _ in range(repeats):
        sim = Simulator(scenario.network, scenario.interval_seconds,
                        scenario.substeps, kernel=kernel)
        start = time.perf_counter()
        frames = [sim.step(truth.rates[h])
                  for h in range(scenario.n_intervals)]
        best = min(best, time.perf_counter() - start)
    return best, frames


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    try:
        kernel_name("native")
    except RuntimeError:
        print("native kernel not built; run `pip install -e .` with Cython "
              "and a C compiler available")
        return

    for scenario in (build_congested_toy(), build_medium_grid()):
        times = {}
        outputs = {}
        for kernel in ("python", "native"):
            times[kernel], outputs[kernel] = run(scenario, kernel,
                                                 args.repeats)
        for a, b in zip(outputs["python"], outputs["native"]):
            if not (np.array_equal(a.counts, b.counts)
                    and np.array_equal(a.mean_speeds, b.mean_speeds)):
                raise SystemExit(
                    f"{scenario.name}: kernels disagree at interval "
                    f"{a.interval_index}")
        n = scenario.n_intervals
        speedup = times["python"] / times["native"]
        print(f"{scenario.name:16s} python {n / times['python']:9.1f} "
              f"intervals/s   native {n / times['native']:9.1f} intervals/s"
              f"   speedup {speedup:6.1f}x   outputs bit-identical")


if __name__ == "__main__":
    main()
