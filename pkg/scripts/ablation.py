"""Executor-mode ablation on paired CR seeds: SR and mean completion time per mode.

    python3 scripts/ablation.py --count 200 --latency 5
"""

import argparse
import time

import numpy as np

from chunkstream import bench
from chunkstream.streaming import ExecutorMode, LatencyModel, OraclePolicy, run_episode


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--latency", type=int, default=5)
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--speeds", default="0.2,0.3,0.4,0.5,0.6")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cfg = bench.BenchConfig(cr_speeds=tuple(float(s) for s in args.speeds.split(",")))
    insts = [bench.instantiate(sc, 0) for sc in bench.generate_scenarios("CR", args.count, args.seed, cfg)]
    results = {}
    t0 = time.perf_counter()
    for mode in ExecutorMode:
        results[mode] = [
            run_episode(i.world, OraclePolicy(args.horizon), mode, LatencyModel.constant(args.latency), i)
            for i in insts
        ]
    full = results[ExecutorMode.CONTINUOUS_LAAS]
    print(f"CR, {args.count} seeds, m={args.latency}, n={args.horizon} ({time.perf_counter() - t0:.0f}s)\n")
    print("| mode | SR (%) | time on joint successes vs ci-laas (s) |")
    print("|---|---|---|")
    for mode, eps in results.items():
        sr = 100.0 * np.mean([e.footer.success for e in eps])
        joint = [(a.footer.completion_time, b.footer.completion_time)
                 for a, b in zip(eps, full) if a.footer.success and b.footer.success]
        times = f"{np.mean([a for a, _ in joint]):.2f} vs {np.mean([b for _, b in joint]):.2f}" if joint else "-"
        print(f"| {mode.value} | {sr:.2f} | {times} |")


if __name__ == "__main__":
    main()
