"""Success rate against inference delay for each executor mode on CR.

    python3 scripts/latency_sweep.py --count 100 --latencies 0,2,4,6,8,10
"""

import argparse

from chunkstream import bench
from chunkstream.streaming import ExecutorMode, LatencyModel, OraclePolicy, coverage_ok


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--latencies", default="0,2,4,6,8,10")
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    args = p.parse_args()

    cfg = bench.BenchConfig(cr_speeds=(0.2, 0.3, 0.4, 0.5, 0.6))
    scs = bench.generate_scenarios("CR", args.count, args.seed, cfg)
    table = bench.MetricsTable()
    for m in (int(x) for x in args.latencies.split(",")):
        lat = LatencyModel.constant(m)
        if not coverage_ok(args.horizon, lat):
            print(f"# note: n={args.horizon} leaves coverage gaps under CI+LAAS at m={m}")
        for mode in ExecutorMode:
            table = table.merged(bench.run_benchmark(OraclePolicy(args.horizon), mode, lat, scs, 1))
    print(bench.render_report(table, args.format, {"seed": args.seed, "count": args.count}), end="")


if __name__ == "__main__":
    main()
