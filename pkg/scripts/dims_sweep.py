"""All nine benchmark dimensions under each executor mode (structure of the main results table).

    python3 scripts/dims_sweep.py --count 10 --trials 2 --latency 5
"""

import argparse

from chunkstream import bench
from chunkstream.streaming import ExecutorMode, LatencyModel, OraclePolicy


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--latency", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    scs = [sc for d in bench.DIMENSIONS for sc in bench.generate_scenarios(d, args.count, args.seed)]
    table = bench.run_benchmark(None, "ci-laas", LatencyModel.constant(0), scs, args.trials)
    for mode in ExecutorMode:
        table = table.merged(bench.run_benchmark(OraclePolicy(20), mode, LatencyModel.constant(args.latency), scs,
                                                 args.trials))
    print(bench.render_report(table, "markdown"), end="")


if __name__ == "__main__":
    main()
