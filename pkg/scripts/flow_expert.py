"""End to end: collect expert episodes, train the flow expert, run it through every executor mode.

    python3 scripts/flow_expert.py --episodes 200 --steps 3000 --out runs/flow
"""

import argparse
import dataclasses
import pathlib

from chunkstream import bench, datagen, flow
from chunkstream.streaming import ExecutorMode, LatencyModel


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--latency", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/flow")
    args = p.parse_args()

    out = pathlib.Path(args.out)
    summary = datagen.collect(datagen.DatagenConfig(), args.episodes, args.seed, out / "data")
    print(f"collected {summary.episodes} episodes, success fraction {summary.success_fraction:.2f}")
    data = flow.dataset_from_episodes(datagen.load_episodes(out / "data"))
    hyper = dataclasses.replace(flow.TrainConfig(), steps=args.steps, seed=args.seed)
    result = flow.train(data, hyper)
    flow.save_params(out / "params.bin", result.params, seed=args.seed, config_digest=hyper.digest())
    print(f"{len(data)} pairs; final loss {result.losses[-1]:.4f}")

    policy = flow.FlowPolicy(result.params)
    scs = bench.generate_scenarios("CR", args.count, args.seed + 1)
    table = bench.MetricsTable()
    for mode in ExecutorMode:
        table = table.merged(bench.run_benchmark(policy, mode, LatencyModel.constant(args.latency), scs, 1))
    print(bench.render_report(table, "markdown"), end="")


if __name__ == "__main__":
    main()
