"""Run one episode with inference on a worker thread, then replay it deterministically.

    python3 scripts/wall_clock.py --period 0.02 --latency 0.05
"""

import argparse

from chunkstream import bench
from chunkstream.streaming import LatencyModel, OraclePolicy, run_episode, run_wall_clock


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--period", type=float, default=0.02, help="seconds per tick")
    p.add_argument("--latency", type=float, default=0.05, help="minimum inference time in seconds")
    p.add_argument("--mode", default="ci-laas")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    inst = bench.instantiate(bench.generate_scenarios("CR", 1, args.seed)[0], 0)
    live = run_wall_clock(inst.world, OraclePolicy(20), args.mode, inst, period=args.period, latency=args.latency)
    delays = live.footer.diagnostics["delays"]
    replay = run_episode(inst.world, OraclePolicy(20), args.mode, LatencyModel.scheduled(delays), inst)
    print(f"outcome {live.footer.outcome} after {len(live.ticks) - 1} ticks; delays seen {sorted(set(delays))}")
    print("deterministic replay identical:", live.commands() == replay.commands())


if __name__ == "__main__":
    main()
