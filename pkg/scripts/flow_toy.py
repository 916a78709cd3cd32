"""Train the flow-matching network on the +/-1 toy and check mode recovery.

    python3 scripts/flow_toy.py --dim 8 --steps 2000
"""

import argparse
import time

import numpy as np

from chunkstream import flow


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--count", type=int, default=1024)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    data = flow.bimodal_dataset(args.dim, args.count, seed=args.seed)
    t0 = time.perf_counter()
    result = flow.train(data, flow.TrainConfig(steps=args.steps, seed=args.seed))
    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.1f}s; "
          f"loss first {result.losses[0]:.3f} last-100 mean {np.mean(result.losses[-100:]):.3f}")
    for k in (1, 2, 5, 10, 100):
        modes = flow.mode_assignment(flow.sample_batch(result.params, np.zeros(0), steps=k, seed=1,
                                                       count=args.samples))
        print(f"K={k:>3}: {100 * np.mean(modes != 0):5.1f}% near a mode  (+1 {np.sum(modes == 1)}, -1 {np.sum(modes == -1)})")


if __name__ == "__main__":
    main()
