"""``chunkstream`` command line: collect, train, bench, replay, report.

Exit codes: 0 ok, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import pathlib
import sys

from . import bench, datagen, flow
from .config import ConfigError, load_config
from .episode import EpisodeFormatError, read_episode
from .streaming import ExecutorMode, LatencyModel, OraclePolicy

log = logging.getLogger("chunkstream")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
MODE_NAMES = tuple(m.value for m in ExecutorMode)


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _modes(text: str) -> list[str]:
    if text == "all":
        return list(MODE_NAMES)
    out = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in out if t not in MODE_NAMES]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"unknown mode {','.join(bad) or text!r}; valid: {', '.join(MODE_NAMES)}, all")
    return out


def _dims(text: str) -> list[str]:
    if text == "all":
        return list(bench.DIMENSIONS)
    out = [t.strip().upper() for t in text.split(",") if t.strip()]
    bad = [t for t in out if t not in bench.DIMENSIONS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"invalid dimension {','.join(bad) or text!r}; valid: {', '.join(bench.DIMENSIONS)}")
    return out


def _int_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out or any(v < 0 for v in out):
        raise argparse.ArgumentTypeError("latencies must be non-negative")
    return out


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args):
    return load_config(args.config, args.set or ())


# -- commands ------------------------------------------------------------------


def cmd_collect(args) -> int:
    cfg = _config(args)
    dg = datagen.DatagenConfig(scene=cfg.scene, expert=cfg.expert)
    summary = datagen.collect(dg, args.episodes, args.seed, args.out, config_digest=cfg.digest())
    print(summary.to_json(), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    episodes = datagen.load_episodes(args.data)
    hyper = dataclasses.replace(cfg.flow.train, horizon=cfg.executor.chunk_horizon)
    if args.steps is not None:
        hyper = dataclasses.replace(hyper, steps=args.steps)
    if args.seed is not None:
        hyper = dataclasses.replace(hyper, seed=args.seed)
    data = flow.dataset_from_episodes(episodes, hyper.horizon, hyper.include_failures)
    result = flow.train(data, hyper)
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    flow.save_params(out, result.params, seed=hyper.seed, config_digest=cfg.digest())
    final = result.losses[-1] if result.losses else float("nan")
    print(json.dumps({"pairs": len(data), "steps": hyper.steps, "final_loss": final, "out": str(out),
                      "seed": hyper.seed, "config_digest": cfg.digest()}))
    return EXIT_OK


def _policy(spec: str, cfg):
    if spec == "oracle":
        return OraclePolicy(cfg.executor.chunk_horizon, cfg.expert)
    if spec == "expert":
        return None  # zero-latency closed loop
    if spec.startswith("flow:"):
        params, _ = flow.load_params(spec[5:])
        return flow.FlowPolicy(params, steps=cfg.flow.sample_steps)
    raise UsageError(f"unknown policy {spec!r}; expected oracle, expert or flow:PATH")


def cmd_bench(args) -> int:
    cfg = _config(args)
    policy = _policy(args.policy, cfg)
    bcfg = bench.BenchConfig(scene=cfg.scene)
    if args.speeds:
        bcfg = dataclasses.replace(bcfg, cr_speeds=args.speeds)
    modes = args.mode or [cfg.executor.mode]
    latencies = args.latency_ticks if args.latency_ticks is not None else [cfg.executor.latency_ticks]
    dims = args.dims or list(bench.DIMENSIONS)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = [sc for d in dims for sc in bench.generate_scenarios(d, args.count, args.seed, bcfg)]
    table = bench.MetricsTable()
    records: list = []
    for mode in modes:
        for m in latencies:
            if cfg.executor.latency_jitter:
                latency = dataclasses.replace(cfg.executor, latency_ticks=m).latency_model()
            else:
                latency = LatencyModel.constant(m)
            log_dir = out / "episodes" if args.save_episodes else None
            table = table.merged(bench.run_benchmark(policy, mode, latency, scenarios, args.trials, log_dir=log_dir,
                                                     manifest=records, config_digest=cfg.digest(),
                                                     gap_behavior=cfg.executor.gap_behavior))
            if policy is None:
                break
        if policy is None:
            break
    meta = {"config_digest": cfg.digest(), "seed": args.seed}
    for fmt, ext in (("markdown", "md"), ("csv", "csv"), ("json", "json")):
        (out / f"report.{ext}").write_text(bench.render_report(table, fmt, meta), encoding="utf-8")
    bench.write_manifest(out / "manifest.json", records, sweep_seed=args.seed, config=bcfg,
                         config_digest=cfg.digest(),
                         extra={"policy": args.policy, "dims": dims, "count": args.count, "trials": args.trials,
                                "config": {k: v for k, v in cfg.flat().items()}})
    print(bench.render_report(table, "markdown"), end="")
    return EXIT_OK


TICK_COLUMNS = ("tick", "time", "phase", "source", "ee_x", "ee_y", "ee_z", "gripper", "attached", "cmd_hold",
                "cmd_x", "cmd_y", "cmd_z", "cmd_gripper", "events")


def tick_rows(ep) -> list[list]:
    rows = []
    for t in ep.ticks:
        c = t.command
        rows.append([
            t.tick, t.tick * ep.header.dt, t.phase or "", t.source, *t.end_effector.position,
            t.end_effector.gripper, "" if t.end_effector.attached is None else t.end_effector.attached,
            "" if c is None else c.hold, *(("", "", "") if c is None else c.target_position),
            "" if c is None else c.gripper,
            ";".join(f"{k}@{tick}:{obj}" for k, tick, obj in t.events),
        ])
    return rows


def cmd_replay(args) -> int:
    ep = read_episode(pathlib.Path(args.episode).read_bytes())
    rows = tick_rows(ep)
    if args.format == "json":
        print(json.dumps({"header": dataclasses.asdict(ep.header), "columns": TICK_COLUMNS, "rows": rows,
                          "footer": dataclasses.asdict(ep.footer)}))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TICK_COLUMNS)
        w.writerows(rows)
        print(buf.getvalue(), end="")
    else:
        print("\t".join(TICK_COLUMNS))
        for r in rows:
            print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    return EXIT_OK


def _load_table(path: pathlib.Path) -> bench.MetricsTable:
    if path.is_file():
        if path.suffix == ".csv":
            return bench.parse_csv_report(path.read_text(encoding="utf-8"))
        manifests = [path]
    elif path.is_dir():
        manifests = sorted(path.rglob("manifest.json"))
    else:
        raise FileNotFoundError(f"{path} does not exist")
    records = []
    for m in manifests:
        records += json.loads(m.read_text(encoding="utf-8"))["episodes"]
    return bench.table_from_manifest(records)


def cmd_report(args) -> int:
    table = _load_table(pathlib.Path(args.input))
    print(bench.render_report(table, args.format), end="")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chunkstream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file (default: $CHUNKSTREAM_CONFIG)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    c = sub.add_parser("collect", help="roll out expert episodes")
    common(c)
    c.add_argument("--episodes", type=_positive, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="train the flow-matching expert")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=_non_negative)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="evaluate a policy over benchmark scenarios")
    common(b)
    b.add_argument("--policy", default="oracle", help="oracle | expert | flow:PATH")
    b.add_argument("--mode", type=_modes, help=f"comma list of {', '.join(MODE_NAMES)} or 'all'")
    b.add_argument("--latency-ticks", type=_int_list, help="comma list of inference delays in ticks")
    b.add_argument("--dims", type=_dims, help="comma list of dimensions or 'all'")
    b.add_argument("--trials", type=_non_negative, default=20)
    b.add_argument("--count", type=_positive, default=10, help="scenarios per dimension")
    b.add_argument("--speeds", type=_float_list, help="override the CR speed grid (m/s)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--save-episodes", action="store_true")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("replay", help="print an episode as a tick table")
    r.add_argument("--episode", required=True)
    r.add_argument("--format", choices=("table", "csv", "json"), default="table")
    r.set_defaults(func=cmd_replay)

    rp = sub.add_parser("report", help="render a report from bench output")
    rp.add_argument("--in", dest="input", required=True)
    rp.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"chunkstream {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EpisodeFormatError, flow.EmptyDataset, flow.NonFiniteLoss, OSError, ValueError) as exc:
        print(f"chunkstream {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
