"""Benchmark scenarios for the nine sub-dimensions, the evaluation sweep and reports.

Perception dimensions (VU/SR/MP) are symbolic: the instruction is a selector
over labelled object state, not language over pixels.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import sim
from .expert import SelectorKind, TargetSpec, resolve_target, observe
from .sim import MotionEvent, MotionProgram, ObjectStatus, SceneConfig, WorldState
from .streaming import ExecutorMode, LatencyModel, run_episode

log = logging.getLogger(__name__)

DIMENSIONS = ("CR", "DA", "LS", "VU", "SR", "MP", "VG", "MG", "DR")
DIMENSION_GROUPS = {
    "Interaction": ("CR", "DA", "LS"),
    "Perception": ("VU", "SR", "MP"),
    "Generalization": ("VG", "MG", "DR"),
}


class InvalidDimensionConfig(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(motion="driven", drive_duration=(1.0, 4.0)))
    cr_speeds: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    # ranges seen by data collection; MG/VG must leave them
    train_speed_max: float = 0.75
    train_friction: tuple[float, float] = (0.5, 1.5)
    train_labels: tuple[str, ...] = ("tennis_ball", "ping_pong_ball", "orange", "apple", "can", "bottle")
    train_radius: float = 0.03
    heldout_labels: tuple[str, ...] = ("rubber_duck", "toy_car", "lemon", "mug")
    heldout_radii: tuple[float, ...] = (0.02, 0.04)
    direction_change_ticks: tuple[int, int] = (8, 30)
    impulse_magnitude: float = 0.3
    impulse_ticks: tuple[int, int] = (5, 25)
    noise_sigma: float = 0.004
    ls_objects: int = 3
    ls_spawn_interval: int = 60
    ls_speed: tuple[float, float] = (0.1, 0.3)
    ls_timeout_ticks: int = 600
    mg_speed: tuple[float, float] = (0.8, 1.0)
    mg_turn_rate: tuple[float, float] = (0.8, 1.6)
    trials: int = 20


@dataclass(frozen=True)
class Scenario:
    """A benchmark instance template; ``instantiate`` draws one trial from it."""

    dimension: str
    index: int
    seed: int
    scene: SceneConfig
    instruction: TargetSpec
    speed: float = 0.0
    params: tuple[tuple[str, Any], ...] = ()
    heldout: tuple[str, ...] = ()
    timeout_ticks: int = 300

    def param(self, key: str, default=None):
        return dict(self.params).get(key, default)

    def descriptor(self) -> dict:
        return {
            "dimension": self.dimension,
            "index": self.index,
            "seed": self.seed,
            "speed": self.speed,
            "instruction": [self.instruction.kind.value, self.instruction.value, self.instruction.gather_all],
            "params": {k: _jsonable(v) for k, v in self.params},
            "heldout": list(self.heldout),
            "timeout_ticks": self.timeout_ticks,
        }


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


@dataclass(frozen=True)
class ScenarioInstance:
    """One concrete trial: what ``run_episode`` consumes alongside the world."""

    scenario: Scenario
    trial_seed: int
    world: WorldState
    instruction: TargetSpec
    instructed_ids: tuple[int, ...]
    timeout_ticks: int
    disturbances: tuple[tuple[int, int, tuple[float, float, float]], ...] = ()
    noise_sigma: float = 0.0

    @property
    def seed(self) -> int:
        return self.trial_seed

    @property
    def dimension(self) -> str:
        return self.scenario.dimension

    def descriptor(self) -> dict:
        d = self.scenario.descriptor()
        d.update(
            trial_seed=self.trial_seed,
            instructed_ids=list(self.instructed_ids),
            disturbances=[[t, i, list(v)] for t, i, v in self.disturbances],
            noise_sigma=self.noise_sigma,
        )
        return d


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts (order matters)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFF_FFFF_FFFF_FFFF for p in parts]).generate_state(1, np.uint64)[0]) >> 1


def _cycle(grid: Sequence[float], i: int) -> float:
    return float(grid[i % len(grid)])


def generate_scenarios(dimension: str, count: int, seed: int, config: BenchConfig | None = None) -> list[Scenario]:
    config = config or BenchConfig()
    if dimension not in DIMENSIONS:
        raise InvalidDimensionConfig(f"unknown dimension {dimension!r}; valid: {', '.join(DIMENSIONS)}")
    if count < 1:
        raise InvalidDimensionConfig("count must be >= 1")
    if not config.cr_speeds:
        raise InvalidDimensionConfig("cr_speeds grid is empty")
    out = []
    for i in range(count):
        # shared across dimensions so DR/DA trials pair with the CR trial of the same index
        s = derive_seed(seed, i)
        rng = np.random.default_rng(s)
        out.append(_GENERATORS[dimension](config, i, s, rng))
    return out


def _label_spec(label: str) -> TargetSpec:
    return TargetSpec(SelectorKind.BY_LABEL, label)


def _gen_cr(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    scene = dataclasses.replace(config.scene, n_objects=1, labels=("tennis_ball",))
    return Scenario("CR", i, s, scene, _label_spec("tennis_ball"), speed=_cycle(config.cr_speeds, i),
                    timeout_ticks=scene.timeout_ticks)


def _gen_da(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    base = _gen_cr(config, i, s, rng)
    lo, hi = config.direction_change_ticks
    if i % 2 == 0:
        tick = int(rng.integers(lo, hi + 1))
        turn = float(rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 2, math.pi))
        params = (("direction_change", (tick, turn)),)
    else:
        lo, hi = config.impulse_ticks
        tick = int(rng.integers(lo, hi + 1))
        params = (("impulse", (tick, config.impulse_magnitude)),)
    return dataclasses.replace(base, dimension="DA", params=params)


def _gen_ls(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    k = config.ls_objects
    scene = dataclasses.replace(
        config.scene,
        n_objects=k,
        labels=("ping_pong_ball",),
        speed_min=config.ls_speed[0],
        speed_max=config.ls_speed[1],
    )
    spawn = tuple(j * config.ls_spawn_interval for j in range(k))
    spec = TargetSpec(SelectorKind.BY_LABEL, "ping_pong_ball", gather_all=True)
    return Scenario("LS", i, s, scene, spec, speed=config.ls_speed[1], params=(("spawn_ticks", spawn),),
                    timeout_ticks=config.ls_timeout_ticks)


def _gen_vu(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    labels = list(config.train_labels[:3])
    target = labels[i % 3]
    scene = dataclasses.replace(config.scene, n_objects=3, labels=tuple(labels))
    return Scenario("VU", i, s, scene, _label_spec(target), speed=_cycle(config.cr_speeds, i),
                    timeout_ticks=scene.timeout_ticks)


def _gen_sr(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    scene = dataclasses.replace(config.scene, n_objects=2, labels=("apple",))
    side = "left" if i % 2 == 0 else "right"
    return Scenario("SR", i, s, scene, TargetSpec(SelectorKind.BY_RELATIVE_POSITION, side),
                    speed=_cycle(config.cr_speeds, i), params=(("parallel", True),), timeout_ticks=scene.timeout_ticks)


def _gen_mp(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    scene = dataclasses.replace(config.scene, n_objects=2, labels=("orange",))
    which = "faster" if i % 2 == 0 else "slower"
    return Scenario("MP", i, s, scene, TargetSpec(SelectorKind.BY_RELATIVE_SPEED, which),
                    speed=_cycle(config.cr_speeds, i), params=(("speed_ratio", 0.4),), timeout_ticks=scene.timeout_ticks)


def _gen_vg(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    label = config.heldout_labels[i % len(config.heldout_labels)]
    radius = config.heldout_radii[i % len(config.heldout_radii)]
    scene = dataclasses.replace(config.scene, n_objects=1, labels=(label,), object_radius=radius)
    return Scenario("VG", i, s, scene, _label_spec(label), speed=_cycle(config.cr_speeds, i),
                    heldout=("label", "radius"), timeout_ticks=scene.timeout_ticks)


def _gen_mg(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    speed = float(rng.uniform(*config.mg_speed))
    lo_f, hi_f = config.train_friction
    friction = float(rng.uniform(0.1, lo_f * 0.8) if i % 2 == 0 else rng.uniform(hi_f * 1.2, hi_f * 1.6))
    turn = float(rng.choice([-1.0, 1.0]) * rng.uniform(*config.mg_turn_rate))
    scene = dataclasses.replace(config.scene, n_objects=1, labels=("tennis_ball",), friction_min=friction,
                                friction_max=friction)
    heldout = []
    if speed > config.train_speed_max:
        heldout.append("speed")
    if not lo_f <= friction <= hi_f:
        heldout.append("friction")
    if turn:
        heldout.append("trajectory")
    return Scenario("MG", i, s, scene, _label_spec("tennis_ball"), speed=speed, params=(("turn_rate", turn),),
                    heldout=tuple(heldout), timeout_ticks=scene.timeout_ticks)


def _gen_dr(config: BenchConfig, i: int, s: int, rng) -> Scenario:
    base = _gen_cr(config, i, s, rng)
    lo, hi = config.impulse_ticks
    tick = int(rng.integers(lo, hi + 1))
    params = (("impulse", (tick, config.impulse_magnitude)), ("noise_sigma", config.noise_sigma))
    return dataclasses.replace(base, dimension="DR", params=params)


_GENERATORS = {
    "CR": _gen_cr,
    "DA": _gen_da,
    "LS": _gen_ls,
    "VU": _gen_vu,
    "SR": _gen_sr,
    "MP": _gen_mp,
    "VG": _gen_vg,
    "MG": _gen_mg,
    "DR": _gen_dr,
}


def _heading(v) -> tuple[float, float, float]:
    n = math.hypot(v[0], v[1])
    if n == 0.0:
        return (1.0, 0.0, 0.0)
    return (v[0] / n, v[1] / n, 0.0)


def instantiate(scenario: Scenario, trial_seed: int) -> ScenarioInstance:
    """Spawn the trial world and resolve which objects the instruction names."""
    scene = scenario.scene
    dim = scenario.dimension
    if dim not in ("LS", "MG"):
        scene = dataclasses.replace(scene, speed_min=scenario.speed, speed_max=scenario.speed)
    world = sim.spawn_scene(scene, derive_seed(scenario.seed, trial_seed))
    extra = np.random.default_rng(derive_seed(scenario.seed, trial_seed, 1))
    objects = list(world.objects)

    if dim == "SR":
        # parallel motion keeps the left/right arrangement fixed
        v0 = objects[0].linear_velocity
        objects = [dataclasses.replace(o, linear_velocity=v0) for o in objects]
    elif dim == "MP":
        ratio = scenario.param("speed_ratio", 0.4)
        o = objects[1]
        objects[1] = dataclasses.replace(o, linear_velocity=sim.vec.scale(o.linear_velocity, ratio))
    elif dim == "MG":
        turn = scenario.param("turn_rate", 0.0)
        objects = [
            dataclasses.replace(o, motion_program=dataclasses.replace(o.motion_program, driven=True, turn_rate=turn))
            for o in objects
        ]
    elif dim == "LS":
        spawn = scenario.param("spawn_ticks")
        objects = [
            dataclasses.replace(o, spawn_tick=t, status=ObjectStatus.PENDING if t > 0 else ObjectStatus.FREE)
            for o, t in zip(objects, spawn)
        ]
    elif dim == "DA" and scenario.param("direction_change") is not None:
        tick, turn = scenario.param("direction_change")
        objects = [
            dataclasses.replace(
                o,
                motion_program=dataclasses.replace(
                    o.motion_program, events=o.motion_program.events + (MotionEvent(tick, turn),)
                ),
            )
            for o in objects
        ]
    world = dataclasses.replace(world, objects=tuple(objects))

    disturbances = []
    impulse = scenario.param("impulse")
    noise = float(scenario.param("noise_sigma", 0.0))
    obs = observe(world, scenario.instruction)
    target = resolve_target(obs)
    if impulse is not None:
        tick, magnitude = impulse
        if magnitude > 0:
            angle = float(extra.uniform(0, 2 * math.pi))
            disturbances.append((int(tick), target, (magnitude * math.cos(angle), magnitude * math.sin(angle), 0.0)))
    if scenario.instruction.gather_all:
        instructed = tuple(o.id for o in world.objects if o.label == scenario.instruction.value)
    else:
        instructed = (target,)
    return ScenarioInstance(
        scenario=scenario,
        trial_seed=trial_seed,
        world=world,
        instruction=scenario.instruction,
        instructed_ids=instructed,
        timeout_ticks=scenario.timeout_ticks,
        disturbances=tuple(disturbances),
        noise_sigma=noise,
    )


# -- evaluation sweep ------------------------------------------------------------

METRIC_COLUMNS = ("dimension", "mode", "latency", "success_rate", "path_length", "completion_time", "trials", "seed_digest")


@dataclass(frozen=True)
class MetricsRow:
    dimension: str
    mode: str
    latency: str
    success_rate: float  # percent
    path_length: float  # mean metres over all terminal episodes
    completion_time: float  # mean seconds over all terminal episodes
    trials: int
    seed_digest: str

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 100.0:
            raise ValueError(f"success rate {self.success_rate} outside [0, 100]")


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple[MetricsRow, ...] = ()

    def __len__(self) -> int:
        return len(self.rows)

    def merged(self, other: "MetricsTable") -> "MetricsTable":
        return MetricsTable(self.rows + other.rows)

    def get(self, dimension: str, mode: str, latency: str | None = None) -> MetricsRow:
        for r in self.rows:
            if r.dimension == dimension and r.mode == mode and (latency is None or r.latency == latency):
                return r
        raise KeyError((dimension, mode, latency))


@dataclass
class EpisodeRecord:
    """Manifest entry: enough to replay one trial exactly."""

    dimension: str
    scenario_index: int
    scenario_seed: int
    trial: int
    trial_seed: int
    mode: str
    latency: str
    success: bool
    outcome: str
    path_length: float
    completion_time: float
    digest: str
    log_file: str | None = None


def seed_digest(seeds: Iterable[int]) -> str:
    h = hashlib.sha256()
    for s in seeds:
        h.update(int(s).to_bytes(8, "little", signed=False))
    return h.hexdigest()[:16]


def _aggregate(dimension, mode, latency, records: list[EpisodeRecord]) -> MetricsRow:
    n = len(records)
    ok = sum(r.success for r in records)
    return MetricsRow(
        dimension=dimension,
        mode=mode,
        latency=latency,
        success_rate=100.0 * ok / n,
        path_length=sum(r.path_length for r in records) / n,
        completion_time=sum(r.completion_time for r in records) / n,
        trials=n,
        seed_digest=seed_digest(derive_seed(r.scenario_seed, r.trial) for r in records),
    )


def run_benchmark(
    policy,
    mode: ExecutorMode | str,
    latency_model: LatencyModel,
    scenarios: Sequence[Scenario],
    trials: int = 20,
    *,
    log_dir=None,
    manifest: list | None = None,
    config_digest: str = "",
    gap_behavior: str = "hold",
) -> MetricsTable:
    """Run every (scenario, trial) pair and aggregate one row per dimension.

    ``policy=None`` runs the zero-latency closed-loop expert (mode is then only
    a label). Episodes that raise are logged and counted as failures. When
    ``log_dir`` is set every episode file is written there; ``manifest``
    collects one ``EpisodeRecord`` per trial.
    """
    from .episode import write_episode
    from .streaming import run_closed_loop

    if trials < 0:
        raise ValueError("trials must be >= 0")
    mode_name = "closed-loop" if policy is None else ExecutorMode(mode).value
    latency = latency_model.describe()
    if log_dir is not None:
        import pathlib

        log_dir = pathlib.Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
    by_dim: dict[str, list[EpisodeRecord]] = {}
    for sc in scenarios:
        for trial in range(trials):
            inst = instantiate(sc, trial)
            try:
                if policy is None:
                    ep = run_closed_loop(inst.world, inst, config_digest=config_digest)
                else:
                    ep = run_episode(inst.world, policy, mode, latency_model, inst, gap_behavior=gap_behavior,
                                     config_digest=config_digest)
            except Exception as exc:  # a broken trial must not end the sweep
                log.warning("%s #%d trial %d failed: %r", sc.dimension, sc.index, trial, exc)
                rec = EpisodeRecord(sc.dimension, sc.index, sc.seed, trial, inst.trial_seed, mode_name, latency,
                                    False, "error", 0.0, 0.0, "")
            else:
                f = ep.footer
                rec = EpisodeRecord(sc.dimension, sc.index, sc.seed, trial, inst.trial_seed, mode_name, latency,
                                    f.success, f.outcome, f.path_length, f.completion_time, ep.digest())
                if log_dir is not None:
                    name = f"{sc.dimension}_{sc.index:04d}_{trial:02d}_{mode_name}_{latency.replace(':', '-')}.jsonl"
                    (log_dir / name).write_bytes(write_episode(ep))
                    rec.log_file = name
            by_dim.setdefault(sc.dimension, []).append(rec)
            if manifest is not None:
                manifest.append(rec)
    rows = [_aggregate(d, mode_name, latency, by_dim[d]) for d in DIMENSIONS if d in by_dim]
    return MetricsTable(tuple(rows))


def write_manifest(path, records: Sequence[EpisodeRecord], *, sweep_seed: int, config: BenchConfig,
                   config_digest: str = "", extra: dict | None = None) -> None:
    doc = {
        "sweep_seed": sweep_seed,
        "config_digest": config_digest,
        "bench_config": _jsonable_config(dataclasses.asdict(config)),
        "episodes": [dataclasses.asdict(r) for r in records],
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _jsonable_config(d):
    if isinstance(d, dict):
        return {k: _jsonable_config(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable_config(v) for v in d]
    return d


# -- reports -------------------------------------------------------------------

MODE_ORDER = ("closed-loop", "naive", "laas", "ci", "ci-laas")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _row_cells(r: MetricsRow) -> list[str]:
    return [r.dimension, r.mode, r.latency, _fmt(r.success_rate), _fmt(r.path_length), _fmt(r.completion_time),
            str(r.trials), r.seed_digest]


def _latency_key(latency: str) -> tuple:
    # "constant:5" before "constant:12"
    return tuple((0, int(part), "") if part.isdigit() else (1, 0, part) for part in re.split(r"(\d+)", latency))


def _sort_key(r: MetricsRow):
    dim = DIMENSIONS.index(r.dimension) if r.dimension in DIMENSIONS else len(DIMENSIONS)
    mode = MODE_ORDER.index(r.mode) if r.mode in MODE_ORDER else len(MODE_ORDER)
    return (dim, r.dimension, mode, r.mode, _latency_key(r.latency))


def render_report(table: MetricsTable, fmt: str = "markdown", meta: dict | None = None) -> str:
    """Render ``table`` as csv, json or markdown.

    ``meta`` (for example the config digest and seed) becomes a leading ``#``
    line in csv, a wrapper object in json and an html comment in markdown.
    """
    rows = sorted(table.rows, key=_sort_key)
    if fmt == "csv":
        buf = io.StringIO()
        if meta:
            buf.write("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(_row_cells(r))
        return buf.getvalue()
    if fmt == "json":
        out = [dict(zip(METRIC_COLUMNS, _row_cells(r))) for r in rows]
        for d in out:
            for k in ("success_rate", "path_length", "completion_time"):
                d[k] = float(d[k])
            d["trials"] = int(d["trials"])
        doc = out if not meta else {"meta": meta, "rows": out}
        return json.dumps(doc, indent=1, sort_keys=bool(meta)) + "\n"
    if fmt == "markdown":
        text = _markdown(rows)
        if meta:
            text = "<!-- " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + " -->\n\n" + text
        return text
    raise ValueError(f"unknown report format {fmt!r}; expected csv, json or markdown")


def _markdown(rows: list[MetricsRow]) -> str:
    dims = [d for d in DIMENSIONS if any(r.dimension == d for r in rows)]
    dims += sorted({r.dimension for r in rows} - set(dims))
    lines = []
    for title, attr in (("SR (%)", "success_rate"), ("Path Len (m)", "path_length"), ("Time (s)", "completion_time")):
        lines.append(f"### {title}")
        lines.append("")
        lines.append("| " + " | ".join(["Mode", "Latency", *dims]) + " |")
        lines.append("|" + "---|" * (2 + len(dims)))
        keys = sorted({(r.mode, r.latency) for r in rows},
                      key=lambda k: (MODE_ORDER.index(k[0]) if k[0] in MODE_ORDER else len(MODE_ORDER), k[0],
                                     _latency_key(k[1])))
        for mode, latency in keys:
            cells = []
            for d in dims:
                hit = [r for r in rows if r.mode == mode and r.latency == latency and r.dimension == d]
                cells.append(_fmt(getattr(hit[0], attr)) if hit else "-")
            lines.append("| " + " | ".join([mode, latency, *cells]) + " |")
        lines.append("")
    return "\n".join(lines)


def parse_csv_report(text: str) -> MetricsTable:
    body = "".join(line for line in io.StringIO(text) if not line.startswith("#"))
    reader = csv.reader(io.StringIO(body))
    header = next(reader, None)
    if header is None:
        return MetricsTable()
    if tuple(header) != METRIC_COLUMNS:
        raise ValueError(f"unexpected report columns {header}")
    rows = []
    for cells in reader:
        if not cells:
            continue
        d, m, lat, sr, pl, ct, n, dig = cells
        rows.append(MetricsRow(d, m, lat, float(sr), float(pl), float(ct), int(n), dig))
    return MetricsTable(tuple(rows))


def table_from_manifest(records: Sequence[dict]) -> MetricsTable:
    """Re-aggregate manifest entries (as loaded from JSON) into a table."""
    groups: dict[tuple, list[EpisodeRecord]] = {}
    for d in records:
        rec = EpisodeRecord(**d)
        groups.setdefault((rec.dimension, rec.mode, rec.latency), []).append(rec)
    return MetricsTable(tuple(_aggregate(d, m, lat, recs) for (d, m, lat), recs in groups.items()))
