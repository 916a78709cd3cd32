"""Automatic data collection with the zero-latency closed-loop expert.

Episode ``i`` of a collection depends only on (config, master seed, i), so a
collection of N episodes is a prefix of a collection of N + 1.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import pathlib
from dataclasses import dataclass, field

import numpy as np

from . import sim
from .bench import derive_seed
from .episode import EpisodeLog, read_episode, write_episode
from .expert import ExpertParams, SelectorKind, TargetSpec
from .sim import InfeasiblePlacement, SceneConfig
from .streaming import run_closed_loop

log = logging.getLogger(__name__)

EPISODE_GLOB = "episode_*.jsonl"
SUMMARY_FILE = "summary.json"


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class DatagenConfig:
    # driven objects keep their speed until released; free ones stop within centimetres
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(motion="driven", drive_duration=(1.0, 4.0)))
    expert: ExpertParams = field(default_factory=ExpertParams)
    histogram_bins: int = 8

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CollectScenario:
    """What the episode driver needs for one collected episode."""

    index: int
    seed: int
    instruction: TargetSpec
    instructed_ids: tuple[int, ...]
    timeout_ticks: int
    target_location: tuple[float, float, float]
    speeds: tuple[float, ...]
    frictions: tuple[float, ...]
    noise_sigma: float = 0.0
    disturbances: tuple = ()

    def descriptor(self) -> dict:
        return {
            "dimension": "collect",
            "index": self.index,
            "seed": self.seed,
            "instruction": [self.instruction.kind.value, self.instruction.value, self.instruction.gather_all],
            "target_location": list(self.target_location),
            "speeds": list(self.speeds),
            "frictions": list(self.frictions),
            "timeout_ticks": self.timeout_ticks,
        }


@dataclass
class DatasetSummary:
    episodes: int = 0
    successes: int = 0
    infeasible: list[int] = field(default_factory=list)
    speed_histogram: dict = field(default_factory=dict)
    friction_histogram: dict = field(default_factory=dict)
    dimension_counts: dict = field(default_factory=dict)
    outcomes: dict = field(default_factory=dict)
    seed: int = 0
    config_digest: str = ""
    files: list[str] = field(default_factory=list)

    @property
    def success_fraction(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["success_fraction"] = self.success_fraction
        return json.dumps(d, indent=1, sort_keys=True) + "\n"


def episode_name(index: int) -> str:
    return f"episode_{index:06d}.jsonl"


def make_episode(config: DatagenConfig, seed: int, index: int):
    """Spawn episode ``index`` of a collection; raises ``InfeasiblePlacement``."""
    s = derive_seed(seed, index)
    world = sim.spawn_scene(config.scene, s)
    if not world.objects:
        raise InfeasiblePlacement("scene has no objects")
    rng = np.random.default_rng(derive_seed(seed, index, 2))
    target = world.objects[int(rng.integers(len(world.objects)))]
    labels = [o.label for o in world.objects]
    if labels.count(target.label) == 1:
        instruction = TargetSpec(SelectorKind.BY_LABEL, target.label)
    else:
        instruction = TargetSpec(SelectorKind.BY_LABEL, target.label, gather_all=True)
    instructed = tuple(o.id for o in world.objects if o.label == target.label)
    scenario = CollectScenario(
        index=index,
        seed=s,
        instruction=instruction,
        instructed_ids=instructed,
        timeout_ticks=config.scene.timeout_ticks,
        target_location=world.target_location,
        speeds=tuple(o.speed for o in world.objects),
        frictions=tuple(o.friction for o in world.objects),
    )
    return world, scenario


def rollout(config: DatagenConfig, seed: int, index: int, config_digest: str | None = None) -> EpisodeLog:
    world, scenario = make_episode(config, seed, index)
    digest = config.digest() if config_digest is None else config_digest
    return run_closed_loop(world, scenario, config.expert, config_digest=digest)


def _histogram(values, lo: float, hi: float, bins: int) -> dict:
    if hi <= lo:
        hi = lo + 1e-9
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def collect(config: DatagenConfig, episodes: int, seed: int, out_dir, *, config_digest: str | None = None) -> DatasetSummary:
    """Roll out ``episodes`` episodes into ``out_dir`` and write ``summary.json``.

    Failed episodes are kept (flagged in their footer); scenes that cannot be
    placed are logged and listed in ``summary.infeasible``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    out = pathlib.Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    digest = config.digest() if config_digest is None else config_digest
    summary = DatasetSummary(seed=seed, config_digest=digest)
    speeds, frictions = [], []
    for i in range(episodes):
        try:
            ep = rollout(config, seed, i, digest)
        except InfeasiblePlacement as exc:
            log.warning("episode %d skipped: %s", i, exc)
            summary.infeasible.append(i)
            continue
        name = episode_name(i)
        try:
            (out / name).write_bytes(write_episode(ep))
        except OSError as exc:
            raise IoFailure(f"cannot write {out / name}: {exc}") from exc
        summary.files.append(name)
        summary.episodes += 1
        summary.successes += int(ep.footer.success)
        summary.outcomes[ep.footer.outcome] = summary.outcomes.get(ep.footer.outcome, 0) + 1
        dim = ep.header.scenario.get("dimension", "collect")
        summary.dimension_counts[dim] = summary.dimension_counts.get(dim, 0) + 1
        speeds += ep.header.scenario["speeds"]
        frictions += ep.header.scenario["frictions"]
    sc = config.scene
    summary.speed_histogram = _histogram(speeds, sc.speed_min, sc.speed_max, config.histogram_bins)
    summary.friction_histogram = _histogram(frictions, sc.friction_min, sc.friction_max, config.histogram_bins)
    try:
        (out / SUMMARY_FILE).write_text(summary.to_json(), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write summary: {exc}") from exc
    return summary


def load_episodes(data_dir) -> list[EpisodeLog]:
    paths = sorted(pathlib.Path(data_dir).glob(EPISODE_GLOB))
    return [read_episode(p.read_bytes()) for p in paths]
