"""Episode log records and the line-delimited episode file format.

A file is one JSON header line, one JSON line per tick and one JSON footer
line. Floats are written with ``repr`` precision so ``read_episode`` restores
every value bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

from .sim import EndEffectorCommand, Event, WorldState

SCHEMA_VERSION = 2

# Action vectors are 8-dim (position 3, quaternion wxyz 4, gripper 1). Consumers
# expecting the zero-padded 32-dim layout place these in entries 0..7.
ACTION_DIM = 8
PADDED_ACTION_DIM = 32


class EpisodeFormatError(Exception):
    pass


class SchemaMismatch(EpisodeFormatError):
    pass


class CorruptRecord(EpisodeFormatError):
    def __init__(self, tick: int, reason: str):
        super().__init__(f"corrupt record at tick {tick}: {reason}")
        self.tick = tick


@dataclass(frozen=True)
class ObjectRecord:
    id: int
    label: str
    status: str
    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]
    velocity: tuple[float, float, float]


@dataclass(frozen=True)
class EndEffectorRecord:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]
    velocity: tuple[float, float, float]
    gripper: str
    attached: int | None


@dataclass(frozen=True)
class CommandRecord:
    hold: bool
    target_position: tuple[float, float, float]
    target_orientation: tuple[float, float, float, float]
    gripper: str


@dataclass(frozen=True)
class TickRecord:
    tick: int
    objects: tuple[ObjectRecord, ...]
    end_effector: EndEffectorRecord
    phase: str | None
    command: CommandRecord | None
    source: str  # "chunk:<start>:<index>" | "hold" | "closed-loop" | "terminal"
    events: tuple[tuple[str, int, int | None], ...]


@dataclass(frozen=True)
class EpisodeHeader:
    schema_version: int
    seed: int
    config_digest: str
    scenario: dict[str, Any]
    dt: float
    mode: str
    latency: str
    policy: str


@dataclass(frozen=True)
class EpisodeFooter:
    outcome: str
    success: bool
    path_length: float
    completion_time: float
    placed: tuple[tuple[int, bool], ...]
    diagnostics: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EpisodeLog:
    header: EpisodeHeader
    ticks: tuple[TickRecord, ...]
    footer: EpisodeFooter

    def digest(self) -> str:
        return hashlib.sha256(write_episode(self)).hexdigest()

    def commands(self) -> list[CommandRecord | None]:
        return [t.command for t in self.ticks]


def _tuple3(v):
    return (float(v[0]), float(v[1]), float(v[2]))


def _tuple4(v):
    return (float(v[0]), float(v[1]), float(v[2]), float(v[3]))


def command_record(cmd: EndEffectorCommand | None) -> CommandRecord | None:
    if cmd is None:
        return None
    return CommandRecord(
        cmd.hold, _tuple3(cmd.target_position), _tuple4(cmd.target_orientation), cmd.gripper_command.value
    )


def tick_record(
    world: WorldState,
    command: EndEffectorCommand | None,
    source: str,
    phase: str | None,
    events: tuple[Event, ...],
) -> TickRecord:
    ee = world.end_effector
    return TickRecord(
        tick=world.tick,
        objects=tuple(
            ObjectRecord(
                o.id,
                o.label,
                o.status.value,
                _tuple3(o.pose.position),
                _tuple4(o.pose.orientation),
                _tuple3(o.linear_velocity),
            )
            for o in world.objects
        ),
        end_effector=EndEffectorRecord(
            _tuple3(ee.pose.position),
            _tuple4(ee.pose.orientation),
            _tuple3(ee.linear_velocity),
            ee.gripper.value,
            ee.attached_object,
        ),
        phase=phase,
        command=command_record(command),
        source=source,
        events=tuple((e.kind.value, e.tick, e.object_id) for e in events),
    )


def path_length(ticks) -> float:
    """Sum of end-effector displacements between consecutive tick records."""
    total = 0.0
    for a, b in zip(ticks, ticks[1:]):
        total += math.dist(a.end_effector.position, b.end_effector.position)
    return total


def completion_time(ticks, dt: float) -> float:
    return ticks[-1].tick * dt


# -- codec -------------------------------------------------------------------


def _tick_to_json(t: TickRecord) -> dict:
    return {
        "tick": t.tick,
        "objects": [
            [o.id, o.label, o.status, list(o.position), list(o.orientation), list(o.velocity)] for o in t.objects
        ],
        "ee": [
            list(t.end_effector.position),
            list(t.end_effector.orientation),
            list(t.end_effector.velocity),
            t.end_effector.gripper,
            t.end_effector.attached,
        ],
        "phase": t.phase,
        "command": None
        if t.command is None
        else [t.command.hold, list(t.command.target_position), list(t.command.target_orientation), t.command.gripper],
        "source": t.source,
        "events": [list(e) for e in t.events],
    }


def _tick_from_json(d: dict) -> TickRecord:
    ee = d["ee"]
    cmd = d["command"]
    return TickRecord(
        tick=int(d["tick"]),
        objects=tuple(
            ObjectRecord(int(o[0]), o[1], o[2], _tuple3(o[3]), _tuple4(o[4]), _tuple3(o[5])) for o in d["objects"]
        ),
        end_effector=EndEffectorRecord(_tuple3(ee[0]), _tuple4(ee[1]), _tuple3(ee[2]), ee[3], ee[4]),
        phase=d["phase"],
        command=None if cmd is None else CommandRecord(bool(cmd[0]), _tuple3(cmd[1]), _tuple4(cmd[2]), cmd[3]),
        source=d["source"],
        events=tuple((e[0], int(e[1]), e[2]) for e in d["events"]),
    )


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=False)


def write_episode(log: EpisodeLog) -> bytes:
    h = log.header
    lines = [
        _dumps(
            {
                "record": "header",
                "schema_version": h.schema_version,
                "seed": h.seed,
                "config_digest": h.config_digest,
                "scenario": h.scenario,
                "dt": h.dt,
                "mode": h.mode,
                "latency": h.latency,
                "policy": h.policy,
            }
        )
    ]
    for t in log.ticks:
        lines.append(_dumps({"record": "tick", **_tick_to_json(t)}))
    f = log.footer
    lines.append(
        _dumps(
            {
                "record": "footer",
                "outcome": f.outcome,
                "success": f.success,
                "path_length": f.path_length,
                "completion_time": f.completion_time,
                "placed": [list(p) for p in f.placed],
                "diagnostics": f.diagnostics,
            }
        )
    )
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_episode(data: bytes) -> EpisodeLog:
    text = data.decode("utf-8")
    lines = text.split("\n")
    if not lines or not lines[0]:
        raise CorruptRecord(0, "missing header")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptRecord(0, f"unreadable header ({exc})") from None
    if head.get("record") != "header":
        raise CorruptRecord(0, "first record is not a header")
    version = head.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(f"episode schema_version {version!r}, this reader supports {SCHEMA_VERSION}")
    header = EpisodeHeader(
        schema_version=version,
        seed=int(head["seed"]),
        config_digest=head["config_digest"],
        scenario=head["scenario"],
        dt=float(head["dt"]),
        mode=head["mode"],
        latency=head["latency"],
        policy=head["policy"],
    )
    ticks: list[TickRecord] = []
    footer = None
    for line in lines[1:]:
        expected = len(ticks)
        if footer is not None:
            if line:
                raise CorruptRecord(expected, "data after footer")
            continue
        if not line:
            raise CorruptRecord(expected, "missing footer")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise CorruptRecord(expected, "truncated or malformed line") from None
        kind = rec.get("record")
        if kind == "tick":
            try:
                t = _tick_from_json(rec)
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise CorruptRecord(expected, f"incomplete tick record ({exc!r})") from None
            if t.tick != expected:
                raise CorruptRecord(expected, f"found tick {t.tick}")
            ticks.append(t)
        elif kind == "footer":
            try:
                footer = EpisodeFooter(
                    outcome=rec["outcome"],
                    success=bool(rec["success"]),
                    path_length=float(rec["path_length"]),
                    completion_time=float(rec["completion_time"]),
                    placed=tuple((int(p[0]), bool(p[1])) for p in rec["placed"]),
                    diagnostics=rec.get("diagnostics", {}),
                )
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise CorruptRecord(expected, f"incomplete footer ({exc!r})") from None
        else:
            raise CorruptRecord(expected, f"unknown record kind {kind!r}")
    if footer is None:
        raise CorruptRecord(len(ticks), "missing footer")
    return EpisodeLog(header=header, ticks=tuple(ticks), footer=footer)
