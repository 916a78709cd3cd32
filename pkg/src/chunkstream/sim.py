"""Deterministic fixed-rate kinematic simulator of a tabletop with moving objects.

One tick is one control step at 25 Hz. Objects slide in the table plane under
Coulomb deceleration (free mode) or follow a scripted drive (driven mode,
constant speed with an optional turn rate and timed direction changes). The
end-effector is a velocity-limited point with a parallel gripper whose grasp
is a distance + relative-speed predicate.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import vec
from .vec import Quat, Vec3


class SimError(Exception):
    pass


class InfeasiblePlacement(SimError):
    """Raised when rejection sampling cannot satisfy pairwise clearance."""


class UnknownObject(SimError):
    pass


class AttachedObject(SimError):
    pass


class Gripper(str, Enum):
    OPEN = "open"
    CLOSING = "closing"
    CLOSED = "closed"


class GripperCommand(str, Enum):
    OPEN = "open"
    CLOSE = "close"


class ObjectStatus(str, Enum):
    PENDING = "pending"  # scheduled to appear later (long-horizon spawns)
    FREE = "free"
    ATTACHED = "attached"
    PLACED = "placed"
    DROPPED = "dropped"


class EventKind(str, Enum):
    GRASPED = "grasped"
    RELEASED = "released"
    PLACED = "placed"
    DROPPED = "dropped"
    DIRECTION_CHANGE = "direction_change"
    DISTURBANCE = "disturbance"
    WORKSPACE_VIOLATION = "workspace_violation"
    TIMEOUT = "timeout"


class Outcome(str, Enum):
    IN_PROGRESS = "in_progress"
    SUCCESS = "success"
    DROP = "drop"
    TIMEOUT = "timeout"
    ABORTED = "aborted"


@dataclass(frozen=True, slots=True)
class Event:
    kind: EventKind
    tick: int
    object_id: int | None = None


@dataclass(frozen=True, slots=True)
class Pose6D:
    position: Vec3
    orientation: Quat = vec.IDENTITY


@dataclass(frozen=True, slots=True)
class MotionEvent:
    """Scripted change applied at the start of ``tick``.

    The planar velocity is rotated by ``turn`` radians. ``release`` ends driven
    motion, after which Coulomb friction brings the object to rest.
    """

    tick: int
    turn: float = 0.0
    release: bool = False


@dataclass(frozen=True, slots=True)
class MotionProgram:
    driven: bool = False
    turn_rate: float = 0.0  # rad/s, constant-turn-rate (curved) trajectories
    events: tuple[MotionEvent, ...] = ()


FREE_MOTION = MotionProgram()
DRIVEN_MOTION = MotionProgram(driven=True)


@dataclass(frozen=True, slots=True)
class ObjectState:
    id: int
    label: str
    pose: Pose6D
    linear_velocity: Vec3 = vec.ZERO
    angular_velocity: Vec3 = vec.ZERO
    friction: float = 1.0
    radius: float = 0.03
    motion_program: MotionProgram = FREE_MOTION
    status: ObjectStatus = ObjectStatus.FREE
    spawn_tick: int = 0

    @property
    def position(self) -> Vec3:
        return self.pose.position

    @property
    def speed(self) -> float:
        return vec.norm(self.linear_velocity)


@dataclass(frozen=True, slots=True)
class EndEffectorState:
    pose: Pose6D
    linear_velocity: Vec3 = vec.ZERO
    gripper: Gripper = Gripper.OPEN
    attached_object: int | None = None
    grasp_offset: Vec3 = vec.ZERO

    @property
    def position(self) -> Vec3:
        return self.pose.position


@dataclass(frozen=True, slots=True)
class EndEffectorCommand:
    target_position: Vec3 = vec.ZERO
    target_orientation: Quat = vec.TOP_DOWN
    gripper_command: GripperCommand = GripperCommand.OPEN
    hold: bool = False


HOLD = EndEffectorCommand(hold=True)


@dataclass(frozen=True)
class SceneConfig:
    control_rate_hz: float = 25.0
    speed_min: float = 0.0
    speed_max: float = 0.75
    friction_min: float = 0.5
    friction_max: float = 1.5
    n_objects: int = 1
    motion: str = "free"  # free | driven
    drive_duration: tuple[float, float] | None = None  # seconds of driven motion before release; None = forever
    object_radius: float = 0.03
    workspace_min: Vec3 = (-0.5, -0.4, 0.0)
    workspace_max: Vec3 = (0.5, 0.4, 0.5)
    spawn_min: Vec3 = (-0.4, -0.1, 0.0)
    spawn_max: Vec3 = (0.4, 0.3, 0.0)
    target_location: Vec3 = (0.3, -0.3, 0.0)
    home_position: Vec3 = (0.0, -0.3, 0.25)
    container_clearance: float = 0.08
    grasp_tolerance: float = 0.02
    grasp_speed_tolerance: float = 0.25
    place_tolerance: float = 0.05
    v_max: float = 1.5
    timeout_ticks: int = 300
    gravity: float = 9.81
    labels: tuple[str, ...] = ("tennis_ball", "ping_pong_ball", "orange", "apple", "can", "bottle")
    max_placement_attempts: int = 1000

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate_hz

    def validate(self) -> None:
        if self.speed_min > self.speed_max or self.speed_min < 0:
            raise ValueError(f"bad speed range [{self.speed_min}, {self.speed_max}]")
        if self.friction_min > self.friction_max or not (0 <= self.friction_min and self.friction_max <= 10):
            raise ValueError(f"bad friction range [{self.friction_min}, {self.friction_max}]")
        if self.n_objects < 0:
            raise ValueError("n_objects must be non-negative")
        if self.motion not in ("free", "driven"):
            raise ValueError(f"motion must be 'free' or 'driven', got {self.motion!r}")
        if self.drive_duration is not None and not (0 <= self.drive_duration[0] <= self.drive_duration[1]):
            raise ValueError(f"bad drive_duration {self.drive_duration}")
        if self.control_rate_hz <= 0 or self.object_radius <= 0 or self.v_max <= 0:
            raise ValueError("control_rate_hz, object_radius and v_max must be positive")
        for a, b in ((self.workspace_min, self.workspace_max), (self.spawn_min, self.spawn_max)):
            if any(lo > hi for lo, hi in zip(a, b)):
                raise ValueError(f"box min {a} exceeds max {b}")


@dataclass(frozen=True)
class WorldState:
    tick: int
    dt: float
    objects: tuple[ObjectState, ...]
    end_effector: EndEffectorState
    config: SceneConfig
    seed: int
    events: tuple[Event, ...] = ()
    gravity: float = 9.81

    @property
    def workspace_bounds(self) -> tuple[Vec3, Vec3]:
        return self.config.workspace_min, self.config.workspace_max

    @property
    def target_location(self) -> Vec3:
        return self.config.target_location

    def object(self, object_id: int) -> ObjectState:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise UnknownObject(object_id)


def home_end_effector(config: SceneConfig) -> EndEffectorState:
    return EndEffectorState(pose=Pose6D(config.home_position, vec.TOP_DOWN))


def _seed64(seed: int) -> int:
    return int(seed) & 0xFFFF_FFFF_FFFF_FFFF


def spawn_scene(config: SceneConfig, seed: int) -> WorldState:
    """Sample a scene: positions with pairwise clearance, uniform speeds, headings and friction."""
    config.validate()
    rng = np.random.default_rng(_seed64(seed))
    r = config.object_radius
    placed: list[Vec3] = []
    objects = []
    motion = DRIVEN_MOTION if config.motion == "driven" else FREE_MOTION
    # drive durations come from their own stream so enabling them leaves every other draw unchanged
    drive_rng = np.random.default_rng((_seed64(seed), 1))
    for i in range(config.n_objects):
        for _ in range(config.max_placement_attempts):
            x = float(rng.uniform(config.spawn_min[0], config.spawn_max[0]))
            y = float(rng.uniform(config.spawn_min[1], config.spawn_max[1]))
            p = (x, y, r)
            if vec.hdist(p, config.target_location) < config.container_clearance + r:
                continue
            if all(vec.hdist(p, q) >= 2 * r for q in placed):
                break
        else:
            raise InfeasiblePlacement(
                f"could not place object {i} of {config.n_objects} after "
                f"{config.max_placement_attempts} attempts"
            )
        placed.append(p)
        speed = float(rng.uniform(config.speed_min, config.speed_max))
        heading = float(rng.uniform(0.0, 2.0 * math.pi))
        friction = float(rng.uniform(config.friction_min, config.friction_max))
        velocity = (speed * math.cos(heading), speed * math.sin(heading), 0.0)
        program = motion
        if motion.driven and config.drive_duration is not None:
            seconds = float(drive_rng.uniform(*config.drive_duration))
            program = MotionProgram(driven=True, events=(MotionEvent(round(seconds / config.dt), release=True),))
        objects.append(
            ObjectState(
                id=i,
                label=config.labels[i % len(config.labels)],
                pose=Pose6D(p),
                linear_velocity=velocity,
                friction=friction,
                radius=r,
                motion_program=program,
            )
        )
    return WorldState(
        tick=0,
        dt=config.dt,
        objects=tuple(objects),
        end_effector=home_end_effector(config),
        config=config,
        seed=_seed64(seed),
        gravity=config.gravity,
    )


def advance_object(obj: ObjectState, dt: float, gravity: float) -> ObjectState:
    """One tick of free or driven motion. Shared by ``step`` and ``predict_pose``."""
    v = obj.linear_velocity
    pos = vec.add(obj.pose.position, vec.scale(v, dt))
    orientation = vec.quat_integrate(obj.pose.orientation, obj.angular_velocity, dt)
    program = obj.motion_program
    if program.driven:
        if program.turn_rate:
            v = vec.rotate_z(v, program.turn_rate * dt)
    else:
        speed = vec.norm(v)
        if speed > 0.0:
            new_speed = max(0.0, speed - obj.friction * gravity * dt)
            v = vec.scale(v, new_speed / speed) if new_speed > 0.0 else vec.ZERO
    return dataclasses.replace(obj, pose=Pose6D(pos, orientation), linear_velocity=v)


def predict_pose(obj: ObjectState, horizon: float, dt: float = 1.0 / 25.0, gravity: float = 9.81) -> Pose6D:
    """Extrapolate ``obj`` over ``horizon`` seconds, rounded up to whole ticks."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    ticks = math.ceil(horizon / dt - 1e-9)
    for _ in range(ticks):
        obj = advance_object(obj, dt, gravity)
    return obj.pose


def move_end_effector(ee: EndEffectorState, target: Vec3, orientation: Quat, v_max: float, dt: float) -> EndEffectorState:
    delta = vec.sub(target, ee.pose.position)
    d = vec.norm(delta)
    max_step = v_max * dt
    if d <= max_step:
        new_pos = target
    else:
        new_pos = vec.add(ee.pose.position, vec.scale(delta, max_step / d))
    velocity = vec.scale(vec.sub(new_pos, ee.pose.position), 1.0 / dt)
    return dataclasses.replace(ee, pose=Pose6D(new_pos, orientation), linear_velocity=velocity)


def step(world: WorldState, command: EndEffectorCommand) -> WorldState:
    """Advance the world by exactly one tick under ``command``."""
    cfg = world.config
    tick = world.tick
    dt = world.dt
    lo, hi = cfg.workspace_min, cfg.workspace_max
    events: list[Event] = []

    # scripted direction changes apply before integration
    objects = list(world.objects)
    for i, obj in enumerate(objects):
        if obj.status is not ObjectStatus.FREE or not obj.motion_program.events:
            continue
        for ev in obj.motion_program.events:
            if ev.tick != tick:
                continue
            if ev.release:
                obj = dataclasses.replace(
                    obj, motion_program=dataclasses.replace(obj.motion_program, driven=False, turn_rate=0.0)
                )
            if ev.turn:
                obj = dataclasses.replace(obj, linear_velocity=vec.rotate_z(obj.linear_velocity, ev.turn))
                events.append(Event(EventKind.DIRECTION_CHANGE, tick, obj.id))
        objects[i] = obj

    # the gripper acts at the pose the tick starts from, then the arm moves
    ee = world.end_effector
    if not command.hold:
        if command.gripper_command is GripperCommand.CLOSE and ee.gripper is not Gripper.CLOSED:
            best = None
            for i, obj in enumerate(objects):
                if obj.status is not ObjectStatus.FREE:
                    continue
                d = vec.dist(obj.pose.position, ee.pose.position)
                if d > cfg.grasp_tolerance:
                    continue
                rel = vec.dist(obj.linear_velocity, ee.linear_velocity)
                if rel > cfg.grasp_speed_tolerance:
                    continue
                if best is None or d < best[0]:
                    best = (d, i)
            if best is None:
                ee = dataclasses.replace(ee, gripper=Gripper.CLOSED)
            else:
                obj = objects[best[1]]
                offset = vec.sub(obj.pose.position, ee.pose.position)
                objects[best[1]] = dataclasses.replace(
                    obj, status=ObjectStatus.ATTACHED, linear_velocity=ee.linear_velocity
                )
                ee = dataclasses.replace(ee, gripper=Gripper.CLOSED, attached_object=obj.id, grasp_offset=offset)
                events.append(Event(EventKind.GRASPED, tick, obj.id))
        elif command.gripper_command is GripperCommand.OPEN and ee.gripper is not Gripper.OPEN:
            if ee.attached_object is not None:
                for i, obj in enumerate(objects):
                    if obj.id != ee.attached_object:
                        continue
                    events.append(Event(EventKind.RELEASED, tick, obj.id))
                    p = obj.pose.position
                    rest = (p[0], p[1], obj.radius)
                    if vec.hdist(p, cfg.target_location) <= cfg.place_tolerance:
                        status, kind = ObjectStatus.PLACED, EventKind.PLACED
                    else:
                        status, kind = ObjectStatus.DROPPED, EventKind.DROPPED
                    objects[i] = dataclasses.replace(
                        obj, status=status, pose=Pose6D(rest, obj.pose.orientation), linear_velocity=vec.ZERO
                    )
                    events.append(Event(kind, tick, obj.id))
            ee = dataclasses.replace(ee, gripper=Gripper.OPEN, attached_object=None, grasp_offset=vec.ZERO)

    if command.hold:
        ee = dataclasses.replace(ee, linear_velocity=vec.ZERO)
    else:
        target = command.target_position
        if not vec.in_box(target, lo, hi):
            events.append(Event(EventKind.WORKSPACE_VIOLATION, tick))
            target = vec.clamp_box(target, lo, hi)
        ee = move_end_effector(ee, target, command.target_orientation, cfg.v_max, dt)

    for i, obj in enumerate(objects):
        if obj.status is ObjectStatus.FREE:
            objects[i] = advance_object(obj, dt, world.gravity)
        elif obj.status is ObjectStatus.ATTACHED:
            objects[i] = dataclasses.replace(
                obj,
                pose=Pose6D(vec.add(ee.pose.position, ee.grasp_offset), obj.pose.orientation),
                linear_velocity=ee.linear_velocity,
            )

    for i, obj in enumerate(objects):
        if obj.status is ObjectStatus.FREE and not vec.in_box(obj.pose.position, lo, hi):
            objects[i] = dataclasses.replace(obj, status=ObjectStatus.DROPPED, linear_velocity=vec.ZERO)
            events.append(Event(EventKind.DROPPED, tick, obj.id))
        elif obj.status is ObjectStatus.PENDING and obj.spawn_tick <= tick + 1:
            objects[i] = dataclasses.replace(obj, status=ObjectStatus.FREE)

    return dataclasses.replace(
        world,
        tick=tick + 1,
        objects=tuple(objects),
        end_effector=ee,
        events=world.events + tuple(events) if events else world.events,
    )


def apply_disturbance(world: WorldState, object_id: int, impulse: Vec3) -> WorldState:
    """Add ``impulse`` (a velocity change) to a free object and log it at the current tick."""
    objects = list(world.objects)
    for i, obj in enumerate(objects):
        if obj.id != object_id:
            continue
        if obj.status is ObjectStatus.ATTACHED:
            raise AttachedObject(object_id)
        if obj.status is not ObjectStatus.FREE:
            raise UnknownObject(f"object {object_id} is {obj.status.value}, not in play")
        objects[i] = dataclasses.replace(obj, linear_velocity=vec.add(obj.linear_velocity, impulse))
        return dataclasses.replace(
            world,
            objects=tuple(objects),
            events=world.events + (Event(EventKind.DISTURBANCE, world.tick, object_id),),
        )
    raise UnknownObject(object_id)


def evaluate_outcome(world: WorldState, scenario) -> Outcome:
    """Terminal classification. ``scenario`` needs ``instructed_ids`` and ``timeout_ticks``.

    Precedence: Aborted > Drop > Success > Timeout.
    """
    instructed = set(scenario.instructed_ids)
    placed = set()
    for ev in world.events:
        if ev.kind is EventKind.WORKSPACE_VIOLATION:
            return Outcome.ABORTED
    for ev in world.events:
        if ev.kind is EventKind.DROPPED and ev.object_id in instructed:
            return Outcome.DROP
        if ev.kind is EventKind.PLACED:
            placed.add(ev.object_id)
    if instructed and instructed <= placed:
        return Outcome.SUCCESS
    if world.tick >= scenario.timeout_ticks:
        return Outcome.TIMEOUT
    return Outcome.IN_PROGRESS
