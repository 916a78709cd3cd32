"""Four-stage state-machine expert and its frozen-belief chunk rollout.

The controller approaches a hover point above the object's predicted position,
descends while matching the object's planar velocity, closes, lifts, carries
the object over the static container, releases, and returns home. The same
controller is used closed-loop for data collection and, via ``expert_rollout``,
as a chunk-producing oracle for the streaming runtime.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import sim, vec
from .chunk import ActionChunk
from .sim import (
    EndEffectorCommand,
    EndEffectorState,
    GripperCommand,
    MotionProgram,
    ObjectState,
    ObjectStatus,
    Pose6D,
    SceneConfig,
    WorldState,
)
from .vec import Vec3


class ExpertError(Exception):
    pass


class AmbiguousTarget(ExpertError):
    pass


class NoCandidates(ExpertError):
    pass


class DegenerateWindow(ExpertError):
    pass


class Phase(str, Enum):
    APPROACH_OBJECT = "approach_object"
    GRASP_LIFT = "grasp_lift"
    APPROACH_TARGET_PLACE = "approach_target_place"
    RESET = "reset"


PHASE_ORDER = (Phase.APPROACH_OBJECT, Phase.GRASP_LIFT, Phase.APPROACH_TARGET_PLACE, Phase.RESET)


@dataclass(frozen=True, slots=True)
class ExpertState:
    """Controller memory: the phase plus how many consecutive ticks the pending
    gripper precondition (aligned for grasp, seated for release) has held."""

    phase: Phase = Phase.APPROACH_OBJECT
    settled: int = 0


def as_state(state: "ExpertState | Phase") -> ExpertState:
    return state if isinstance(state, ExpertState) else ExpertState(Phase(state))


class SelectorKind(str, Enum):
    BY_LABEL = "by_label"
    BY_RELATIVE_POSITION = "by_relative_position"
    BY_RELATIVE_SPEED = "by_relative_speed"


@dataclass(frozen=True, slots=True)
class TargetSpec:
    """Symbolic instruction.

    ``value`` is the label for ``BY_LABEL``, ``"left"``/``"right"`` for relative
    position (left = smaller x) and ``"faster"``/``"slower"`` for relative speed.
    ``gather_all`` turns a label selector into "place every object with this label",
    picking the lowest free id first.
    """

    kind: SelectorKind
    value: str
    container_id: str = "container"
    gather_all: bool = False


@dataclass(frozen=True, slots=True)
class ObservedObject:
    id: int
    label: str
    position: Vec3
    velocity: Vec3
    status: ObjectStatus = ObjectStatus.FREE
    radius: float = 0.03
    friction: float = 1.0
    driven: bool = False


@dataclass(frozen=True, slots=True)
class ExpertObservation:
    tick: int
    end_effector: EndEffectorState
    objects: tuple[ObservedObject, ...]
    instruction: TargetSpec
    target_location: Vec3
    scene: SceneConfig


@dataclass(frozen=True)
class ExpertParams:
    prediction_horizon: float = 0.23
    hover_offset: float = 0.10
    hover_tolerance: float = 0.02
    lift_height: float = 0.15
    align_tolerance: float = 0.01
    speed_match_tolerance: float = 0.1
    place_height: float = 0.02
    release_tolerance: float = 0.005
    home_tolerance: float = 0.02
    settle_ticks: int = 1
    velocity_window: int = 8
    velocity_source: str = "true"  # true | window


def resolve_target(observation: ExpertObservation) -> int:
    """Map the symbolic instruction to an object id among free objects."""
    spec = observation.instruction
    free = [o for o in observation.objects if o.status is ObjectStatus.FREE]
    if spec.kind is SelectorKind.BY_LABEL:
        matches = [o for o in free if o.label == spec.value]
        if not matches:
            raise NoCandidates(f"no free object labelled {spec.value!r}")
        if len(matches) > 1 and not spec.gather_all:
            raise AmbiguousTarget(f"{len(matches)} objects labelled {spec.value!r}")
        return min(o.id for o in matches)
    if not free:
        raise NoCandidates("no free objects")
    # sort by id first so that max/min keep the lowest id on ties
    free.sort(key=lambda o: o.id)
    if spec.kind is SelectorKind.BY_RELATIVE_POSITION:
        if spec.value == "left":
            return min(free, key=lambda o: o.position[0]).id
        if spec.value == "right":
            return max(free, key=lambda o: o.position[0]).id
    elif spec.kind is SelectorKind.BY_RELATIVE_SPEED:
        if spec.value == "faster":
            return max(free, key=lambda o: vec.norm(o.velocity)).id
        if spec.value == "slower":
            return min(free, key=lambda o: vec.norm(o.velocity)).id
    raise ValueError(f"unknown selector {spec.kind.value}:{spec.value}")


def estimate_velocity(samples: Sequence[tuple[int, Vec3]], dt: float = 1.0 / 25.0) -> Vec3:
    """Per-axis least-squares slope of position against time over a short window."""
    if len(samples) < 2:
        raise DegenerateWindow(f"need at least 2 samples, got {len(samples)}")
    ticks = np.array([s[0] for s in samples], dtype=np.float64)
    if np.any(np.diff(ticks) <= 0):
        raise DegenerateWindow("window ticks must be strictly increasing")
    t = ticks * dt
    pos = np.array([s[1] for s in samples], dtype=np.float64)
    tc = t - t.mean()
    slope = tc @ (pos - pos.mean(axis=0)) / (tc @ tc)
    return vec.as_vec3(slope)


def _belief_object(o: ObservedObject) -> ObjectState:
    return ObjectState(
        id=o.id,
        label=o.label,
        pose=Pose6D(o.position),
        linear_velocity=o.velocity,
        friction=o.friction,
        radius=o.radius,
        motion_program=MotionProgram(driven=o.driven),
        status=o.status,
    )


def _find(observation: ExpertObservation, object_id: int | None) -> ObservedObject | None:
    for o in observation.objects:
        if o.id == object_id:
            return o
    return None


def reconcile_phase(observation: ExpertObservation, phase: Phase, params: ExpertParams | None = None) -> Phase:
    """Correct a remembered phase against what is observable right now.

    An attached object means carrying; carrying without an attachment means the
    object was either released over the container (reset) or never grasped.
    """
    ee = observation.end_effector
    if ee.attached_object is not None:
        return Phase.APPROACH_TARGET_PLACE
    if phase is Phase.APPROACH_TARGET_PLACE:
        if ee.gripper is sim.Gripper.OPEN and vec.hdist(ee.position, observation.target_location) <= observation.scene.place_tolerance:
            return Phase.RESET
        return Phase.GRASP_LIFT
    return phase


def _command(target: Vec3, gripper: GripperCommand, scene: SceneConfig) -> EndEffectorCommand:
    return EndEffectorCommand(
        target_position=vec.clamp_box(target, scene.workspace_min, scene.workspace_max),
        target_orientation=vec.TOP_DOWN,
        gripper_command=gripper,
    )


def _remaining_targets(observation: ExpertObservation) -> bool:
    try:
        resolve_target(observation)
    except NoCandidates:
        return False
    return True


def expert_step(
    observation: ExpertObservation, state: ExpertState | Phase, params: ExpertParams | None = None
) -> tuple[EndEffectorCommand, ExpertState]:
    """One control tick. Returns the command and the controller state for the next tick."""
    params = params or ExpertParams()
    scene = observation.scene
    dt = scene.dt
    ee = observation.end_effector
    home = scene.home_position
    state = as_state(state)
    phase = reconcile_phase(observation, state.phase, params)
    settled = state.settled if phase is state.phase else 0

    if phase is Phase.APPROACH_TARGET_PLACE:
        carried = _find(observation, ee.attached_object)
        radius = carried.radius if carried is not None else scene.object_radius
        tx, ty, tz = observation.target_location
        carry_z = radius + params.lift_height
        place_z = tz + radius + params.place_height
        pos = ee.position
        h = vec.hdist(pos, observation.target_location)
        if h > params.release_tolerance:
            if pos[2] < carry_z - params.hover_tolerance:
                return _command((pos[0], pos[1], carry_z), GripperCommand.CLOSE, scene), ExpertState(phase)
            return _command((tx, ty, carry_z), GripperCommand.CLOSE, scene), ExpertState(phase)
        if abs(pos[2] - place_z) > params.release_tolerance:
            return _command((tx, ty, place_z), GripperCommand.CLOSE, scene), ExpertState(phase)
        # seated over the container: settle, then release
        if settled + 1 < params.settle_ticks:
            return _command((tx, ty, place_z), GripperCommand.CLOSE, scene), ExpertState(phase, settled + 1)
        return _command((tx, ty, place_z), GripperCommand.OPEN, scene), ExpertState(Phase.RESET)

    if phase is Phase.RESET:
        if vec.dist(ee.position, home) < params.home_tolerance and _remaining_targets(observation):
            phase = Phase.APPROACH_OBJECT
        else:
            return _command(home, GripperCommand.OPEN, scene), ExpertState(phase)

    try:
        target = _find(observation, resolve_target(observation))
    except NoCandidates:
        # target lost: nothing left to pick, park at home
        return _command(home, GripperCommand.OPEN, scene), ExpertState(Phase.APPROACH_OBJECT)

    belief = _belief_object(target)
    if phase is Phase.APPROACH_OBJECT:
        predicted = sim.predict_pose(belief, params.prediction_horizon, dt, scene.gravity).position
        hover = (predicted[0], predicted[1], target.position[2] + params.hover_offset)
        hover = vec.clamp_box(hover, scene.workspace_min, scene.workspace_max)
        nxt = Phase.GRASP_LIFT if vec.dist(ee.position, hover) < params.hover_tolerance else phase
        return _command(hover, GripperCommand.OPEN, scene), ExpertState(nxt)

    # grasp: track the object's next-tick position at grasp height, close once
    # velocity-matched alignment has held for settle_ticks
    nxt_pos = sim.predict_pose(belief, dt, dt, scene.gravity).position
    goal = (nxt_pos[0], nxt_pos[1], target.position[2])
    if ee.gripper is not sim.Gripper.OPEN:
        return _command(goal, GripperCommand.OPEN, scene), ExpertState(phase)
    pos = ee.position
    aligned = (
        vec.hdist(pos, target.position) <= params.align_tolerance
        and abs(pos[2] - target.position[2]) <= params.align_tolerance
        and vec.dist(ee.linear_velocity, target.velocity) <= params.speed_match_tolerance
    )
    settled = settled + 1 if aligned else 0
    close = settled >= params.settle_ticks
    return _command(goal, GripperCommand.CLOSE if close else GripperCommand.OPEN, scene), ExpertState(phase, settled)


def observe(
    world: WorldState,
    instruction: TargetSpec,
    *,
    noise_sigma: float = 0.0,
    velocity_override: dict[int, Vec3] | None = None,
) -> ExpertObservation:
    """Snapshot the world as the controller sees it.

    Planar position noise is drawn from a generator keyed on (world seed, tick)
    so repeated observations of the same tick agree. Velocities come from the
    simulator unless ``velocity_override`` supplies windowed estimates.
    """
    rng = np.random.default_rng((world.seed, world.tick, 0x0B5)) if noise_sigma > 0 else None
    observed = []
    for obj in world.objects:
        if obj.status is ObjectStatus.PENDING:
            continue
        pos, vel = obj.pose.position, obj.linear_velocity
        if velocity_override is not None and obj.id in velocity_override:
            vel = velocity_override[obj.id]
        if rng is not None and obj.status is ObjectStatus.FREE:
            n = rng.normal(0.0, noise_sigma, size=2)
            pos = (pos[0] + float(n[0]), pos[1] + float(n[1]), pos[2])
        observed.append(
            ObservedObject(
                id=obj.id,
                label=obj.label,
                position=pos,
                velocity=vel,
                status=obj.status,
                radius=obj.radius,
                friction=obj.friction,
                driven=obj.motion_program.driven,
            )
        )
    return ExpertObservation(
        tick=world.tick,
        end_effector=world.end_effector,
        objects=tuple(observed),
        instruction=instruction,
        target_location=world.target_location,
        scene=world.config,
    )


def belief_world(observation: ExpertObservation) -> WorldState:
    """Rebuild a world from one observation; future scripted events and turn rates are unknown."""
    scene = observation.scene
    return WorldState(
        tick=observation.tick,
        dt=scene.dt,
        objects=tuple(_belief_object(o) for o in observation.objects),
        end_effector=observation.end_effector,
        config=scene,
        seed=0,
        gravity=scene.gravity,
    )


def expert_rollout(
    observation: ExpertObservation,
    state: ExpertState | Phase,
    n: int,
    params: ExpertParams | None = None,
    prefix: Sequence[tuple[EndEffectorCommand, ExpertState | None]] = (),
) -> ActionChunk:
    """Emit ``n + 1`` expert commands by stepping a world frozen at ``observation``.

    ``prefix`` holds commands the runtime has already committed to for the first
    ticks of the chunk, each with the controller state it leaves behind (``None``
    for holds). Over those ticks the belief world advances under the committed
    commands rather than the expert's own, so the rest of the chunk starts from
    where the arm will really be. Every emitted action is still the expert's
    command for the predicted state at its tick.
    """
    if n < 1:
        raise ValueError("chunk horizon must be >= 1")
    params = params or ExpertParams()
    state = as_state(state)
    prefix = tuple(prefix)[:n]
    world = None
    obs = observation
    actions, phases, next_states = [], [], []
    for k in range(n + 1):
        phases.append(reconcile_phase(obs, state.phase, params))
        cmd, after = expert_step(obs, state, params)
        actions.append(cmd)
        next_states.append(after)
        if k < len(prefix):
            cmd, committed = prefix[k]
            # a hold interrupts settling
            after = as_state(committed) if committed is not None else ExpertState(state.phase)
        state = after
        if k < n:
            world = sim.step(world if world is not None else belief_world(observation), cmd)
            obs = observe(world, observation.instruction)
    return ActionChunk(
        start_tick=observation.tick,
        horizon=n,
        actions=tuple(actions),
        phases=tuple(phases),
        next_states=tuple(next_states),
    )
