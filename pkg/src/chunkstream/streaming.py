"""Chunk execution runtime: latency models, schedulers and the episode driver.

Four executor modes reproduce the ablation grid:

========================  ==============  ===========================================
mode                      inference       execution
========================  ==============  ===========================================
``naive``      [1]        serialized      chunk from its first (stale) action
``laas``       [2]        serialized      stale prefix dropped, index-aligned
``ci``         [3]        continuous      newest chunk from its first (stale) action
``ci-laas``    [7]        continuous      newest delivered chunk covering the tick
========================  ==============  ===========================================

The deterministic tick pipeline is the reference semantics. Inference started
at tick ``s`` sees the observation of tick ``s`` and its chunk is delivered at
``s + m``; at most one inference is in flight.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import deque
import time
from collections.abc import Callable
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import sim
from .chunk import ActionChunk
from .episode import (
    SCHEMA_VERSION,
    EpisodeFooter,
    EpisodeHeader,
    EpisodeLog,
    completion_time,
    path_length,
    tick_record,
)
from .expert import (
    ExpertObservation,
    ExpertParams,
    ExpertState,
    Phase,
    estimate_velocity,
    expert_rollout,
    expert_step,
    observe,
    reconcile_phase,
)
from .sim import HOLD, EndEffectorCommand, Event, EventKind, Outcome, WorldState

log = logging.getLogger(__name__)


class PolicyFailure(Exception):
    """A policy could not produce a chunk; the episode is aborted."""


class ExecutorMode(str, Enum):
    SERIALIZED_NAIVE = "naive"
    SERIALIZED_LAAS = "laas"
    CONTINUOUS_ONLY = "ci"
    CONTINUOUS_LAAS = "ci-laas"

    @property
    def continuous(self) -> bool:
        return self in (ExecutorMode.CONTINUOUS_ONLY, ExecutorMode.CONTINUOUS_LAAS)

    @property
    def laas(self) -> bool:
        return self in (ExecutorMode.SERIALIZED_LAAS, ExecutorMode.CONTINUOUS_LAAS)


ABLATION_ROWS = {
    ExecutorMode.SERIALIZED_NAIVE: "[1]",
    ExecutorMode.SERIALIZED_LAAS: "[2]",
    ExecutorMode.CONTINUOUS_ONLY: "[3]",
    ExecutorMode.CONTINUOUS_LAAS: "[7]",
}


@dataclass(frozen=True)
class LatencyModel:
    """Inference delay in ticks: constant (``low == high``), uniform per cycle,
    or an explicit per-cycle ``schedule`` (the last entry repeats)."""

    low: int
    high: int
    seed: int = 0
    schedule: tuple[int, ...] = ()

    def __post_init__(self):
        if self.low < 0 or self.low > self.high:
            raise ValueError(f"invalid latency range [{self.low}, {self.high}]")
        if self.schedule and (min(self.schedule) != self.low or max(self.schedule) != self.high):
            raise ValueError("schedule bounds must match low/high")

    @classmethod
    def constant(cls, m: int) -> "LatencyModel":
        return cls(m, m)

    @classmethod
    def uniform(cls, low: int, high: int, seed: int) -> "LatencyModel":
        return cls(low, high, seed)

    @classmethod
    def scheduled(cls, delays) -> "LatencyModel":
        delays = tuple(int(d) for d in delays)
        if not delays:
            raise ValueError("empty latency schedule")
        return cls(min(delays), max(delays), 0, delays)

    def draw(self, cycle: int) -> int:
        if self.schedule:
            return self.schedule[min(cycle, len(self.schedule) - 1)]
        if self.low == self.high:
            return self.low
        return int(np.random.default_rng((self.seed, cycle)).integers(self.low, self.high + 1))

    def describe(self) -> str:
        if self.schedule:
            return "scheduled:" + ",".join(map(str, self.schedule))
        if self.low == self.high:
            return f"constant:{self.low}"
        return f"uniform:{self.low}-{self.high}:{self.seed}"


@dataclass(frozen=True)
class InFlight:
    chunk: ActionChunk | None  # None while a dispatched inference is still running
    started_at: int
    completes_at: int | None
    handle: object = None


@dataclass(frozen=True)
class ExecutionContext:
    """What the runtime did before an inference call and what it will do next.

    ``controller`` is the policy state attached to the last executed chunk
    action and ``idle_ticks`` counts the consecutive hold ticks since then.
    ``committed`` lists the ``(command, controller_state)`` pairs the executor
    will issue from this tick on if no new chunk arrives, covering the last
    measured inference delay (empty before the first delivery).
    """

    controller: object = None
    idle_ticks: int = 0
    committed: tuple = ()


@dataclass(frozen=True)
class ExecutorState:
    mode: ExecutorMode
    latency: LatencyModel
    gap_behavior: str = "hold"  # hold | repeat-last
    buffer: tuple[ActionChunk, ...] = ()
    in_flight: InFlight | None = None
    cursor: tuple[ActionChunk, int] | None = None  # (chunk, next action index) for non-aligned modes
    tick: int | None = None
    cycles: int = 0
    last_command: EndEffectorCommand | None = None
    source: str = "hold"
    phase: Phase | None = None
    controller: object = None  # policy controller state after the last executed chunk action
    idle: int = 0  # consecutive hold ticks
    measured_latency: int | None = None  # delay of the most recent delivery
    delays: tuple[int, ...] = ()  # per-cycle delivery delays, in cycle order
    holds: int = 0
    coverage_gaps: int = 0
    deliveries: int = 0

    def __post_init__(self):
        if self.gap_behavior not in ("hold", "repeat-last"):
            raise ValueError(f"gap_behavior must be hold or repeat-last, got {self.gap_behavior!r}")


def select_chunk(buffer, tick: int) -> ActionChunk | None:
    """Newest delivered chunk covering ``tick``; anything delivered later is invisible."""
    best = None
    for chunk in buffer:
        if chunk.delivery_tick is None or chunk.delivery_tick > tick or not chunk.covers(tick):
            continue
        if best is None or chunk.start_tick > best.start_tick:
            best = chunk
    return best


def select_action(buffer, tick: int) -> EndEffectorCommand:
    chunk = select_chunk(buffer, tick)
    return HOLD if chunk is None else chunk.action_at(tick)


def _gap_command(state: ExecutorState) -> EndEffectorCommand:
    if state.gap_behavior == "repeat-last" and state.last_command is not None:
        return state.last_command
    return HOLD


def _scheduled(state: ExecutorState, buffer, cursor, tick: int, k: int):
    """Command and controller state the executor would issue at ``tick + k`` with no new chunk."""
    if state.mode is ExecutorMode.CONTINUOUS_LAAS:
        chunk = select_chunk(buffer, tick + k)
        index = None if chunk is None else tick + k - chunk.start_tick
    elif cursor is not None and cursor[1] + k <= cursor[0].horizon:
        chunk, index = cursor[0], cursor[1] + k
    else:
        chunk = index = None
    if chunk is None:
        return _gap_command(state), None
    return chunk.actions[index], None if chunk.next_states is None else chunk.next_states[index]


def committed_schedule(state: ExecutorState, buffer, cursor, tick: int, length: int) -> tuple:
    return tuple(_scheduled(state, buffer, cursor, tick, k) for k in range(length))


def executor_tick(
    state: ExecutorState,
    tick: int,
    observe_fn: Callable[[], ExpertObservation],
    infer: Callable[..., ActionChunk],
    dispatch=None,
) -> tuple[EndEffectorCommand, ExecutorState]:
    """Advance the scheduler one tick and pick the command to execute.

    ``infer`` is called as ``infer(observation, context)`` with an
    ``ExecutionContext`` describing what the runtime did and has committed to.
    With ``dispatch`` (see ``ThreadedDispatch``) inference runs elsewhere:
    ``dispatch.submit(observation, context, tick)`` returns a handle and
    ``dispatch.poll(handle)`` returns the chunk once it has arrived, so the
    delay is whatever the worker took and ``latency`` is not consulted.
    """
    if state.tick is not None and tick != state.tick + 1:
        raise ValueError(f"executor ticks must advance by one: {state.tick} -> {tick}")
    mode = state.mode
    buffer = tuple(c for c in state.buffer if c.end_tick >= tick)
    in_flight = state.in_flight
    cursor = state.cursor
    cycles = state.cycles
    deliveries = state.deliveries
    measured = state.measured_latency
    delays = state.delays

    def deliver(flight: InFlight):
        nonlocal buffer, cursor, deliveries, measured, delays
        deliveries += 1
        measured = tick - flight.started_at
        delays = delays + (measured,)
        chunk = flight.chunk.delivered(tick)
        if buffer and buffer[-1].start_tick >= chunk.start_tick:
            raise AssertionError("buffer start ticks must increase")
        buffer = buffer + (chunk,)
        if mode is ExecutorMode.SERIALIZED_LAAS:
            cursor = (chunk, tick - chunk.start_tick)
        elif mode is not ExecutorMode.CONTINUOUS_LAAS:
            cursor = (chunk, 0)

    if in_flight is not None and in_flight.handle is not None:
        arrived = dispatch.poll(in_flight.handle)
        if arrived is not None:
            if arrived.start_tick != in_flight.started_at:
                raise PolicyFailure(f"policy returned chunk for tick {arrived.start_tick} at tick {in_flight.started_at}")
            deliver(dataclasses.replace(in_flight, chunk=arrived, completes_at=tick))
            in_flight = None
    elif in_flight is not None and in_flight.completes_at == tick:
        deliver(in_flight)
        in_flight = None

    if mode.continuous:
        start = in_flight is None
    else:
        start = in_flight is None and (cursor is None or cursor[1] > cursor[0].horizon)
    if start:
        obs = observe_fn()
        context = ExecutionContext(
            state.controller,
            state.idle,
            committed_schedule(state, buffer, cursor, tick, measured or 0),
        )
        if dispatch is not None:
            in_flight = InFlight(None, tick, None, dispatch.submit(obs, context, tick))
            cycles += 1
        else:
            fresh = infer(obs, context)
            if fresh.start_tick != tick:
                raise PolicyFailure(f"policy returned chunk for tick {fresh.start_tick} at tick {tick}")
            m = state.latency.draw(cycles)
            cycles += 1
            in_flight = InFlight(fresh, tick, tick + m)
            if m == 0:
                deliver(in_flight)
                in_flight = None

    phase = state.phase
    controller = state.controller
    if mode is ExecutorMode.CONTINUOUS_LAAS:
        chunk = select_chunk(buffer, tick)
        index = tick - chunk.start_tick if chunk is not None else None
    elif cursor is not None and cursor[1] <= cursor[0].horizon:
        chunk, index = cursor
        cursor = (chunk, index + 1)
    else:
        chunk = index = None

    if chunk is None:
        command = _gap_command(state)
        source = "hold"
        holds = state.holds + 1
        idle = state.idle + 1
        # continuous modes only: a gap after the first delivery means n is too small for m
        gaps = state.coverage_gaps + (1 if mode.continuous and deliveries else 0)
    else:
        command = chunk.actions[index]
        source = f"chunk:{chunk.start_tick}:{chunk.start_tick + index}"
        holds, gaps = state.holds, state.coverage_gaps
        idle = 0
        if chunk.phases is not None:
            phase = chunk.phases[index]
        if chunk.next_states is not None:
            controller = chunk.next_states[index]

    new_state = dataclasses.replace(
        state,
        buffer=buffer,
        in_flight=in_flight,
        cursor=cursor,
        tick=tick,
        cycles=cycles,
        last_command=command if not command.hold else state.last_command,
        source=source,
        phase=phase,
        controller=controller,
        idle=idle,
        measured_latency=measured,
        delays=delays,
        holds=holds,
        coverage_gaps=gaps,
        deliveries=deliveries,
    )
    return command, new_state


# -- policies ----------------------------------------------------------------


class OraclePolicy:
    """Chunk policy backed by the state-machine expert's frozen-belief rollout.

    A new rollout starts from the controller state left by the last command the
    runtime actually executed and first replays the commands the runtime has
    already committed to, so the expert plans from where the arm will be once
    the chunk can take effect. Without a context the policy falls back to the
    state its previous chunk planned for the observation tick.
    """

    name = "oracle"
    uses_execution_feedback = True

    def __init__(self, horizon: int = 20, params: ExpertParams | None = None):
        self.horizon = horizon
        self.params = params or ExpertParams()
        self.reset()

    def reset(self) -> None:
        self._plan: dict[int, ExpertState] = {}
        self._last = ExpertState()

    def infer(self, observation: ExpertObservation, context: ExecutionContext | None = None) -> ActionChunk:
        if context is not None and context.controller is not None:
            state = context.controller
        else:
            state = self._plan.get(observation.tick, self._last)
        prefix = ()
        if context is not None:
            if context.idle_ticks:
                state = ExpertState(state.phase)
            prefix = context.committed
        chunk = expert_rollout(observation, state, self.horizon, self.params, prefix)
        self._plan = {chunk.start_tick + k + 1: p for k, p in enumerate(chunk.next_states)}
        self._last = chunk.next_states[-1]
        return chunk


class ObservationModel:
    """Per-episode observation pipeline: noise, and optional windowed velocity estimates."""

    def __init__(self, instruction, noise_sigma: float = 0.0, velocity_source: str = "true", window: int = 8):
        if velocity_source not in ("true", "window"):
            raise ValueError(f"velocity_source must be true or window, got {velocity_source!r}")
        self.instruction = instruction
        self.noise_sigma = noise_sigma
        self.velocity_source = velocity_source
        self.window = window
        self._history: dict[int, deque] = {}
        self._cache: tuple[int, ExpertObservation] | None = None

    def __call__(self, world: WorldState) -> ExpertObservation:
        if self._cache is not None and self._cache[0] == world.tick:
            return self._cache[1]
        obs = observe(world, self.instruction, noise_sigma=self.noise_sigma)
        if self.velocity_source == "window":
            estimates = {}
            for o in obs.objects:
                hist = self._history.setdefault(o.id, deque(maxlen=self.window))
                if o.status is not sim.ObjectStatus.FREE:
                    hist.clear()
                    continue
                hist.append((world.tick, o.position))
                estimates[o.id] = estimate_velocity(list(hist), world.dt) if len(hist) >= 2 else sim.vec.ZERO
            obs = dataclasses.replace(
                obs,
                objects=tuple(
                    dataclasses.replace(o, velocity=estimates[o.id]) if o.id in estimates else o for o in obs.objects
                ),
            )
        self._cache = (world.tick, obs)
        return obs


# -- episode driver ------------------------------------------------------------


def _apply_disturbances(world: WorldState, scenario) -> WorldState:
    for tick, object_id, impulse in getattr(scenario, "disturbances", ()):
        if tick != world.tick:
            continue
        try:
            obj = world.object(object_id)
        except sim.UnknownObject:
            continue
        if obj.status is sim.ObjectStatus.FREE:
            world = sim.apply_disturbance(world, object_id, impulse)
    return world


def _drive(world: WorldState, scenario, decide, header: EpisodeHeader, diagnostics) -> EpisodeLog:
    records = []
    outcome = sim.evaluate_outcome(world, scenario)
    phase = None
    while outcome is Outcome.IN_PROGRESS:
        before = len(world.events)
        world = _apply_disturbances(world, scenario)
        try:
            command, source, phase = decide(world)
        except PolicyFailure as exc:
            log.warning("policy failure at tick %d: %s", world.tick, exc)
            diagnostics["policy_failure"] = str(exc)
            outcome = Outcome.ABORTED
            break
        nxt = sim.step(world, command)
        records.append(tick_record(world, command, source, phase.value if phase else None, nxt.events[before:]))
        world = nxt
        outcome = sim.evaluate_outcome(world, scenario)
    terminal_events: tuple[Event, ...] = ()
    if outcome is Outcome.TIMEOUT:
        terminal_events = (Event(EventKind.TIMEOUT, world.tick),)
    records.append(tick_record(world, None, "terminal", phase.value if phase else None, terminal_events))
    placed_ids = {e.object_id for e in world.events if e.kind is EventKind.PLACED}
    instructed = sorted(scenario.instructed_ids)
    diagnostics["placed_count"] = sum(1 for i in instructed if i in placed_ids)
    footer = EpisodeFooter(
        outcome=outcome.value,
        success=outcome is Outcome.SUCCESS,
        path_length=path_length(records),
        completion_time=completion_time(records, world.dt),
        placed=tuple((i, i in placed_ids) for i in instructed),
        diagnostics=diagnostics,
    )
    return EpisodeLog(header=header, ticks=tuple(records), footer=footer)


def _header(world, scenario, mode: str, latency: str, policy: str, config_digest: str) -> EpisodeHeader:
    descriptor = scenario.descriptor() if hasattr(scenario, "descriptor") else {}
    return EpisodeHeader(
        schema_version=SCHEMA_VERSION,
        seed=int(getattr(scenario, "seed", world.seed)),
        config_digest=config_digest,
        scenario=descriptor,
        dt=world.dt,
        mode=mode,
        latency=latency,
        policy=policy,
    )


def _observation_model(scenario, params: ExpertParams) -> ObservationModel:
    return ObservationModel(
        scenario.instruction,
        noise_sigma=getattr(scenario, "noise_sigma", 0.0),
        velocity_source=params.velocity_source,
        window=params.velocity_window,
    )


def run_episode(
    world: WorldState,
    policy,
    mode: ExecutorMode,
    latency_model: LatencyModel,
    scenario,
    *,
    gap_behavior: str = "hold",
    config_digest: str = "",
    params: ExpertParams | None = None,
) -> EpisodeLog:
    """Drive the simulator with chunks from ``policy`` under ``mode`` until a terminal outcome."""
    mode = ExecutorMode(mode)
    if params is None:
        params = getattr(policy, "params", None)
        params = params if isinstance(params, ExpertParams) else ExpertParams()
    observe_world = _observation_model(scenario, params)
    policy.reset()
    state = ExecutorState(mode=mode, latency=latency_model, gap_behavior=gap_behavior)

    feedback = getattr(policy, "uses_execution_feedback", False)

    def infer(obs, context):
        return policy.infer(obs, context) if feedback else policy.infer(obs)

    def decide(w: WorldState):
        nonlocal state
        command, state = executor_tick(state, w.tick, lambda: observe_world(w), infer)
        return command, state.source, state.phase

    diagnostics: dict = {}
    header = _header(world, scenario, mode.value, latency_model.describe(), getattr(policy, "name", "policy"), config_digest)
    episode = _drive(world, scenario, decide, header, diagnostics)
    diagnostics.update(holds=state.holds, coverage_gaps=state.coverage_gaps, inference_cycles=state.cycles)
    if state.coverage_gaps:
        log.debug("episode had %d coverage-gap ticks (n=%s)", state.coverage_gaps, getattr(policy, "horizon", "?"))
    return episode


def run_closed_loop(
    world: WorldState,
    scenario,
    params: ExpertParams | None = None,
    *,
    config_digest: str = "",
) -> EpisodeLog:
    """Zero-latency expert: one ``expert_step`` per tick on the current observation."""
    params = params or ExpertParams()
    observe_world = _observation_model(scenario, params)
    state = ExpertState()

    def decide(w: WorldState):
        nonlocal state
        obs = observe_world(w)
        current = reconcile_phase(obs, state.phase, params)
        command, state = expert_step(obs, state, params)
        return command, "closed-loop", current

    header = _header(world, scenario, "closed-loop", "constant:0", "expert", config_digest)
    return _drive(world, scenario, decide, header, {})


class ThreadedDispatch:
    """Runs inference on a single worker thread.

    A chunk becomes visible to the execution loop once the worker has
    finished and at least ``latency`` seconds have passed since submission.
    Polling never blocks, and each chunk is handed over whole.
    """

    def __init__(self, infer: Callable[..., ActionChunk], latency: float = 0.0):
        self._infer = infer
        self.latency = latency
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="inference")

    def submit(self, observation, context, tick: int) -> Future:
        started = time.monotonic()

        def job():
            chunk = self._infer(observation, context)
            remaining = self.latency - (time.monotonic() - started)
            if remaining > 0:
                time.sleep(remaining)
            return chunk

        return self._pool.submit(job)

    def poll(self, handle: Future) -> ActionChunk | None:
        if not handle.done():
            return None
        return handle.result()  # re-raises policy errors on the execution loop

    def close(self) -> None:
        self._pool.shutdown(wait=True, cancel_futures=True)


def run_wall_clock(
    world: WorldState,
    policy,
    mode: ExecutorMode,
    scenario,
    *,
    period: float = 0.04,
    latency: float = 0.2,
    gap_behavior: str = "hold",
    config_digest: str = "",
) -> EpisodeLog:
    """Real-time variant of ``run_episode``: ticks are paced every ``period``
    seconds and the policy runs on a worker thread.

    The footer diagnostics record the delivery delay of every cycle; feeding
    them to ``LatencyModel.scheduled`` replays the episode under the
    deterministic pipeline.
    """
    mode = ExecutorMode(mode)
    params = getattr(policy, "params", None)
    params = params if isinstance(params, ExpertParams) else ExpertParams()
    observe_world = _observation_model(scenario, params)
    policy.reset()
    feedback = getattr(policy, "uses_execution_feedback", False)
    dispatch = ThreadedDispatch(
        (lambda obs, context: policy.infer(obs, context)) if feedback else (lambda obs, context: policy.infer(obs)),
        latency,
    )
    state = ExecutorState(mode=mode, latency=LatencyModel.constant(0), gap_behavior=gap_behavior)
    first = world.tick
    t0 = time.monotonic()

    def decide(w: WorldState):
        nonlocal state
        wait = t0 + (w.tick - first) * period - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        command, state = executor_tick(state, w.tick, lambda: observe_world(w), None, dispatch)
        return command, state.source, state.phase

    diagnostics: dict = {}
    header = _header(world, scenario, mode.value, f"wall:{latency:g}s/{period:g}s", getattr(policy, "name", "policy"),
                     config_digest)
    try:
        episode = _drive(world, scenario, decide, header, diagnostics)
    finally:
        dispatch.close()
    diagnostics.update(holds=state.holds, coverage_gaps=state.coverage_gaps, inference_cycles=state.cycles,
                       delays=list(state.delays))
    return episode


def coverage_ok(horizon: int, latency: LatencyModel, mode: ExecutorMode = ExecutorMode.CONTINUOUS_LAAS) -> bool:
    """True when a continuous mode never runs out of actions after the first delivery.

    A chunk observed at ``s`` arrives at ``s + m1`` and is replaced at
    ``s + m1 + m2``. Index-aligned execution needs it to reach that tick
    (``n >= m1 + m2 - 1``); replay from index 0 only needs ``n + 1 >= m2``.
    """
    mode = ExecutorMode(mode)
    if mode is ExecutorMode.CONTINUOUS_LAAS:
        return horizon >= 2 * latency.high - 1
    return horizon + 1 >= latency.high


def ticks_for_latency(seconds: float, dt: float) -> int:
    return math.ceil(seconds / dt - 1e-9)
