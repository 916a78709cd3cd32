import dataclasses
import math

import pytest
from hypothesis import given, strategies as st

from chunkstream import sim, vec
from chunkstream.sim import (
    HOLD,
    EndEffectorCommand,
    EventKind,
    GripperCommand,
    MotionEvent,
    MotionProgram,
    ObjectState,
    ObjectStatus,
    Outcome,
    Pose6D,
    SceneConfig,
)

from conftest import SimpleScenario

DT = 1.0 / 25.0


def one_object_world(obj, config=None, ee_pos=None):
    config = config or SceneConfig()
    world = sim.spawn_scene(dataclasses.replace(config, n_objects=0), 0)
    ee = world.end_effector
    if ee_pos is not None:
        ee = dataclasses.replace(ee, pose=Pose6D(ee_pos, vec.TOP_DOWN))
    return dataclasses.replace(world, objects=(obj,), end_effector=ee)


def ball(x=0.0, y=0.0, v=(0.0, 0.0, 0.0), mu=0.0, **kw):
    return ObjectState(0, "tennis_ball", Pose6D((x, y, 0.03)), linear_velocity=v, friction=mu, **kw)


def hold_ticks(world, n):
    for _ in range(n):
        world = sim.step(world, HOLD)
    return world


# -- spawn ------------------------------------------------------------------------


def test_spawn_ranges_default_dynamics():
    cfg = SceneConfig(speed_min=0.0, speed_max=0.75, friction_min=0.5, friction_max=1.5, n_objects=3)
    for seed in range(50):
        w = sim.spawn_scene(cfg, seed)
        assert len(w.objects) == 3
        for o in w.objects:
            assert 0.0 <= o.speed <= 0.75 + 1e-12
            assert 0.5 <= o.friction <= 1.5
        for a in w.objects:
            for b in w.objects:
                if a.id < b.id:
                    assert vec.hdist(a.position, b.position) >= a.radius + b.radius


def test_spawn_zero_speed_range_is_static():
    w = sim.spawn_scene(SceneConfig(speed_min=0.0, speed_max=0.0, n_objects=4), 3)
    assert all(o.linear_velocity == (0.0, 0.0, 0.0) for o in w.objects)


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_spawn_deterministic(seed):
    cfg = SceneConfig(n_objects=2, motion="driven", drive_duration=(1.0, 2.0))
    assert sim.spawn_scene(cfg, seed) == sim.spawn_scene(cfg, seed)


def test_spawn_infeasible_placement():
    cfg = SceneConfig(n_objects=30, spawn_min=(0.0, 0.0, 0.0), spawn_max=(0.05, 0.05, 0.0), max_placement_attempts=50)
    with pytest.raises(sim.InfeasiblePlacement):
        sim.spawn_scene(cfg, 0)


def test_drive_duration_stream_leaves_other_draws_alone():
    plain = sim.spawn_scene(SceneConfig(n_objects=3, motion="driven"), 11)
    timed = sim.spawn_scene(SceneConfig(n_objects=3, motion="driven", drive_duration=(1.0, 4.0)), 11)
    for a, b in zip(plain.objects, timed.objects):
        assert a.pose == b.pose and a.linear_velocity == b.linear_velocity and a.friction == b.friction
        (ev,) = b.motion_program.events
        assert ev.release and 25 <= ev.tick <= 100


@pytest.mark.parametrize(
    "bad",
    [
        dict(speed_min=0.5, speed_max=0.1),
        dict(friction_min=2.0, friction_max=1.0),
        dict(friction_max=11.0),
        dict(motion="rolling"),
        dict(drive_duration=(3.0, 1.0)),
    ],
)
def test_scene_validation(bad):
    with pytest.raises(ValueError):
        sim.spawn_scene(SceneConfig(**bad), 0)


# -- step -------------------------------------------------------------------------------


def test_frictionless_tick_moves_two_centimetres():
    w = sim.step(one_object_world(ball(v=(0.5, 0.0, 0.0))), HOLD)
    assert w.objects[0].position[0] == pytest.approx(0.02, abs=1e-15)
    assert w.tick == 1


def test_coulomb_stop_within_one_tick():
    w = sim.step(one_object_world(ball(v=(0.1, 0.0, 0.0), mu=1.0)), HOLD)
    # independent scalar oracle
    expected_speed = max(0.0, 0.1 - 1.0 * 9.81 * DT)
    assert w.objects[0].speed == expected_speed == 0.0
    assert w.objects[0].position[0] == pytest.approx(0.1 * DT)


def test_coulomb_partial_decay_keeps_direction():
    w = sim.step(one_object_world(ball(v=(0.3, 0.4, 0.0), mu=0.5)), HOLD)
    v = w.objects[0].linear_velocity
    assert vec.norm(v) == pytest.approx(0.5 - 0.5 * 9.81 * DT)
    assert v[0] / v[1] == pytest.approx(0.75)


def test_close_on_far_object_closes_empty():
    w = one_object_world(ball(x=0.05), ee_pos=(0.0, 0.0, 0.03))
    w = sim.step(w, EndEffectorCommand((0.0, 0.0, 0.03), gripper_command=GripperCommand.CLOSE))
    assert w.end_effector.gripper is sim.Gripper.CLOSED
    assert w.end_effector.attached_object is None
    assert not any(e.kind is EventKind.GRASPED for e in w.events)


def test_grasp_then_carry_keeps_offset():
    w = one_object_world(ball(x=0.01), ee_pos=(0.0, 0.0, 0.03))
    w = sim.step(w, EndEffectorCommand((0.0, 0.0, 0.03), gripper_command=GripperCommand.CLOSE))
    assert w.end_effector.attached_object == 0
    assert [e.kind for e in w.events] == [EventKind.GRASPED]
    for target in [(0.0, 0.0, 0.2), (0.2, -0.1, 0.2), (0.3, -0.3, 0.1)]:
        for _ in range(5):
            w = sim.step(w, EndEffectorCommand(target, gripper_command=GripperCommand.CLOSE))
            o = w.objects[0]
            assert o.position == vec.add(w.end_effector.position, w.end_effector.grasp_offset)


def test_grasp_speed_gate():
    w = one_object_world(ball(v=(0.5, 0.0, 0.0)), ee_pos=(0.0, 0.0, 0.03))
    w = sim.step(w, EndEffectorCommand((0.0, 0.0, 0.03), gripper_command=GripperCommand.CLOSE))
    assert w.end_effector.attached_object is None


def carry_to(w, target):
    for _ in range(40):
        w = sim.step(w, EndEffectorCommand(target, gripper_command=GripperCommand.CLOSE))
    return sim.step(w, EndEffectorCommand(target, gripper_command=GripperCommand.OPEN))


def test_release_over_container_places():
    w = one_object_world(ball(x=0.01), ee_pos=(0.0, 0.0, 0.03))
    w = sim.step(w, EndEffectorCommand((0.0, 0.0, 0.03), gripper_command=GripperCommand.CLOSE))
    tx, ty, _ = w.target_location
    w = carry_to(w, (tx - 0.01, ty, 0.05))
    assert [e.kind for e in w.events][-2:] == [EventKind.RELEASED, EventKind.PLACED]
    assert w.objects[0].status is ObjectStatus.PLACED
    assert sim.evaluate_outcome(w, SimpleScenario()) is Outcome.SUCCESS


def test_release_elsewhere_drops():
    w = one_object_world(ball(x=0.01), ee_pos=(0.0, 0.0, 0.03))
    w = sim.step(w, EndEffectorCommand((0.0, 0.0, 0.03), gripper_command=GripperCommand.CLOSE))
    w = carry_to(w, (0.0, 0.2, 0.1))
    assert w.events[-1].kind is EventKind.DROPPED
    assert sim.evaluate_outcome(w, SimpleScenario()) is Outcome.DROP


def test_object_leaving_workspace_drops():
    w = one_object_world(ball(x=0.49, v=(0.5, 0.0, 0.0), motion_program=sim.DRIVEN_MOTION))
    w = sim.step(w, HOLD)
    assert w.objects[0].status is ObjectStatus.DROPPED
    assert w.events[-1] == sim.Event(EventKind.DROPPED, 0, 0)


def test_out_of_box_command_is_violation_and_clamped():
    w = one_object_world(ball())
    w = sim.step(w, EndEffectorCommand((0.0, 0.0, 2.0)))
    assert w.events[-1].kind is EventKind.WORKSPACE_VIOLATION
    assert w.end_effector.position[2] <= w.config.workspace_max[2]
    assert sim.evaluate_outcome(w, SimpleScenario()) is Outcome.ABORTED


def test_end_effector_speed_limit():
    w = one_object_world(ball())
    start = w.end_effector.position
    w = sim.step(w, EndEffectorCommand((0.4, 0.3, 0.4)))
    assert vec.dist(start, w.end_effector.position) == pytest.approx(1.5 * DT)


def test_direction_change_event():
    prog = MotionProgram(driven=True, events=(MotionEvent(2, turn=math.pi),))
    w = one_object_world(ball(v=(0.2, 0.0, 0.0), motion_program=prog))
    w = hold_ticks(w, 3)
    assert w.objects[0].linear_velocity[0] == pytest.approx(-0.2)
    assert [(e.kind, e.tick) for e in w.events] == [(EventKind.DIRECTION_CHANGE, 2)]


def test_release_event_hands_object_to_friction():
    prog = MotionProgram(driven=True, events=(MotionEvent(3, release=True),))
    w = one_object_world(ball(v=(0.2, 0.0, 0.0), mu=0.5, motion_program=prog))
    w = hold_ticks(w, 3)
    assert w.objects[0].speed == 0.2
    w = hold_ticks(w, 1)
    assert w.objects[0].speed == pytest.approx(0.2 - 0.5 * 9.81 * DT)


def test_pending_object_spawns_on_schedule():
    w = one_object_world(ball(status=ObjectStatus.PENDING, spawn_tick=3))
    w = hold_ticks(w, 2)
    assert w.objects[0].status is ObjectStatus.PENDING
    w = hold_ticks(w, 1)
    assert w.objects[0].status is ObjectStatus.FREE


# -- predict_pose ------------------------------------------------------------------------------


def test_predict_pose_quantizes_to_six_ticks():
    p = sim.predict_pose(ball(v=(0.5, 0.0, 0.0)), 0.23)
    # oracle: six whole ticks of 0.04 s
    x = 0.0
    for _ in range(6):
        x += 0.5 * DT
    assert p.position[0] == x
    assert p.position[0] == pytest.approx(0.12)


def test_predict_pose_static_unchanged():
    obj = ball(x=0.1, y=-0.2)
    for h in (0.0, 0.04, 0.23, 3.0):
        assert sim.predict_pose(obj, h).position == obj.position


def test_predict_pose_stop_within_first_tick():
    p = sim.predict_pose(ball(v=(0.1, 0.0, 0.0), mu=1.0), 0.23)
    assert p.position[0] == pytest.approx(0.1 * DT)


@given(
    st.floats(-0.75, 0.75), st.floats(-0.75, 0.75), st.floats(0.0, 2.0), st.integers(0, 30), st.booleans()
)
def test_predict_pose_matches_step(vx, vy, mu, k, driven):
    prog = sim.DRIVEN_MOTION if driven else sim.FREE_MOTION
    obj = ball(v=(vx, vy, 0.0), mu=mu, motion_program=prog)
    w = hold_ticks(one_object_world(obj, SceneConfig(workspace_min=(-5, -5, 0), workspace_max=(5, 5, 1))), k)
    assert sim.predict_pose(obj, k * DT).position == w.objects[0].position


# -- disturbances -----------------------------------------------------------------------------------


def test_disturbance_reverses_direction():
    w = sim.apply_disturbance(one_object_world(ball(v=(0.2, 0.0, 0.0))), 0, (-0.4, 0.0, 0.0))
    assert w.objects[0].linear_velocity == pytest.approx((-0.2, 0.0, 0.0))
    assert w.events[-1].kind is EventKind.DISTURBANCE


def test_zero_disturbance_only_logs():
    w0 = one_object_world(ball(v=(0.2, 0.0, 0.0)))
    w = sim.apply_disturbance(w0, 0, (0.0, 0.0, 0.0))
    assert w.objects == w0.objects and len(w.events) == 1


def test_disturbed_static_object_decelerates_to_rest():
    mu, kick = 1.5, 0.6
    w = sim.apply_disturbance(one_object_world(ball(mu=mu)), 0, (kick, 0.0, 0.0))
    # scalar kinematics oracle
    speed, x, ticks = kick, 0.0, 0
    while speed > 0:
        x += speed * DT
        speed = max(0.0, speed - mu * 9.81 * DT)
        ticks += 1
    w = hold_ticks(w, ticks)
    assert w.objects[0].speed == 0.0
    assert w.objects[0].position[0] == pytest.approx(x, abs=1e-12)


def test_disturbance_errors():
    w = one_object_world(ball())
    with pytest.raises(sim.UnknownObject):
        sim.apply_disturbance(w, 9, (0.1, 0.0, 0.0))
    held = dataclasses.replace(w, objects=(dataclasses.replace(w.objects[0], status=ObjectStatus.ATTACHED),))
    with pytest.raises(sim.AttachedObject):
        sim.apply_disturbance(held, 0, (0.1, 0.0, 0.0))


# -- outcomes ------------------------------------------------------------------------------------------


def test_timeout_outcome():
    w = dataclasses.replace(one_object_world(ball()), tick=300)
    assert sim.evaluate_outcome(w, SimpleScenario()) is Outcome.TIMEOUT
    assert sim.evaluate_outcome(dataclasses.replace(w, tick=299), SimpleScenario()) is Outcome.IN_PROGRESS


def test_gather_all_is_all_or_nothing():
    w = dataclasses.replace(
        one_object_world(ball()),
        tick=600,
        events=(sim.Event(EventKind.PLACED, 10, 0), sim.Event(EventKind.PLACED, 90, 1)),
    )
    assert sim.evaluate_outcome(w, SimpleScenario(instructed_ids=(0, 1, 2), timeout_ticks=600)) is Outcome.TIMEOUT


def test_outcome_precedence():
    ev = (
        sim.Event(EventKind.PLACED, 1, 0),
        sim.Event(EventKind.DROPPED, 2, 0),
        sim.Event(EventKind.WORKSPACE_VIOLATION, 3),
    )
    w = one_object_world(ball())
    assert sim.evaluate_outcome(dataclasses.replace(w, events=ev), SimpleScenario()) is Outcome.ABORTED
    assert sim.evaluate_outcome(dataclasses.replace(w, events=ev[:2]), SimpleScenario()) is Outcome.DROP
    assert sim.evaluate_outcome(dataclasses.replace(w, events=ev[:1]), SimpleScenario()) is Outcome.SUCCESS


@given(st.integers(0, 10_000), st.lists(st.sampled_from(["hold", "move", "close", "open"]), max_size=40))
def test_step_deterministic(seed, script):
    cfg = SceneConfig(n_objects=2, motion="driven", drive_duration=(0.5, 1.0))
    cmds = {
        "hold": HOLD,
        "move": EndEffectorCommand((0.1, 0.1, 0.05)),
        "close": EndEffectorCommand((0.1, 0.1, 0.05), gripper_command=GripperCommand.CLOSE),
        "open": EndEffectorCommand((0.3, -0.3, 0.05)),
    }
    runs = []
    for _ in range(2):
        w = sim.spawn_scene(cfg, seed)
        for c in script:
            w = sim.step(w, cmds[c])
        runs.append(w)
    assert runs[0] == runs[1]


def test_quaternions_stay_normalised():
    obj = dataclasses.replace(ball(), angular_velocity=(0.3, -1.2, 2.0))
    w = hold_ticks(one_object_world(obj), 200)
    q = w.objects[0].pose.orientation
    assert math.sqrt(sum(c * c for c in q)) == pytest.approx(1.0, abs=1e-9)
