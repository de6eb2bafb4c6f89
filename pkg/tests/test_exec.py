import json
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taskcond.cond import Cond2Task, load_lht_scripts, scene_path
from taskcond.core import Pose, TaskCondition, Vec3, grasping, parse_task_name, relation
from taskcond.errors import ConditionGenerationFailed, RecursionLimit
from taskcond.execution import (ExecConfig, ExecTrace, TableSource, control_with_cond, goal_adjust,
                                run_long_horizon, run_without_conditions, satisfy_pre_cond)
from taskcond.percept import atoms_satisfied
from taskcond.world import ObjectKind, SceneObject, load_scene, sample_cloud


@pytest.fixture
def source(reference):
    return TableSource(reference)


def test_goal_adjust_example():
    assert np.allclose(goal_adjust([1, 0, 0], [0.9, 0, 0]), [1.1, 0, 0])


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_goal_adjust_identity(v):
    g, c = np.array(v[:3]), np.array(v[3:])
    assert np.max(np.abs((goal_adjust(g, c) - g) - (g - c))) <= 1e-12


def test_exec_config_validation():
    with pytest.raises(ValueError):
        ExecConfig(time_budget=0)
    with pytest.raises(ValueError):
        ExecConfig(backup_steps=-1)


def test_clean_grasp_no_adjustments(library, reference):
    w = load_scene(scene_path("lht1"))
    trace = control_with_cond(w, reference["grasp bottle"], library.by_verb()[parse_task_name("grasp x").verb],
                              ExecConfig())
    assert trace.root_terminal().kind == "PostCondMet"
    assert trace.goal_adjustments() == 0
    assert w.attached == "bottle"


def test_short_circuit_stops_motion(library, reference):
    w = load_scene(scene_path("lht1"))
    trace = control_with_cond(w, reference["grasp bottle"], library.records["grasp bottle"], ExecConfig())
    end = trace.root_terminal()
    assert end.time == pytest.approx(w.sim_time)  # nothing commanded after the post-conditions held
    plan_len = library.records["grasp bottle"].demo_duration
    assert w.sim_time < plan_len


def test_timeout_respects_budget(library):
    w = load_scene(scene_path("lht1"))
    unreachable = TaskCondition("grasp bottle", ("bottle", "microwave"), (),
                                (relation("bottle", "inside", "microwave"),))
    cfg = ExecConfig(time_budget=0.5)
    trace = control_with_cond(w, unreachable, library.records["grasp bottle"], cfg)
    end = trace.root_terminal()
    assert end.kind == "TimedOut"
    assert end.data["runtime"] <= cfg.time_budget + 1.0 / cfg.rollout_rate + 1e-9


def test_exhausted_trajectory_fails(library):
    w = load_scene(scene_path("lht1"))
    unreachable = TaskCondition("grasp bottle", ("bottle", "microwave"), (),
                                (relation("bottle", "inside", "microwave"),))
    trace = control_with_cond(w, unreachable, library.records["grasp bottle"], ExecConfig())
    end = trace.root_terminal()
    assert end.kind == "Failed" and end.data["reason"] == "trajectory exhausted"
    assert [e.terminal for e in trace.events].count(True) == 1


def _with_obstacle(world, center, size=0.06):
    shape = {"box": [size] * 3}
    world.objects["crate"] = SceneObject("crate", sample_cloud(shape, 60, np.random.default_rng(0)),
                                         Pose(Vec3(*center)), ObjectKind.RIGID, shape=shape)
    return world


def test_rewind_and_reflect(library, reference):
    w = load_scene(scene_path("lht1"))
    start = w.gripper_position.copy()
    goal = np.asarray(w.aabb("bottle").center)
    _with_obstacle(w, start + 0.5 * (goal - start))
    trace = control_with_cond(w, reference["grasp bottle"], library.records["grasp bottle"], ExecConfig())
    adj = [e for e in trace.events if e.kind == "GoalAdjusted"]
    assert adj, trace.kinds()
    for e in adj:
        assert e.data["index"] == max(0, e.data["at"] - 10)
        old, new, c = (np.array(e.data[k]) for k in ("old", "new", "coll_pos"))
        assert np.max(np.abs(new - (2 * old - c))) <= 1e-12
        assert "crate" in e.data["pair"]
    assert trace.root_terminal() is not None


def test_allowed_pairs_do_not_trigger(library, reference):
    w = load_scene(scene_path("lht1"))
    start = w.gripper_position.copy()
    goal = np.asarray(w.aabb("bottle").center)
    _with_obstacle(w, start + 0.5 * (goal - start))
    cond = reference["grasp bottle"]
    from taskcond.core import canonical_collision
    tolerant = TaskCondition(cond.task_name, cond.relevant_objects, cond.pre_conditions, cond.post_conditions,
                             cond.allowed_collisions + (canonical_collision("crate", "gripper"),))
    trace = control_with_cond(w, tolerant, library.records["grasp bottle"], ExecConfig())
    assert trace.goal_adjustments() == 0 and trace.root_terminal().kind == "PostCondMet"


def test_no_subtask_when_pre_met(library, reference, source):
    w = load_scene(scene_path("lht1"))
    trace = satisfy_pre_cond(w, reference["grasp bottle"], library.by_verb(), source, ExecConfig())
    assert "SubtaskSpawned" not in trace.kinds()


def test_move_spawns_grasp_first(library, source):
    w = load_scene(scene_path("lht1"))
    ok, trace = run_long_horizon(w, ["move bottle"], library.by_verb(), source)
    assert ok
    kinds = trace.kinds()
    spawn = kinds.index("SubtaskSpawned")
    assert trace.events[spawn].data["subtask"] == "grasp bottle"
    sub_done = next(i for i, e in enumerate(trace.events) if e.kind == "PostCondMet" and e.task == "grasp bottle")
    move_motion = next(i for i, e in enumerate(trace.events) if e.kind == "MotionStarted" and e.task == "move bottle")
    assert spawn < sub_done < move_motion


def test_lht_with_open_microwave(library, source):
    w = load_scene(scene_path("lht1"))
    ok, trace = run_long_horizon(w, ["grasp bottle", "moveinto bottle microwave"], library.by_verb(), source)
    assert ok and "SubtaskSpawned" not in trace.kinds()


def test_lht_with_closed_microwave_opens_first(library, source):
    w = load_scene(scene_path("lht2"))
    assert w.objects["microwave"].joint == 0.0
    _, trace = run_long_horizon(w, ["grasp mug", "moveinto mug microwave"], library.by_verb(), source)
    spawned = [e.data["subtask"] for e in trace.events if e.kind == "SubtaskSpawned"]
    assert spawned[0] == "open microwave"
    # without the explicit grasp step both missing pre-conditions are established, in order
    w = load_scene(scene_path("lht2"))
    ok, trace = run_long_horizon(w, ["moveinto mug microwave"], library.by_verb(), source)
    spawned = [e.data["subtask"] for e in trace.events if e.kind == "SubtaskSpawned"]
    assert ok and spawned == ["open microwave", "grasp mug"]


def test_unknown_verb_step_fails(library, source):
    w = load_scene(scene_path("lht1"))
    ok, trace = run_long_horizon(w, ["grasp bottle", "fly bottle"], library.by_verb(), source)
    assert not ok and trace.events[-1].kind == "Failed"


def test_missing_condition_is_failed_trace(library):
    w = load_scene(scene_path("lht1"))
    ok, trace = run_long_horizon(w, ["grasp bottle"], library.by_verb(), TableSource({}))
    assert not ok and "ConditionGenerationFailed" in trace.events[-1].data["reason"]


def _cyclic(reference):
    move = reference["move bottle"]
    grasp = reference["grasp bottle"]
    # grasping is established by "move", whose own pre-condition is grasping: a cycle
    bad_grasp = TaskCondition("grasp bottle", grasp.relevant_objects, (grasping("bottle"),),
                              grasp.post_conditions, grasp.allowed_collisions)
    table = Cond2Task({**Cond2Task.load().rows, "grasping": {"verb": "move", "args": ["obj"]}})
    return TableSource({"move bottle": move, "grasp bottle": bad_grasp}), table


def test_cyclic_mapping_hits_recursion_limit(library, reference):
    source, table = _cyclic(reference)
    w = load_scene(scene_path("lht1"))
    cfg = ExecConfig()
    t0 = time.perf_counter()
    with pytest.raises(RecursionLimit) as err:
        satisfy_pre_cond(w, reference["move bottle"], library.by_verb(), source, cfg, table=table)
    assert time.perf_counter() - t0 < 30
    assert w.sim_time <= cfg.recursion_limit * cfg.time_budget
    assert err.value.depth == cfg.recursion_limit + 1
    ok, trace = run_long_horizon(load_scene(scene_path("lht1")), ["move bottle"], library.by_verb(), source,
                                 cfg, table=table)
    assert not ok and max(e.depth for e in trace.events) == cfg.recursion_limit


def test_one_terminal_per_frame(library, source):
    w = load_scene(scene_path("lht2"))
    ok, trace = run_long_horizon(w, load_lht_scripts()["LHT2"]["tasks"], library.by_verb(), source)
    assert ok
    frames = {e.frame for e in trace.events}
    for f in frames:
        assert sum(e.terminal for e in trace.of_frame(f)) == 1


def test_trace_jsonl(library, source):
    w = load_scene(scene_path("lht1"))
    _, trace = run_long_horizon(w, ["move bottle"], library.by_verb(), source)
    rows = [json.loads(ln) for ln in trace.to_jsonl().splitlines()]
    assert [r["kind"] for r in rows] == trace.kinds()


def test_without_conditions_runs_full_rollouts(library, reference):
    w = load_scene(scene_path("lht1"))
    ok, trace = run_without_conditions(
        w, ["grasp bottle"], library.by_verb(),
        post_check=lambda world, task: atoms_satisfied(world, reference[str(task)].post_conditions)[0])
    assert ok
    assert w.sim_time == pytest.approx(library.records["grasp bottle"].demo_duration, abs=0.011)
