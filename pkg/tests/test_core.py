import numpy as np
import pytest
from hypothesis import given, strategies as st

from taskcond.core import (CollisionPair, Pose, SpatialRelation, TaskCondition, Trajectory, Vec3, Verb,
                           atom_from_dict, atom_to_dict, canonical_collision, condition_from_dict,
                           condition_to_dict, grasping, is_open, parse_task_name, relation,
                           trajectory_from_dict, trajectory_to_dict)
from taskcond.errors import ArityMismatch, SchemaError, SelfCollision, TooFewSamples, UnknownVerb


def test_parse_grasp_bottle():
    t = parse_task_name("grasp bottle")
    assert t.verb is Verb.GRASP and t.args == ("bottle",)


def test_parse_two_args_and_roundtrip():
    t = parse_task_name("moveinto bottle microwave")
    assert t.verb is Verb.MOVE_IN_TO and t.args == ("bottle", "microwave")
    assert parse_task_name(str(t)) == t


def test_parse_errors():
    with pytest.raises(UnknownVerb):
        parse_task_name("fly bottle")
    with pytest.raises(ArityMismatch):
        parse_task_name("grasp")
    with pytest.raises(ArityMismatch):
        parse_task_name("moveinto bottle")


@pytest.mark.parametrize("verb", list(Verb))
def test_every_verb_roundtrips(verb):
    args = ["a", "b"][: verb.arity]
    t = parse_task_name(" ".join([verb.value, *args]))
    assert str(t) == " ".join([verb.value, *args])


def test_canonical_collision():
    assert canonical_collision("mug", "bottle") == CollisionPair("bottle", "mug")
    assert canonical_collision("bottle", "mug") == CollisionPair("bottle", "mug")
    with pytest.raises(SelfCollision):
        canonical_collision("x", "x")


@given(st.text("abcdefgh", min_size=1, max_size=4), st.text("abcdefgh", min_size=1, max_size=4))
def test_canonical_collision_symmetric(a, b):
    if a != b:
        assert canonical_collision(a, b) == canonical_collision(b, a)


def test_vec3_rejects_nonfinite():
    with pytest.raises(ValueError):
        Vec3.of([float("nan"), 0.0, 0.0])
    with pytest.raises(ValueError):
        Pose((0.0, float("inf"), 0.0))


def test_pose_requires_unit_quaternion():
    with pytest.raises(ValueError):
        Pose(Vec3(0, 0, 0), (1.0, 0.1, 0.0, 0.0))
    assert Pose.from_list([0, 0, 0, 2, 0, 0, 0]).orientation == (1.0, 0.0, 0.0, 0.0)


def test_trajectory_invariants():
    with pytest.raises(TooFewSamples):
        Trajectory.from_positions([[0, 0, 0]], 100.0)
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.01, 0.03]), np.zeros((3, 3)), None, np.zeros(3), 100.0)
    t = Trajectory.from_positions(np.zeros((200, 3)), 100.0)
    assert abs(t.duration - 1.99) < 1e-12


def test_relation_atom_rejects_self():
    with pytest.raises(ValueError):
        relation("a", "above", "a")


def test_condition_requires_post_and_relevant_objects():
    with pytest.raises(ValueError):
        TaskCondition("grasp bottle", ("bottle",), (), ())
    with pytest.raises(ValueError):
        TaskCondition("grasp bottle", ("bottle",), (), (grasping("mug"),))


def test_serialization_roundtrips():
    cond = TaskCondition("moveinto bottle microwave", ("bottle", "microwave"),
                         (is_open("microwave"), grasping("bottle")),
                         (relation("bottle", SpatialRelation.INSIDE, "microwave"), ~grasping("bottle")),
                         (canonical_collision("microwave", "bottle"),))
    assert condition_from_dict(condition_to_dict(cond)) == cond
    for atom in (~is_open("microwave"), relation("a", "in front of", "b")):
        assert atom_from_dict(atom_to_dict(atom)) == atom
    rng = np.random.default_rng(0)
    traj = Trajectory.from_positions(rng.normal(size=(10, 3)), 50.0, t0=0.5,
                                     gripper_closed=rng.random(10) > 0.5)
    assert trajectory_from_dict(trajectory_to_dict(traj)) == traj


def test_condition_from_dict_bad_verb():
    with pytest.raises(SchemaError):
        condition_from_dict({"task_name": "fly x", "relevant_objects": [], "pre_conditions": [],
                             "post_conditions": [], "allowed_collisions": []})
