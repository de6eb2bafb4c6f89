"""Domain vocabulary: geometry, trajectories, condition atoms and task names.

Everything here is an immutable value. Serialization helpers at the bottom
produce the plain-dict form used inside demo-data files.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence, Union

import numpy as np

from .errors import ArityMismatch, SchemaError, SelfCollision, TooFewSamples, UnknownVerb

GRIPPER = "gripper"

# ---------------------------------------------------------------------------
# geometry


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    @classmethod
    def of(cls, v) -> "Vec3":
        x, y, z = (float(c) for c in v)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise ValueError(f"non-finite vector {v!r}")
        return cls(x, y, z)

    def array(self) -> np.ndarray:
        return np.array(self, dtype=float)


IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = math.sin(angle / 2.0)
    return np.array([math.cos(angle / 2.0), *(axis * s)])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def slerp(q0, q1, s: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + s * (q1 - q0))
    theta = math.acos(min(d, 1.0))
    return (math.sin((1 - s) * theta) * q0 + math.sin(s * theta) * q1) / math.sin(theta)


@dataclass(frozen=True)
class Pose:
    position: Vec3
    orientation: tuple = IDENTITY_QUAT  # (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "position", Vec3.of(self.position))
        q = tuple(float(c) for c in self.orientation)
        if len(q) != 4 or abs(math.sqrt(sum(c * c for c in q)) - 1.0) > 1e-6:
            raise ValueError(f"orientation must be a unit quaternion, got {q}")
        object.__setattr__(self, "orientation", q)

    @classmethod
    def from_list(cls, v: Sequence[float]) -> "Pose":
        if len(v) != 7:
            raise SchemaError(f"pose needs 7 numbers [x,y,z,qw,qx,qy,qz], got {len(v)}")
        return cls(Vec3.of(v[:3]), tuple(quat_normalize(v[3:])))

    def to_list(self) -> list[float]:
        return [*self.position, *self.orientation]

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.orientation)
        T[:3, 3] = self.position
        return T


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled end-effector path with a discrete gripper channel."""

    times: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray
    gripper_closed: np.ndarray
    sample_rate: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(times)
        quats = self.orientations
        if quats is None:
            quats = np.tile(IDENTITY_QUAT, (n, 1))
        quats = np.asarray(quats, dtype=float).reshape(-1, 4)
        grip = np.asarray(self.gripper_closed, dtype=bool).reshape(-1)
        if n < 2:
            raise TooFewSamples(f"a trajectory needs at least 2 samples, got {n}")
        if not (len(pos) == len(quats) == len(grip) == n):
            raise ValueError("trajectory channels have different lengths")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if np.max(np.abs(steps - 1.0 / self.sample_rate)) > 1e-9:
            raise ValueError("trajectory samples must be uniformly spaced at 1/sample_rate")
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite trajectory positions")
        for name, arr in (("times", times), ("positions", pos), ("orientations", quats), ("gripper_closed", grip)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @classmethod
    def from_positions(cls, positions, sample_rate: float, *, t0: float = 0.0, orientations=None,
                       gripper_closed=None) -> "Trajectory":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(positions)
        times = t0 + np.arange(n) / sample_rate
        if gripper_closed is None:
            gripper_closed = np.zeros(n, dtype=bool)
        return cls(times, positions, orientations, gripper_closed, sample_rate)

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.sample_rate == other.sample_rate
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.orientations, other.orientations)
                and np.array_equal(self.gripper_closed, other.gripper_closed))

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def pose(self, i: int) -> Pose:
        return Pose(Vec3.of(self.positions[i]), tuple(self.orientations[i]))

    def samples(self) -> Iterator[tuple[float, Pose, bool]]:
        for i in range(len(self)):
            yield float(self.times[i]), self.pose(i), bool(self.gripper_closed[i])

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# condition atoms


class SpatialRelation(enum.Enum):
    ABOVE = "above"
    BELOW = "below"
    INSIDE = "inside"
    OUTSIDE = "outside"
    IN_FRONT_OF = "in front of"

    @property
    def inverse(self) -> "SpatialRelation | None":
        return {SpatialRelation.ABOVE: SpatialRelation.BELOW,
                SpatialRelation.BELOW: SpatialRelation.ABOVE}.get(self)


class StateKind(enum.Enum):
    GRASPING = "grasping"
    OPEN = "open"
    CLOSED = "closed"
    TILTED = "tilted"
    FOLDED = "folded"


@dataclass(frozen=True)
class RelationAtom:
    subject: str
    relation: SpatialRelation
    object: str
    negated: bool = False

    def __post_init__(self):
        if not self.subject or not self.object:
            raise ValueError("relation atoms need two object ids")
        if self.subject == self.object:
            raise ValueError(f"relation atom relates {self.subject!r} to itself")

    def __invert__(self) -> "RelationAtom":
        return RelationAtom(self.subject, self.relation, self.object, not self.negated)

    @property
    def objects(self) -> tuple[str, ...]:
        return (self.subject, self.object)

    def positive(self) -> "RelationAtom":
        return RelationAtom(self.subject, self.relation, self.object)

    def __str__(self) -> str:
        text = f"{self.subject} {self.relation.value} {self.object}"
        return f"not {text}" if self.negated else text


@dataclass(frozen=True)
class StateAtom:
    """Object-state assertion. ``gripper`` is set only for Grasping."""

    kind: StateKind
    obj: str
    gripper: str | None = None
    negated: bool = False

    def __post_init__(self):
        if not self.obj:
            raise ValueError("state atoms need an object id")
        if (self.kind is StateKind.GRASPING) != (self.gripper is not None):
            raise ValueError("only Grasping atoms carry a gripper id")

    def __invert__(self) -> "StateAtom":
        return StateAtom(self.kind, self.obj, self.gripper, not self.negated)

    @property
    def objects(self) -> tuple[str, ...]:
        return (self.gripper, self.obj) if self.gripper else (self.obj,)

    def positive(self) -> "StateAtom":
        return StateAtom(self.kind, self.obj, self.gripper)

    def __str__(self) -> str:
        if self.kind is StateKind.GRASPING:
            text = f"{self.gripper} grasping {self.obj}"
        else:
            text = f"{self.obj} is {self.kind.value}"
        return f"not {text}" if self.negated else text


ConditionAtom = Union[RelationAtom, StateAtom]


def relation(subject: str, rel: SpatialRelation | str, obj: str) -> RelationAtom:
    return RelationAtom(subject, SpatialRelation(rel), obj)


def grasping(obj: str, gripper: str = GRIPPER) -> StateAtom:
    return StateAtom(StateKind.GRASPING, obj, gripper)


def is_open(obj: str) -> StateAtom:
    return StateAtom(StateKind.OPEN, obj)


def is_closed(obj: str) -> StateAtom:
    return StateAtom(StateKind.CLOSED, obj)


def is_tilted(obj: str) -> StateAtom:
    return StateAtom(StateKind.TILTED, obj)


def is_folded(obj: str) -> StateAtom:
    return StateAtom(StateKind.FOLDED, obj)


@dataclass(frozen=True, order=True)
class CollisionPair:
    """Unordered pair of object ids, stored lexicographically."""

    a: str
    b: str

    def __post_init__(self):
        if self.a == self.b:
            raise SelfCollision(f"an object cannot collide with itself: {self.a!r}")
        if self.b < self.a:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    def __contains__(self, obj: str) -> bool:
        return obj == self.a or obj == self.b

    def other(self, obj: str) -> str:
        return self.b if obj == self.a else self.a

    def __str__(self) -> str:
        return f"{self.a}, {self.b}"


def canonical_collision(a: str, b: str) -> CollisionPair:
    return CollisionPair(a, b)


# ---------------------------------------------------------------------------
# primitive tasks


class Verb(enum.Enum):
    GRASP = "grasp"
    RELEASE = "release"
    OPEN = "open"
    CLOSE = "close"
    TILT = "tilt"
    FOLD = "fold"
    MOVE = "move"
    MOVE_IN_TO = "moveinto"
    MOVE_ON_TOP = "moveontop"
    MOVE_IN_FRONT = "moveinfront"

    @property
    def arity(self) -> int:
        return 2 if self in (Verb.MOVE_IN_TO, Verb.MOVE_ON_TOP, Verb.MOVE_IN_FRONT) else 1

    @property
    def title(self) -> str:
        return {"moveinto": "MoveInTo", "moveontop": "MoveOnTop",
                "moveinfront": "MoveInFront"}.get(self.value, self.value.capitalize())


@dataclass(frozen=True)
class PrimitiveTaskName:
    verb: Verb
    args: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) != self.verb.arity:
            raise ArityMismatch(
                f"{self.verb.value} takes {self.verb.arity} object(s), got {len(self.args)}")
        if any(not a for a in self.args):
            raise ValueError("object ids must be nonempty")

    def __str__(self) -> str:
        return " ".join((self.verb.value, *self.args))

    def with_args(self, mapping: dict[str, str]) -> "PrimitiveTaskName":
        return PrimitiveTaskName(self.verb, tuple(mapping.get(a, a) for a in self.args))


def parse_task_name(text: str) -> PrimitiveTaskName:
    """Parse ``"verb obj [obj2]"`` (case-insensitive)."""
    tokens = text.strip().lower().split()
    if not tokens:
        raise UnknownVerb("empty task name")
    try:
        verb = Verb(tokens[0])
    except ValueError:
        raise UnknownVerb(f"unknown verb {tokens[0]!r}") from None
    return PrimitiveTaskName(verb, tuple(tokens[1:]))


# ---------------------------------------------------------------------------
# task conditions


@dataclass(frozen=True)
class TaskCondition:
    task_name: str
    relevant_objects: tuple[str, ...]
    pre_conditions: tuple[ConditionAtom, ...] = ()
    post_conditions: tuple[ConditionAtom, ...] = ()
    allowed_collisions: tuple[CollisionPair, ...] = field(default=())

    def __post_init__(self):
        for name in ("relevant_objects", "pre_conditions", "post_conditions", "allowed_collisions"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.post_conditions:
            raise ValueError(f"task condition for {self.task_name!r} has no post-conditions")
        known = set(self.relevant_objects) | {GRIPPER}
        for atom in self.pre_conditions + self.post_conditions:
            stray = [o for o in atom.objects if o not in known]
            if stray:
                raise ValueError(f"atom '{atom}' mentions non-relevant object(s) {stray}")

    @property
    def task(self) -> PrimitiveTaskName:
        return parse_task_name(self.task_name)

    def allows(self, pair: CollisionPair) -> bool:
        return pair in self.allowed_collisions


# ---------------------------------------------------------------------------
# plain-dict serialization


def atom_to_dict(atom: ConditionAtom) -> dict:
    if isinstance(atom, RelationAtom):
        return {"relation": atom.relation.value, "subject": atom.subject,
                "object": atom.object, "negated": atom.negated}
    d = {"state": atom.kind.value, "object": atom.obj, "negated": atom.negated}
    if atom.gripper is not None:
        d["gripper"] = atom.gripper
    return d


def atom_from_dict(d: dict) -> ConditionAtom:
    try:
        if "relation" in d:
            return RelationAtom(d["subject"], SpatialRelation(d["relation"]), d["object"],
                                bool(d.get("negated", False)))
        return StateAtom(StateKind(d["state"]), d["object"], d.get("gripper"),
                         bool(d.get("negated", False)))
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"bad condition atom {d!r}: {exc}") from exc


def condition_to_dict(cond: TaskCondition) -> dict:
    return {
        "task_name": cond.task_name,
        "relevant_objects": list(cond.relevant_objects),
        "pre_conditions": [atom_to_dict(a) for a in cond.pre_conditions],
        "post_conditions": [atom_to_dict(a) for a in cond.post_conditions],
        "allowed_collisions": [[p.a, p.b] for p in cond.allowed_collisions],
    }


def condition_from_dict(d: dict) -> TaskCondition:
    try:
        parse_task_name(d["task_name"])
        return TaskCondition(
            task_name=d["task_name"],
            relevant_objects=tuple(d["relevant_objects"]),
            pre_conditions=tuple(atom_from_dict(a) for a in d["pre_conditions"]),
            post_conditions=tuple(atom_from_dict(a) for a in d["post_conditions"]),
            allowed_collisions=tuple(CollisionPair(a, b) for a, b in d["allowed_collisions"]),
        )
    except SchemaError:
        raise
    except (KeyError, ValueError, TypeError, UnknownVerb, ArityMismatch, SelfCollision) as exc:
        raise SchemaError(f"bad task condition: {exc}") from exc


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "sample_rate": traj.sample_rate,
        "t0": float(traj.times[0]),
        "positions": traj.positions.tolist(),
        "orientations": traj.orientations.tolist(),
        "gripper_closed": traj.gripper_closed.tolist(),
    }


def trajectory_from_dict(d: dict) -> Trajectory:
    try:
        rate = float(d["sample_rate"])
        n = len(d["positions"])
        times = float(d.get("t0", 0.0)) + np.arange(n) / rate
        return Trajectory(times, d["positions"], d["orientations"], d["gripper_closed"], rate)
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"bad trajectory: {exc}") from exc
