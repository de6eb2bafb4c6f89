"""Deterministic kinematic simulator.

The manipulator is abstracted to its end effector: ``step_to`` places the
gripper at the commanded pose (position control, no IK). Objects are labeled
point clouds. Contacts never stop motion; they are reported by
:func:`collisions` and have a few kinematic side effects:

* closing the gripper within 2 cm of a graspable object attaches it;
  opening detaches it;
* closing inside a handle or flap region grabs it; while grabbed, gripper
  displacement along the region's drag vector drives the joint (or folds);
* a carried object that pushes into a closed articulated container is
  knocked out of the gripper;
* fragile objects touched by the gripper or a carried object topple.
"""

from __future__ import annotations

import copy
import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (GRIPPER, CollisionPair, Pose, PrimitiveTaskName, Trajectory, Vec3, Verb,
                   quat_from_axis_angle, quat_mul, quat_normalize, quat_to_matrix, slerp)
from .errors import DuplicateObject, InfeasibleTask, SchemaError
from .percept import CLOSED_AT, OPEN_AT, Aabb

COLLISION_MARGIN = 0.005
GRIPPER_HALF = 0.01  # the gripper is a 2 cm cube
GRASP_DISTANCE = 0.02
FOLD_PROGRESS = 0.8
HOME = (0.30, -0.30, 0.80)


class ObjectKind(enum.Enum):
    RIGID = "rigid"
    CONTAINER = "container"
    ARTICULATED = "articulated"
    FOLDABLE = "foldable"


@dataclass(frozen=True)
class DragRegion:
    """Box in the object frame plus the displacement that completes the motion."""

    lo: np.ndarray
    hi: np.ndarray
    drag: np.ndarray

    @classmethod
    def from_dict(cls, d: dict) -> "DragRegion":
        lo, hi, drag = (np.array(d[k], dtype=float) for k in ("min", "max", "drag"))
        if lo.shape != (3,) or hi.shape != (3,) or drag.shape != (3,) or np.any(lo >= hi):
            raise SchemaError(f"bad region {d!r}")
        if np.linalg.norm(drag) < 1e-6:
            raise SchemaError("region drag vector must be nonzero")
        return cls(lo, hi, drag)

    def to_dict(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist(), "drag": self.drag.tolist()}


@dataclass
class SceneObject:
    id: str
    cloud: np.ndarray  # object frame
    pose: Pose
    kind: ObjectKind
    graspable: bool = False
    joint: float | None = None
    folded: bool | None = None
    handle: DragRegion | None = None
    flap: DragRegion | None = None
    fragile: bool = False
    fixed: bool = False
    toppled: bool = False
    shape: dict = field(default_factory=dict)
    _aabb: Aabb | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise SchemaError(f"{self.id}: empty point cloud")
        if (self.joint is not None) != (self.kind is ObjectKind.ARTICULATED):
            raise SchemaError(f"{self.id}: a joint value is required exactly for articulated objects")
        if self.kind is ObjectKind.FOLDABLE and self.folded is None:
            self.folded = False

    def set_pose(self, pose: Pose) -> None:
        self.pose = pose
        self._aabb = None

    def world_points(self) -> np.ndarray:
        R = quat_to_matrix(self.pose.orientation)
        return self.cloud @ R.T + np.asarray(self.pose.position)

    def aabb(self) -> Aabb:
        if self._aabb is None:
            self._aabb = Aabb.of_points(self.world_points())
        return self._aabb

    def to_world(self, local) -> np.ndarray:
        return quat_to_matrix(self.pose.orientation) @ np.asarray(local) + np.asarray(self.pose.position)

    def to_world_dir(self, local) -> np.ndarray:
        return quat_to_matrix(self.pose.orientation) @ np.asarray(local)

    def region_offset(self, region: DragRegion) -> np.ndarray:
        """Current local displacement of a moving region (handle follows the joint)."""
        if region is self.handle:
            return region.drag * float(self.joint)
        if region is self.flap and self.folded:
            return region.drag.copy()
        return np.zeros(3)

    def region_center(self, region: DragRegion, *, at: float | None = None) -> np.ndarray:
        offset = region.drag * at if at is not None else self.region_offset(region)
        return self.to_world((region.lo + region.hi) / 2.0 + offset)

    def in_region(self, region: DragRegion, point) -> bool:
        R = quat_to_matrix(self.pose.orientation)
        local = R.T @ (np.asarray(point) - np.asarray(self.pose.position)) - self.region_offset(region)
        return bool(np.all(region.lo <= local) and np.all(local <= region.hi))


@dataclass(frozen=True)
class CollisionReport:
    pairs: frozenset
    time: float = 0.0

    def __contains__(self, pair) -> bool:
        return pair in self.pairs

    def __iter__(self):
        return iter(sorted(self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class _Grab:
    obj: str
    region: str  # "handle" | "flap"
    start_point: np.ndarray
    start_joint: float = 0.0
    direction: float = 1.0


@dataclass
class World:
    objects: dict[str, SceneObject]
    gripper_pose: Pose = field(default_factory=lambda: Pose(Vec3(*HOME)))
    gripper_closed: bool = False
    attached: str | None = None
    sim_time: float = 0.0
    rng_seed: int = 0
    attach_offset: np.ndarray | None = None  # object pose in gripper frame (4x4)
    grab: _Grab | None = None
    events: list = field(default_factory=list)

    def copy(self) -> "World":
        return copy.deepcopy(self)

    # -- geometry ---------------------------------------------------------

    def aabb(self, obj_id: str) -> Aabb:
        if obj_id == GRIPPER:
            return self.gripper_aabb()
        return self.objects[obj_id].aabb()

    def gripper_aabb(self) -> Aabb:
        return Aabb.cube(self.gripper_pose.position, GRIPPER_HALF)

    @property
    def gripper_position(self) -> np.ndarray:
        return np.asarray(self.gripper_pose.position, dtype=float)

    def body_ids(self) -> list[str]:
        return sorted(self.objects) + [GRIPPER]

    def moving_bodies(self) -> set[str]:
        moving = {GRIPPER}
        if self.attached is not None:
            moving.add(self.attached)
        return moving

    def toppled(self) -> list[str]:
        return sorted(i for i, o in self.objects.items() if o.toppled)

    # -- stepping ---------------------------------------------------------

    def step_to(self, target: Pose, gripper_closed: bool, dt: float) -> "World":
        if dt <= 0:
            raise ValueError("dt must be positive")
        if self.gripper_closed and not gripper_closed:
            self._open_gripper()
        self._move_gripper(target)
        self._update_grab()
        self._topple_touched()
        if gripper_closed and not self.gripper_closed:
            self._close_gripper()
        self.gripper_closed = gripper_closed
        self.sim_time += dt
        return self

    def _open_gripper(self) -> None:
        if self.attached is not None:
            self.events.append(("released", self.attached, self.sim_time))
        self.attached = None
        self.attach_offset = None
        self.grab = None

    def _close_gripper(self) -> None:
        p = self.gripper_position
        best, best_d = None, GRASP_DISTANCE
        for oid in sorted(self.objects):
            o = self.objects[oid]
            if not o.graspable:
                continue
            d = o.aabb().distance_to(p)
            if d <= best_d:
                best, best_d = oid, d
        if best is not None:
            self.attached = best
            self.attach_offset = np.linalg.inv(self.gripper_pose.matrix()) @ self.objects[best].pose.matrix()
            self.events.append(("attached", best, self.sim_time))
            return
        for oid in sorted(self.objects):
            o = self.objects[oid]
            if o.handle is not None and o.in_region(o.handle, p):
                self.grab = _Grab(oid, "handle", p.copy(), start_joint=float(o.joint))
                return
            if o.flap is not None and o.in_region(o.flap, p):
                self.grab = _Grab(oid, "flap", p.copy(), direction=-1.0 if o.folded else 1.0)
                return

    def _move_gripper(self, target: Pose) -> None:
        self.gripper_pose = target
        if self.attached is None:
            return
        obj = self.objects[self.attached]
        before = obj.pose
        T = target.matrix() @ self.attach_offset
        q = _matrix_to_quat(T[:3, :3])
        obj.set_pose(Pose(Vec3.of(T[:3, 3]), tuple(q)))
        box = obj.aabb()
        for oid in sorted(self.objects):
            other = self.objects[oid]
            if oid == obj.id or other.kind is not ObjectKind.ARTICULATED or other.joint >= OPEN_AT:
                continue
            if box.overlaps_strictly(other.aabb()):
                # a closed door blocks the carried object: it is knocked loose
                obj.set_pose(before)
                self.events.append(("blocked", obj.id, self.sim_time))
                self.attached = None
                self.attach_offset = None
                return

    def _update_grab(self) -> None:
        g = self.grab
        if g is None:
            return
        o = self.objects[g.obj]
        p = self.gripper_position
        if g.region == "handle":
            drag = o.to_world_dir(o.handle.drag)
            o.joint = float(np.clip(g.start_joint + np.dot(p - g.start_point, drag) / np.dot(drag, drag), 0.0, 1.0))
        else:
            drag = o.to_world_dir(o.flap.drag) * g.direction
            progress = np.dot(p - g.start_point, drag) / np.dot(drag, drag)
            if progress >= FOLD_PROGRESS:
                o.folded = not o.folded
                self.grab = None

    def _topple_touched(self) -> None:
        movers = [self.gripper_aabb()]
        if self.attached is not None:
            movers.append(self.objects[self.attached].aabb())
        for oid in sorted(self.objects):
            o = self.objects[oid]
            if not o.fragile or o.toppled or oid == self.attached:
                continue
            if any(m.overlaps_strictly(o.aabb()) for m in movers):
                o.toppled = True
                q = quat_mul(quat_from_axis_angle((1, 0, 0), math.pi / 2), o.pose.orientation)
                o.set_pose(Pose(o.pose.position, tuple(quat_normalize(q))))
                self.events.append(("toppled", oid, self.sim_time))

    # -- contacts -----------------------------------------------------------

    def collisions(self) -> CollisionReport:
        boxes = {i: self.aabb(i).inflate(COLLISION_MARGIN) for i in self.body_ids()}
        pairs = set()
        for a, b in itertools.combinations(sorted(boxes), 2):
            if self.attached is not None and {a, b} == {GRIPPER, self.attached}:
                continue
            if boxes[a].intersects(boxes[b]):
                pairs.add(CollisionPair(a, b))
        return CollisionReport(frozenset(pairs), self.sim_time)

    def overlap_center(self, pair: CollisionPair) -> np.ndarray:
        """Centroid of the inflated-AABB overlap region of a colliding pair."""
        a = self.aabb(pair.a).inflate(COLLISION_MARGIN)
        b = self.aabb(pair.b).inflate(COLLISION_MARGIN)
        inter = a.intersection(b)
        if inter is None:
            return (a.center + b.center) / 2.0
        return inter.center


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


# ---------------------------------------------------------------------------
# scene files


def sample_cloud(shape: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """Surface samples of a box or cylinder, including the extreme points."""
    if "box" in shape:
        sx, sy, sz = (float(v) for v in shape["box"])
        if min(sx, sy, sz) <= 0:
            raise SchemaError(f"box extents must be positive, got {shape['box']}")
        half = np.array([sx, sy, sz]) / 2
        corners = np.array(list(itertools.product(*[(-h, h) for h in half])))
        pts = rng.uniform(-half, half, size=(max(n - 8, 0), 3))
        axis = rng.integers(0, 3, size=len(pts))
        side = rng.choice([-1.0, 1.0], size=len(pts))
        pts[np.arange(len(pts)), axis] = side * half[axis]
        return np.vstack([corners, pts])
    if "cylinder" in shape:
        r, h = (float(v) for v in shape["cylinder"])
        if r <= 0 or h <= 0:
            raise SchemaError(f"cylinder radius and height must be positive, got {shape['cylinder']}")
        ang = np.array([0, 0.5, 1.0, 1.5]) * math.pi
        rims = np.array([[r * math.cos(a), r * math.sin(a), z] for a in ang for z in (-h / 2, h / 2)])
        m = max(n - len(rims), 0)
        theta = rng.uniform(0, 2 * math.pi, m)
        z = rng.uniform(-h / 2, h / 2, m)
        on_cap = rng.random(m) < 0.3
        rad = np.where(on_cap, r * np.sqrt(rng.random(m)), r)
        z = np.where(on_cap, rng.choice([-h / 2, h / 2], m), z)
        pts = np.c_[rad * np.cos(theta), rad * np.sin(theta), z]
        return np.vstack([rims, pts])
    raise SchemaError(f"unknown shape {shape!r}")


def scene_from_dict(data: dict) -> World:
    try:
        seed = int(data["seed"])
        entries = data["objects"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"scene needs 'seed' and 'objects': {exc}") from exc
    rng = np.random.default_rng(seed)
    objects: dict[str, SceneObject] = {}
    for entry in entries:
        try:
            oid = entry["id"]
            if not oid or oid == GRIPPER:
                raise SchemaError(f"invalid object id {oid!r}")
            if oid in objects:
                raise DuplicateObject(f"duplicate object id {oid!r}")
            kind = ObjectKind(entry.get("kind", "rigid"))
            n = int(entry.get("points_per_object", 200))
            if n < 1:
                raise SchemaError("points_per_object must be positive")
            cloud = sample_cloud(entry["shape"], n, rng)
            pose = Pose.from_list(entry["pose"])
            handle = DragRegion.from_dict(entry["handle_region"]) if "handle_region" in entry else None
            flap = DragRegion.from_dict(entry["flap_region"]) if "flap_region" in entry else None
            joint = float(entry.get("joint", 0.0)) if kind is ObjectKind.ARTICULATED else None
            if joint is not None and not 0.0 <= joint <= 1.0:
                raise SchemaError(f"{oid}: joint must lie in [0, 1]")
            objects[oid] = SceneObject(
                id=oid, cloud=cloud, pose=pose, kind=kind,
                graspable=bool(entry.get("graspable", False)), joint=joint,
                folded=bool(entry.get("folded", False)) if kind is ObjectKind.FOLDABLE else None,
                handle=handle, flap=flap, fragile=bool(entry.get("fragile", False)),
                fixed=bool(entry.get("fixed", False)), shape=dict(entry["shape"]),
            )
        except (DuplicateObject, SchemaError):
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad object entry {entry!r}: {exc}") from exc
    grip = data.get("gripper", {})
    gpose = Pose.from_list(grip["pose"]) if "pose" in grip else Pose(Vec3(*HOME))
    world = World(objects=objects, gripper_pose=gpose, gripper_closed=bool(grip.get("closed", False)),
                  rng_seed=seed)
    return world


def load_scene(path) -> World:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return scene_from_dict(data)


def step_to(world: World, target: Pose, gripper_closed: bool, dt: float) -> World:
    return world.step_to(target, gripper_closed, dt)


def collisions(world: World) -> CollisionReport:
    return world.collisions()


# ---------------------------------------------------------------------------
# scripted demonstrations

DEMO_RATE = 100.0
SPEED = 0.25  # m/s, average over a min-jerk segment
DWELL = 0.3


class _Path:
    """Accumulates min-jerk segments into trajectory samples."""

    def __init__(self, pos, quat, closed: bool, rate: float):
        self.rate = rate
        self.pos = [np.asarray(pos, dtype=float)]
        self.quat = [np.asarray(quat, dtype=float)]
        self.closed = [closed]

    @property
    def here(self) -> np.ndarray:
        return self.pos[-1]

    def move(self, to, *, closed: bool | None = None, quat=None, duration: float | None = None):
        to = np.asarray(to, dtype=float)
        closed = self.closed[-1] if closed is None else closed
        q0 = self.quat[-1]
        q1 = q0 if quat is None else np.asarray(quat, dtype=float)
        if duration is None:
            duration = max(0.6, float(np.linalg.norm(to - self.here)) / SPEED)
        n = max(int(round(duration * self.rate)), 2)
        start = self.here
        for k in range(1, n + 1):
            s = k / n
            s = 10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5
            self.pos.append(start + (to - start) * s)
            self.quat.append(slerp(q0, q1, s))
            self.closed.append(closed)
        return self

    def dwell(self, closed: bool, duration: float = DWELL):
        n = max(int(round(duration * self.rate)), 1)
        for _ in range(n):
            self.pos.append(self.here.copy())
            self.quat.append(self.quat[-1].copy())
            self.closed.append(closed)
        return self

    def trajectory(self, t0: float = 0.0) -> Trajectory:
        return Trajectory.from_positions(np.array(self.pos), self.rate, t0=t0,
                                         orientations=np.array(self.quat),
                                         gripper_closed=np.array(self.closed))


def _need(world: World, task: PrimitiveTaskName) -> list[SceneObject]:
    missing = [a for a in task.args if a not in world.objects]
    if missing:
        raise InfeasibleTask(f"{task}: unknown object(s) {missing}")
    return [world.objects[a] for a in task.args]


def _need_held(world: World, task: PrimitiveTaskName, obj: SceneObject) -> None:
    if world.attached != obj.id:
        raise InfeasibleTask(f"{task}: the gripper is not holding {obj.id}")


def carry_offset(world: World) -> np.ndarray:
    """Gripper position minus the carried object's AABB center."""
    return world.gripper_position - world.objects[world.attached].aabb().center


def scripted_path(world: World, task: PrimitiveTaskName, rate: float = DEMO_RATE) -> Trajectory:
    objs = _need(world, task)
    v = task.verb
    p = _Path(world.gripper_position, world.gripper_pose.orientation, world.gripper_closed, rate)
    x = objs[0]

    if v is Verb.GRASP:
        if not x.graspable:
            raise InfeasibleTask(f"{task}: {x.id} is not graspable")
        p.move(x.aabb().center, closed=False).dwell(True)
    elif v is Verb.RELEASE:
        _need_held(world, task, x)
        p.dwell(False, 0.5)
    elif v in (Verb.OPEN, Verb.CLOSE):
        if x.kind is not ObjectKind.ARTICULATED or x.handle is None:
            raise InfeasibleTask(f"{task}: {x.id} has no handle")
        target = 1.0 if v is Verb.OPEN else 0.0
        start = x.region_center(x.handle)
        end = x.region_center(x.handle, at=target)
        p.move(start, closed=False).dwell(True, 0.2).move(end, closed=True).dwell(False)
    elif v is Verb.FOLD:
        if x.kind is not ObjectKind.FOLDABLE or x.flap is None:
            raise InfeasibleTask(f"{task}: {x.id} cannot be folded")
        start = x.region_center(x.flap)
        sign = -1.0 if x.folded else 1.0
        end = start + sign * x.to_world_dir(x.flap.drag)
        mid = (start + end) / 2 + (0.0, 0.0, 0.05)
        p.move(start, closed=False).dwell(True, 0.2)
        p.move(mid, closed=True).move(end, closed=True).dwell(False)
    elif v is Verb.TILT:
        _need_held(world, task, x)
        q = quat_mul(quat_from_axis_angle((1, 0, 0), math.radians(60)), world.gripper_pose.orientation)
        p.move(p.here + (0.0, 0.0, 0.05), quat=quat_normalize(q), duration=1.5).dwell(True)
    elif v is Verb.MOVE:
        _need_held(world, task, x)
        p.move(p.here + (0.10, -0.05, 0.15)).dwell(True)
    else:
        _need_held(world, task, x)
        y = objs[1]
        off = carry_offset(world)
        box, half = y.aabb(), x.aabb().extent / 2
        if v is Verb.MOVE_IN_TO:
            if y.kind not in (ObjectKind.CONTAINER, ObjectKind.ARTICULATED):
                raise InfeasibleTask(f"{task}: {y.id} is not a container")
            goal = np.array([box.center[0], box.center[1], box.min[2] + half[2] + 0.02])
            stage = np.array([goal[0], box.min[1] - half[1] - 0.06, goal[2]])
            lift = np.array([*p.here[:2], max(p.here[2], goal[2]) + 0.03])
            p.move(lift).move(stage + off).move(goal + off).dwell(True)
        elif v is Verb.MOVE_ON_TOP:
            goal = np.array([box.center[0], box.center[1], box.max[2] + half[2] + 0.005])
            above = goal + (0.0, 0.0, 0.08)
            p.move(above + off).move(goal + off).dwell(True)
        elif v is Verb.MOVE_IN_FRONT:
            goal = np.array([box.center[0], box.min[1] - half[1] - 0.03, box.min[2] + half[2] + 0.005])
            above = goal + (0.0, 0.0, 0.06)
            p.move(above + off).move(goal + off).dwell(True)
        else:  # pragma: no cover
            raise InfeasibleTask(str(task))
    return p.trajectory(t0=world.sim_time)


def replay(world: World, traj: Trajectory, *, log: list | None = None) -> World:
    """Command every sample after the first; optionally record collision reports."""
    dt = 1.0 / traj.sample_rate
    if log is not None:
        log.append(world.collisions())
    for i in range(1, len(traj)):
        world.step_to(traj.pose(i), bool(traj.gripper_closed[i]), dt)
        if log is not None:
            log.append(world.collisions())
    return world


def scripted_demo(world: World, task: PrimitiveTaskName) -> tuple[Trajectory, list[CollisionReport]]:
    """Hand-authored trajectory for ``task`` plus the contacts seen while replaying it.

    The input world is left untouched; replay happens on a copy.
    """
    traj = scripted_path(world, task)
    log: list[CollisionReport] = []
    replay(world.copy(), traj, log=log)
    return traj, log
