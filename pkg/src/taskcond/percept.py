"""Spatial relations, object states and condition checks read off a world snapshot."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .core import (GRIPPER, ConditionAtom, RelationAtom, SpatialRelation, StateAtom, StateKind,
                   grasping, is_closed, is_folded, is_open, is_tilted)
from .errors import UnknownObject

if TYPE_CHECKING:
    from .world import World

EPS = 0.01  # tolerance on every geometric predicate, meters
OPEN_AT = 0.9
CLOSED_AT = 0.1
TILT_DEG = 30.0


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo > hi):
            raise ValueError(f"malformed AABB {lo} .. {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of_points(cls, points: np.ndarray) -> "Aabb":
        return cls(points.min(axis=0), points.max(axis=0))

    @classmethod
    def cube(cls, center, half: float) -> "Aabb":
        c = np.asarray(center, dtype=float)
        return cls(c - half, c + half)

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def inflate(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def overlaps_strictly(self, other: "Aabb") -> bool:
        return bool(np.all(self.min < other.max) and np.all(other.min < self.max))

    def intersection(self, other: "Aabb") -> "Aabb | None":
        lo = np.maximum(self.min, other.min)
        hi = np.minimum(self.max, other.max)
        if np.any(lo > hi):
            return None
        return Aabb(lo, hi)

    def contains(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.min) and np.all(other.max <= self.max))

    def distance_to(self, point) -> float:
        p = np.asarray(point, dtype=float)
        d = np.maximum(np.maximum(self.min - p, 0.0), p - self.max)
        return float(np.linalg.norm(d))


def _overlap_1d(a: Aabb, b: Aabb, axis: int) -> bool:
    return a.min[axis] <= b.max[axis] and b.min[axis] <= a.max[axis]


def aabb_relation(sub: Aabb, obj: Aabb, rel: SpatialRelation, eps: float = EPS) -> bool:
    """Relation predicates on bounding boxes; world -y is "front"."""
    if rel is SpatialRelation.ABOVE:
        return bool(sub.min[2] >= obj.max[2] - eps and _overlap_1d(sub, obj, 0) and _overlap_1d(sub, obj, 1))
    if rel is SpatialRelation.BELOW:
        return aabb_relation(obj, sub, SpatialRelation.ABOVE, eps)
    if rel is SpatialRelation.INSIDE:
        return obj.inflate(eps).contains(sub)
    if rel is SpatialRelation.OUTSIDE:
        return not obj.inflate(eps).contains(sub)
    if rel is SpatialRelation.IN_FRONT_OF:
        return bool(sub.max[1] <= obj.min[1] + eps and _overlap_1d(sub, obj, 0) and _overlap_1d(sub, obj, 2))
    raise ValueError(rel)


def _require(world: "World", *ids: str) -> None:
    for i in ids:
        if i not in world.objects:
            raise UnknownObject(f"no object {i!r} in the world")


def relation_holds(world: "World", subject: str, rel: SpatialRelation, obj: str) -> bool:
    _require(world, subject, obj)
    if subject == obj:
        raise ValueError("a relation needs two distinct objects")
    return aabb_relation(world.aabb(subject), world.aabb(obj), rel)


def tilt_angle_deg(world: "World", obj: str) -> float:
    """Angle between the object's local z axis and world z."""
    from .core import quat_to_matrix

    R = quat_to_matrix(world.objects[obj].pose.orientation)
    return float(np.degrees(np.arccos(np.clip(R[2, 2], -1.0, 1.0))))


def state_holds(world: "World", atom: StateAtom) -> bool:
    kind = atom.kind
    if kind is StateKind.GRASPING:
        if atom.gripper != GRIPPER:
            raise UnknownObject(f"unknown gripper {atom.gripper!r}")
        _require(world, atom.obj)
        return world.attached == atom.obj
    _require(world, atom.obj)
    o = world.objects[atom.obj]
    if kind is StateKind.OPEN:
        return o.joint is not None and o.joint >= OPEN_AT
    if kind is StateKind.CLOSED:
        return o.joint is not None and o.joint <= CLOSED_AT
    if kind is StateKind.TILTED:
        return tilt_angle_deg(world, atom.obj) > TILT_DEG
    if kind is StateKind.FOLDED:
        return bool(o.folded)
    raise ValueError(kind)


def atom_holds(world: "World", atom: ConditionAtom) -> bool:
    if isinstance(atom, RelationAtom):
        value = relation_holds(world, atom.subject, atom.relation, atom.object)
    else:
        value = state_holds(world, atom.positive())
    return value != atom.negated


def current_conditions(world: "World") -> list[ConditionAtom]:
    """Every true atom except Outside relations, which are only checked on demand."""
    atoms: list[ConditionAtom] = []
    ids = sorted(world.objects)
    boxes = {i: world.aabb(i) for i in ids}
    rels = [r for r in SpatialRelation if r is not SpatialRelation.OUTSIDE]
    for a, b in itertools.permutations(ids, 2):
        for rel in rels:
            if aabb_relation(boxes[a], boxes[b], rel):
                atoms.append(RelationAtom(a, rel, b))
    if world.attached is not None:
        atoms.append(grasping(world.attached))
    for i in ids:
        o = world.objects[i]
        if o.joint is not None:
            if o.joint >= OPEN_AT:
                atoms.append(is_open(i))
            if o.joint <= CLOSED_AT:
                atoms.append(is_closed(i))
        if tilt_angle_deg(world, i) > TILT_DEG:
            atoms.append(is_tilted(i))
        if o.folded:
            atoms.append(is_folded(i))
    return atoms


def atoms_satisfied(world: "World", atoms: Sequence[ConditionAtom]) -> tuple[bool, list[ConditionAtom]]:
    unmet = [a for a in atoms if not atom_holds(world, a)]
    return (not unmet, unmet)


def restrict(atoms: Iterable[ConditionAtom], objects: Iterable[str]) -> list[ConditionAtom]:
    """Atoms whose every object id is in ``objects`` (gripper always allowed)."""
    keep = set(objects) | {GRIPPER}
    return [a for a in atoms if all(o in keep for o in a.objects)]
