"""Condition extraction from demonstrations, Cond2Task mapping and demo-data files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dmp as dmp_mod
from .core import (GRIPPER, CollisionPair, ConditionAtom, PrimitiveTaskName, RelationAtom,
                   SpatialRelation, StateAtom, StateKind, TaskCondition, Verb, condition_from_dict,
                   condition_to_dict, parse_task_name, trajectory_from_dict,
                   trajectory_to_dict)
from .errors import SchemaError, UnknownObject, UnknownVerb, UnmappableAtom
from .percept import current_conditions, restrict
from .world import CollisionReport, World, replay, scripted_demo

DATA = resources.files("taskcond") / "data"


def data_path(*parts: str) -> Path:
    return Path(str(DATA.joinpath(*parts)))


# ---------------------------------------------------------------------------
# goal anchoring


# verbs whose goal is tied to an object; the rest move relative to the gripper
_ANCHOR_ARG = {
    Verb.GRASP: 0, Verb.OPEN: 0, Verb.CLOSE: 0, Verb.FOLD: 0,
    Verb.MOVE_IN_TO: 1, Verb.MOVE_ON_TOP: 1, Verb.MOVE_IN_FRONT: 1,
}


@dataclass(frozen=True)
class GoalAnchor:
    """Where a rollout should end: an object's AABB center plus ``offset``, or,
    with ``arg`` None, the current gripper position plus ``offset``."""

    arg: int | None
    offset: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"arg": self.arg, "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "GoalAnchor":
        try:
            arg = d["arg"]
            offset = tuple(float(v) for v in d["offset"])
            if arg not in (None, 0, 1) or len(offset) != 3:
                raise ValueError("arg must be 0, 1 or null and offset a 3-vector")
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad goal anchor {d!r}: {exc}") from exc
        return cls(arg, offset)

    def goal(self, world: World, task: PrimitiveTaskName) -> np.ndarray:
        if self.arg is None:
            return world.gripper_position + np.asarray(self.offset)
        obj = task.args[self.arg]
        if obj not in world.objects:
            raise UnknownObject(f"no object {obj!r} in the world")
        return world.aabb(obj).center + np.asarray(self.offset)


def anchor_for(world: World, task: PrimitiveTaskName, demo_goal: np.ndarray) -> GoalAnchor:
    arg = _ANCHOR_ARG.get(task.verb)
    if arg is None:
        base = world.gripper_position
    else:
        base = world.aabb(task.args[arg]).center
    return GoalAnchor(arg, tuple(float(v) for v in np.asarray(demo_goal) - base))


# ---------------------------------------------------------------------------
# demo records


@dataclass(frozen=True)
class DemoRecord:
    condition: TaskCondition
    dmp: dmp_mod.DmpModel
    demo_duration: float
    anchor: GoalAnchor = field(default_factory=lambda: GoalAnchor(None, (0.0, 0.0, 0.0)))

    def __post_init__(self):
        try:
            parse_task_name(self.condition.task_name)
        except Exception as exc:
            raise SchemaError(f"bad task name {self.condition.task_name!r}: {exc}") from exc

    @property
    def task(self) -> PrimitiveTaskName:
        return self.condition.task

    def to_dict(self) -> dict:
        return {
            "task_name": self.condition.task_name,
            "condition": condition_to_dict(self.condition),
            "dmp": self.dmp.to_dict(),
            "demo_duration_s": self.demo_duration,
            "goal_anchor": self.anchor.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemoRecord":
        if not isinstance(d, dict):
            raise SchemaError("demo data must be a JSON object")
        try:
            name = d["task_name"]
            parse_task_name(name)
            cond = condition_from_dict(d["condition"])
            if cond.task_name != name:
                raise SchemaError(f"task_name {name!r} disagrees with condition {cond.task_name!r}")
            model = dmp_mod.DmpModel.from_dict(d["dmp"])
            duration = float(d["demo_duration_s"])
            anchor = GoalAnchor.from_dict(d.get("goal_anchor", {"arg": None, "offset": [0, 0, 0]}))
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError, UnknownVerb) as exc:
            raise SchemaError(f"bad demo data: {exc}") from exc
        return cls(cond, model, duration, anchor)


def save_demo(record: DemoRecord, path) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), indent=1))


def load_demo(path) -> DemoRecord:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return DemoRecord.from_dict(data)


# ---------------------------------------------------------------------------
# condition extraction


def _order_pre(atoms: Iterable[ConditionAtom]) -> list[ConditionAtom]:
    """Object states first, relations next, Grasping last.

    Satisfying pre-conditions in this order keeps the gripper free for as long
    as possible (a container is opened before the object is picked up).
    """
    def rank(a):
        if isinstance(a, StateAtom):
            return 2 if a.kind is StateKind.GRASPING else 0
        return 1
    return sorted(atoms, key=rank)


def _drop_dual_below(atoms: list[ConditionAtom]) -> list[ConditionAtom]:
    """Remove ``b below a`` when ``a above b`` is also present."""
    above = {(a.subject, a.object) for a in atoms
             if isinstance(a, RelationAtom) and a.relation is SpatialRelation.ABOVE and not a.negated}
    return [a for a in atoms if not (isinstance(a, RelationAtom) and a.relation is SpatialRelation.BELOW
                                     and (a.object, a.subject) in above)]


def gen_cond_from_env(pre_world: World, post_world: World, collision_log: Sequence[CollisionReport],
                      task: PrimitiveTaskName) -> TaskCondition:
    for oid in task.args:
        if oid not in pre_world.objects or oid not in post_world.objects:
            raise UnknownObject(f"task object {oid!r} missing from the world")
    if set(pre_world.objects) != set(post_world.objects):
        raise UnknownObject("pre and post worlds have different objects")
    relevant = tuple(task.args) + (GRIPPER,)

    before = _drop_dual_below(restrict(current_conditions(pre_world), relevant))
    after = _drop_dual_below(restrict(current_conditions(post_world), relevant))
    post = [a for a in after if a not in before]
    if not post:
        # the task undid something: record the negation of what vanished
        post = [~a for a in before if isinstance(a, StateAtom) and a not in after]
    if not post:
        # nothing changed at all (e.g. Move keeps holding the object)
        post = list(after)
    if not post:
        raise SchemaError(f"{task}: demonstration changed nothing observable")

    pairs: set[CollisionPair] = set()
    for report in collision_log:
        pairs.update(report.pairs)
    return TaskCondition(
        task_name=str(task),
        relevant_objects=relevant,
        pre_conditions=tuple(_order_pre(before)),
        post_conditions=tuple(post),
        allowed_collisions=tuple(sorted(pairs)),
    )


def record_raw(world: World, task: PrimitiveTaskName) -> tuple[dict, World]:
    """Scripted demonstration -> (raw demo data, world after the demo).

    Raw data holds the demonstrated trajectory, the condition read off the
    environment and the goal anchor; :func:`learn_raw` turns it into a record.
    """
    traj, log = scripted_demo(world, task)
    post_world = replay(world.copy(), traj)
    cond = gen_cond_from_env(world, post_world, log, task)
    anchor = anchor_for(world, task, traj.positions[-1])
    raw = {"task_name": str(task), "condition": condition_to_dict(cond),
           "trajectory": trajectory_to_dict(traj), "goal_anchor": anchor.to_dict()}
    return raw, post_world


def learn_raw(raw: dict, n_basis: int = dmp_mod.N_BASIS) -> DemoRecord:
    try:
        cond = condition_from_dict(raw["condition"])
        traj = trajectory_from_dict(raw["trajectory"])
        anchor = GoalAnchor.from_dict(raw["goal_anchor"])
    except KeyError as exc:
        raise SchemaError(f"raw demo is missing {exc}") from exc
    model = dmp_mod.fit(traj, n_basis)
    return DemoRecord(cond, model, model.demo_duration, anchor)


def record_demo(world: World, task: PrimitiveTaskName, n_basis: int = dmp_mod.N_BASIS) -> tuple[DemoRecord, World]:
    """Scripted demonstration -> (demo record, world after the demo)."""
    raw, post_world = record_raw(world, task)
    return learn_raw(raw, n_basis), post_world


# ---------------------------------------------------------------------------
# Cond2Task


@dataclass(frozen=True)
class Cond2Task:
    """Human-authored table from condition atoms to primitive tasks.

    Keys are ``"<atom kind>"`` or ``"not <atom kind>"`` where the kind is a
    state name or a relation word; values give the verb and which atom fields
    become its arguments (``subject``/``object`` for relations, ``obj`` for states).
    """

    rows: dict

    @classmethod
    def load(cls, path=None) -> "Cond2Task":
        path = data_path("cond2task.json") if path is None else Path(path)
        try:
            rows = json.loads(Path(path).read_text())
            for key, row in rows.items():
                Verb(row["verb"])
                if not all(a in ("subject", "object", "obj") for a in row["args"]):
                    raise ValueError(f"{key}: unknown argument field")
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad cond2task table {path}: {exc}") from exc
        return cls(rows)

    def __call__(self, atom: ConditionAtom) -> PrimitiveTaskName:
        if isinstance(atom, RelationAtom):
            kind = atom.relation.value
            fields = {"subject": atom.subject, "object": atom.object}
        else:
            kind = atom.kind.value
            fields = {"obj": atom.obj}
        key = f"not {kind}" if atom.negated else kind
        row = self.rows.get(key)
        if row is None:
            raise UnmappableAtom(f"no primitive task establishes '{atom}'")
        try:
            return PrimitiveTaskName(Verb(row["verb"]), tuple(fields[a] for a in row["args"]))
        except KeyError as exc:
            raise UnmappableAtom(f"table row {key!r} does not fit '{atom}'") from exc


_DEFAULT_TABLE: Cond2Task | None = None


def cond_to_task(atom: ConditionAtom, table: Cond2Task | None = None) -> PrimitiveTaskName:
    global _DEFAULT_TABLE
    if table is None:
        if _DEFAULT_TABLE is None:
            _DEFAULT_TABLE = Cond2Task.load()
        table = _DEFAULT_TABLE
    return table(atom)


# ---------------------------------------------------------------------------
# fixtures: long-horizon scripts, scenes and the demo library


def load_lht_scripts(path=None) -> dict:
    path = data_path("lht.json") if path is None else Path(path)
    return json.loads(Path(path).read_text())


def scene_path(name: str) -> Path:
    return data_path("scenes", f"{name}.json")


@dataclass
class DemoLibrary:
    """Every recorded demo by task name; trajectories are looked up by verb."""

    records: dict[str, DemoRecord]
    # task name -> (lht id, step index) of its first demonstration
    origin: dict[str, tuple[str, int]] = field(default_factory=dict)

    def by_verb(self) -> dict[Verb, DemoRecord]:
        lib: dict[Verb, DemoRecord] = {}
        for rec in self.records.values():
            lib.setdefault(rec.task.verb, rec)
        return lib

    def conditions(self) -> dict[str, TaskCondition]:
        return {name: r.condition for name, r in self.records.items()}

    def save(self, directory) -> list[Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, (name, rec) in enumerate(self.records.items()):
            lht, step = self.origin.get(name, ("", 0))
            p = out / f"{i:02d}_{name.replace(' ', '_')}.json"
            data = rec.to_dict()
            data["origin"] = [lht, step]
            p.write_text(json.dumps(data, indent=1))
            paths.append(p)
        return paths

    @classmethod
    def load(cls, directory) -> "DemoLibrary":
        records, origin = {}, {}
        for p in sorted(Path(directory).glob("*.json")):
            data = json.loads(p.read_text())
            rec = DemoRecord.from_dict(data)
            records[rec.condition.task_name] = rec
            if "origin" in data:
                origin[rec.condition.task_name] = tuple(data["origin"])
        return cls(records, origin)


def build_library(lhts: dict | None = None, scene_loader=None) -> DemoLibrary:
    """Record scripted demos for every step of the demonstrated long-horizon tasks."""
    from .world import load_scene

    lhts = load_lht_scripts() if lhts is None else lhts
    scene_loader = scene_loader or (lambda name: load_scene(scene_path(name)))
    records: dict[str, DemoRecord] = {}
    origin: dict[str, tuple[str, int]] = {}
    for lht_id, spec in lhts.items():
        if not spec.get("demonstrated", False):
            continue
        world = scene_loader(spec["scene"])
        for step, text in enumerate(spec["tasks"]):
            task = parse_task_name(text)
            rec, world = record_demo(world, task)
            if str(task) not in records:
                records[str(task)] = rec
                origin[str(task)] = (lht_id, step)
    return DemoLibrary(records, origin)


def load_reference_conditions(path=None) -> dict[str, TaskCondition]:
    """Hand-labeled conditions, written in the condition text format."""
    from .llmcond import parse_condition

    path = data_path("reference_conditions.json") if path is None else Path(path)
    out = {}
    for name, text in json.loads(Path(path).read_text()).items():
        outcome = parse_condition(text, parse_task_name(name))
        if outcome.condition is None:
            raise SchemaError(f"reference condition for {name!r} does not parse: {outcome.message}")
        out[name] = outcome.condition
    return out
