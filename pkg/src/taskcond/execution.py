"""Pre-condition satisfaction and condition-guided DMP execution.

``execute_task`` runs one task frame: it first satisfies unmet pre-conditions
by spawning the primitive tasks that establish them (recursively), then plays
a DMP rollout while watching for unexpected contacts and the post-conditions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from . import dmp as dmp_mod
from .cond import Cond2Task, DemoRecord, cond_to_task
from .core import (CollisionPair, ConditionAtom, PrimitiveTaskName, TaskCondition, Verb, Pose, Vec3,
                   parse_task_name, quat_conj, quat_mul, quat_normalize, slerp)
from .errors import (ConditionGenerationFailed, MissingDemo, RecursionLimit, TaskCondError)
from .percept import atom_holds, atoms_satisfied
from .world import World

TERMINAL = ("PostCondMet", "TimedOut", "Failed")


@dataclass(frozen=True)
class ExecConfig:
    time_budget: float = 60.0
    backup_steps: int = 10
    recursion_limit: int = 5
    rollout_rate: float = 100.0

    def __post_init__(self):
        if self.time_budget <= 0 or self.backup_steps <= 0 or self.recursion_limit <= 0 or self.rollout_rate <= 0:
            raise ValueError("execution settings must all be positive")


@dataclass(frozen=True)
class Event:
    kind: str
    task: str
    frame: int
    depth: int
    time: float
    data: dict = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return self.kind in TERMINAL


@dataclass
class ExecTrace:
    events: list[Event] = field(default_factory=list)
    _frames: int = 0

    def new_frame(self) -> int:
        self._frames += 1
        return self._frames - 1

    def add(self, kind: str, task, frame: int, depth: int, world: World, **data) -> Event:
        ev = Event(kind, str(task), frame, depth, round(world.sim_time, 9), data)
        self.events.append(ev)
        return ev

    def kinds(self) -> list[str]:
        return [e.kind for e in self.events]

    def of_frame(self, frame: int) -> list[Event]:
        return [e for e in self.events if e.frame == frame]

    def terminal_of(self, frame: int) -> Event | None:
        ends = [e for e in self.events if e.frame == frame and e.terminal]
        return ends[-1] if ends else None

    def root_terminal(self) -> Event | None:
        return self.terminal_of(0)

    def goal_adjustments(self) -> int:
        return sum(e.kind == "GoalAdjusted" for e in self.events)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True, default=_jsonable) + "\n" for e in self.events)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


# ---------------------------------------------------------------------------
# condition sources


class ConditionSource(Protocol):
    name: str

    def condition_for(self, task: PrimitiveTaskName) -> TaskCondition: ...


@dataclass
class TableSource:
    """Conditions looked up by exact task name (the demo condition store)."""

    conditions: Mapping[str, TaskCondition]
    name: str = "FromEnv"

    def condition_for(self, task: PrimitiveTaskName) -> TaskCondition:
        cond = self.conditions.get(str(task))
        if cond is None:
            raise ConditionGenerationFailed(str(task), None)
        return cond


@dataclass
class LlmSource:
    """Conditions generated on demand by a chat backend (cached per task name)."""

    backend: object
    examples: list
    exclude_same_verb: bool = False
    max_retries: int = 3
    two_chat: bool = False
    name: str = "LLM"
    outcomes: dict = field(default_factory=dict)

    def condition_for(self, task: PrimitiveTaskName) -> TaskCondition:
        from .llmcond import build_generalization_prompt, generate_condition

        key = str(task)
        if key not in self.outcomes:
            bundle = build_generalization_prompt(task, self.examples, self.exclude_same_verb)
            self.outcomes[key] = generate_condition(self.backend, bundle, self.max_retries,
                                                    two_chat=self.two_chat)
        outcome = self.outcomes[key]
        if not outcome.ok:
            raise ConditionGenerationFailed(key, outcome)
        return outcome.condition


# ---------------------------------------------------------------------------
# trajectory generation


def goal_adjust(goal, coll_pos) -> np.ndarray:
    """Reflect the goal away from the contact point: g + (g - c)."""
    g = np.asarray(goal, dtype=float)
    return g + (g - np.asarray(coll_pos, dtype=float))


@dataclass
class Plan:
    """A DMP rollout that can be retargeted mid-way."""

    record: DemoRecord
    y0: np.ndarray
    goal: np.ndarray
    q0: np.ndarray
    qg: np.ndarray
    rate: float
    states: dmp_mod.DmpStates = None

    @classmethod
    def make(cls, world: World, record: DemoRecord, task: PrimitiveTaskName, rate: float) -> "Plan":
        goal = record.anchor.goal(world, task)
        q0 = np.asarray(world.gripper_pose.orientation, dtype=float)
        m = record.dmp
        q_rel = quat_mul(m.q_goal, quat_conj(m.q_start))
        plan = cls(record, world.gripper_position.copy(), goal, q0, quat_normalize(quat_mul(q_rel, q0)), rate)
        plan.states = dmp_mod.integrate(m, plan.y0, goal, plan.n - 1, 1.0 / rate, plan.duration)
        return plan

    @property
    def duration(self) -> float:
        return self.record.demo_duration

    @property
    def n(self) -> int:
        return dmp_mod.sample_count(self.duration, self.rate)

    def waypoint(self, i: int) -> tuple[Pose, bool]:
        s = min((i / self.rate) / self.duration, 1.0)
        q = quat_normalize(slerp(self.q0, self.qg, s))
        return Pose(Vec3.of(self.states.y[i]), tuple(q)), self.record.dmp.gripper_at(s)

    def retarget(self, index: int, goal) -> None:
        """Online goal change: integrate the rest of the rollout from sample ``index``."""
        st = self.states
        rest = dmp_mod.integrate(self.record.dmp, self.y0, goal, self.n - 1 - index, st.dt, st.tau,
                                 y_start=st.y[index], z_start=st.z[index], x_start=float(st.x[index]))
        self.states = dmp_mod.DmpStates(np.vstack([st.y[:index], rest.y]), np.vstack([st.z[:index], rest.z]),
                                        np.concatenate([st.x[:index], rest.x]), st.y0, np.asarray(goal, float),
                                        st.tau, st.dt, st.substeps)
        self.goal = np.asarray(goal, dtype=float)


def _record_for(library: Mapping[Verb, DemoRecord], task: PrimitiveTaskName) -> DemoRecord:
    rec = library.get(task.verb)
    if rec is None:
        raise MissingDemo(f"no demonstration for verb {task.verb.value!r}")
    return rec


def _watched(world: World, pair: CollisionPair) -> bool:
    moving = world.moving_bodies()
    return pair.a in moving or pair.b in moving


def control_with_cond(world: World, cond: TaskCondition, record: DemoRecord, cfg: ExecConfig,
                      trace: ExecTrace | None = None, *, frame: int = 0, depth: int = 0) -> ExecTrace:
    """Play the DMP rollout for ``cond``'s task, adjusting the goal on unexpected contacts.

    Appends exactly one terminal event (PostCondMet, TimedOut or Failed) for ``frame``.
    """
    trace = ExecTrace() if trace is None else trace
    task = cond.task
    if record.task.verb is not task.verb:
        raise ValueError(f"demo {record.task} does not match task {task}")
    start = world.sim_time
    dt = 1.0 / cfg.rollout_rate
    post = list(cond.post_conditions)
    # a task whose post-conditions already hold at the start (e.g. Move keeps
    # holding the object) runs its full rollout before being judged
    maintain = atoms_satisfied(world, post)[0]

    plan = Plan.make(world, record, task, cfg.rollout_rate)
    baseline = set(world.collisions().pairs)
    engaged: set[CollisionPair] = set()  # offending pairs not yet separated
    index, last = 0, plan.n - 1
    moved = False

    def done(kind: str, **data) -> ExecTrace:
        trace.add(kind, task, frame, depth, world, runtime=round(world.sim_time - start, 9), **data)
        return trace

    if not maintain and atoms_satisfied(world, post)[0]:
        return done("PostCondMet")
    while True:
        if world.sim_time - start > cfg.time_budget:
            return done("TimedOut")
        if index >= last:
            ok, unmet = atoms_satisfied(world, post)
            if ok:
                return done("PostCondMet")
            return done("Failed", reason="trajectory exhausted", unmet=[str(a) for a in unmet])
        index += 1
        pose, closed = plan.waypoint(index)
        if not moved:
            trace.add("MotionStarted", task, frame, depth, world, index=index)
            moved = True
        world.step_to(pose, closed, dt)

        current = world.collisions().pairs
        engaged &= set(current)
        offending = sorted(p for p in current if p not in baseline and p not in engaged
                           and not cond.allows(p) and _watched(world, p))
        if offending:
            pair = offending[0]
            coll_pos = world.overlap_center(pair)
            engaged.update(offending)
            hit = index
            index = max(0, index - cfg.backup_steps)
            pose, closed = plan.waypoint(index)
            world.step_to(pose, closed, dt)
            old = plan.goal.copy()
            new = goal_adjust(old, coll_pos)
            plan.retarget(index, new)
            trace.add("GoalAdjusted", task, frame, depth, world, old=old.tolist(), new=new.tolist(),
                      coll_pos=coll_pos.tolist(), pair=[pair.a, pair.b], at=hit, index=index)
            continue
        if not maintain and atoms_satisfied(world, post)[0]:
            return done("PostCondMet")


class _SubtaskFailed(TaskCondError):
    pass


def satisfy_pre_cond(world: World, cond: TaskCondition, library: Mapping[Verb, DemoRecord],
                     source: ConditionSource, cfg: ExecConfig, depth: int = 0, trace: ExecTrace | None = None,
                     *, frame: int = 0, table: Cond2Task | None = None) -> ExecTrace:
    """Spawn and run the primitive task for every unmet pre-condition, in order."""
    if depth > cfg.recursion_limit:
        raise RecursionLimit(depth, trace)
    trace = ExecTrace() if trace is None else trace
    task = cond.task
    start = world.sim_time
    for atom in cond.pre_conditions:
        if world.sim_time - start > cfg.time_budget:
            break
        # re-read the scene before every check; earlier subtasks may have changed it
        if atom_holds(world, atom):
            continue
        trace.add("PreCondUnmet", task, frame, depth, world, atom=str(atom))
        new_task = cond_to_task(atom, table)
        if depth + 1 > cfg.recursion_limit:
            raise RecursionLimit(depth + 1, trace)
        new_cond = source.condition_for(new_task)
        trace.add("SubtaskSpawned", task, frame, depth, world, subtask=str(new_task))
        end = execute_task(world, new_task, new_cond, library, source, cfg, trace, depth=depth + 1, table=table)
        if end.kind != "PostCondMet":
            raise _SubtaskFailed(f"subtask {new_task} ended with {end.kind}")
    return trace


def execute_task(world: World, task: PrimitiveTaskName, cond: TaskCondition, library: Mapping[Verb, DemoRecord],
                 source: ConditionSource, cfg: ExecConfig, trace: ExecTrace, *, depth: int = 0,
                 table: Cond2Task | None = None) -> Event:
    """One task frame: TaskStarted, pre-condition satisfaction, guided motion, terminal event."""
    frame = trace.new_frame()
    trace.add("TaskStarted", task, frame, depth, world)
    try:
        record = _record_for(library, task)
        satisfy_pre_cond(world, cond, library, source, cfg, depth, trace, frame=frame, table=table)
        control_with_cond(world, cond, record, cfg, trace, frame=frame, depth=depth)
    except RecursionLimit:
        trace.add("Failed", task, frame, depth, world, reason="recursion limit")
        raise
    except TaskCondError as exc:
        trace.add("Failed", task, frame, depth, world, reason=f"{type(exc).__name__}: {exc}")
    return trace.terminal_of(frame)


def run_long_horizon(world: World, tasks, library: Mapping[Verb, DemoRecord], source: ConditionSource,
                     cfg: ExecConfig = ExecConfig(), *, table: Cond2Task | None = None,
                     post_check: Callable[[World, PrimitiveTaskName, TaskCondition], bool] | None = None
                     ) -> tuple[bool, ExecTrace]:
    """Run tasks in order; stop at the first one that does not end with PostCondMet."""
    if not tasks:
        raise ValueError("no tasks given")
    trace = ExecTrace()
    for item in tasks:
        try:
            task = item if isinstance(item, PrimitiveTaskName) else parse_task_name(item)
            cond = source.condition_for(task)
        except TaskCondError as exc:
            frame = trace.new_frame()
            trace.add("TaskStarted", item, frame, 0, world)
            trace.add("Failed", item, frame, 0, world, reason=f"{type(exc).__name__}: {exc}")
            return False, trace
        try:
            end = execute_task(world, task, cond, library, source, cfg, trace, table=table)
        except RecursionLimit:
            return False, trace
        if end.kind != "PostCondMet":
            return False, trace
        if post_check is not None and not post_check(world, task, cond):
            return False, trace
    return True, trace


def run_without_conditions(world: World, tasks, library: Mapping[Verb, DemoRecord], cfg: ExecConfig = ExecConfig(),
                           *, post_check: Callable[[World, PrimitiveTaskName], bool]) -> tuple[bool, ExecTrace]:
    """Baseline: play each raw rollout to its end, with no condition logic.

    ``post_check`` (usually the hand-labeled post-conditions) decides each task's outcome.
    """
    trace = ExecTrace()
    dt = 1.0 / cfg.rollout_rate
    for item in tasks:
        frame = trace.new_frame()
        trace.add("TaskStarted", item, frame, 0, world)
        try:
            task = item if isinstance(item, PrimitiveTaskName) else parse_task_name(item)
            plan = Plan.make(world, _record_for(library, task), task, cfg.rollout_rate)
        except TaskCondError as exc:
            trace.add("Failed", item, frame, 0, world, reason=f"{type(exc).__name__}: {exc}")
            return False, trace
        trace.add("MotionStarted", task, frame, 0, world, index=1)
        for i in range(1, plan.n):
            pose, closed = plan.waypoint(i)
            world.step_to(pose, closed, dt)
        if not post_check(world, task):
            trace.add("Failed", task, frame, 0, world, reason="post-conditions not met")
            return False, trace
        trace.add("PostCondMet", task, frame, 0, world)
    return True, trace
