"""Benchmark harness: primitive-task and long-horizon success-rate tables."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cond import DemoLibrary, build_library, load_lht_scripts, load_reference_conditions, scene_path
from .core import GRIPPER, Pose, PrimitiveTaskName, TaskCondition, Verb, Vec3, parse_task_name
from .errors import MissingDemo, SchemaError
from .execution import (ExecConfig, ExecTrace, LlmSource, TableSource, run_long_horizon,
                        run_without_conditions)
from .percept import Aabb, atoms_satisfied
from .world import ObjectKind, SceneObject, World, load_scene, replay, sample_cloud, scripted_path


class Arm(enum.Enum):
    NO_COND = "NoCond"
    FROM_ENV = "CondFromEnv"
    FROM_LLM = "CondFromLLM"


class Case(enum.Enum):
    SAME_AS_DEMO = "SameAsDemo"
    NOVEL_OBJECTS = "NovelObjects"
    NOVEL_PRIMITIVE = "NovelPrimitive"


ARM_HEADERS = {Arm.NO_COND: "w/o Cond", Arm.FROM_ENV: "w/ Cond FromEnv", Arm.FROM_LLM: "w/ Cond from LLM"}
ARMS = tuple(Arm)
VERB_ORDER = (Verb.GRASP, Verb.RELEASE, Verb.OPEN, Verb.CLOSE, Verb.TILT, Verb.FOLD, Verb.MOVE,
              Verb.MOVE_IN_TO, Verb.MOVE_ON_TOP, Verb.MOVE_IN_FRONT)


@dataclass(frozen=True)
class EpisodeReport:
    task: str
    arm: Arm
    seed: int
    success: bool
    runtime_s: float
    n_goal_adjustments: int
    generation_verdict: str | None = None
    distractor: bool = False

    def __post_init__(self):
        if self.runtime_s < 0:
            raise ValueError("runtime must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arm"] = self.arm.value
        return d


@dataclass
class BenchConfig:
    episodes_per_cell: int = 50
    lht_episodes: int = 10
    seed: int = 0
    jitter_sigma: float = 0.005
    distractor_prob: float = 0.5
    arms: tuple[Arm, ...] = ARMS
    cases: tuple[Case, ...] = tuple(Case)
    llm: str = "mock"  # mock | replay:<path> | remote
    two_chat: bool = False
    out: Path | None = None
    exec: ExecConfig = field(default_factory=ExecConfig)
    lht_file: Path | None = None

    def __post_init__(self):
        if self.episodes_per_cell < 1 or self.lht_episodes < 1:
            raise ValueError("episodes per cell must be at least 1")
        if self.jitter_sigma < 0 or not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("jitter must be >= 0 and distractor probability in [0, 1]")


def load_bench_config(path) -> BenchConfig:
    import tomli

    try:
        data = tomli.loads(Path(path).read_text())
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    b = data.get("bench", data)
    e = data.get("exec", {})
    try:
        return BenchConfig(
            episodes_per_cell=int(b.get("episodes_per_cell", 50)),
            lht_episodes=int(b.get("lht_episodes", 10)),
            seed=int(b.get("seed", 0)),
            jitter_sigma=float(b.get("jitter_sigma", 0.005)),
            distractor_prob=float(b.get("distractor_prob", 0.5)),
            arms=tuple(Arm(a) for a in b.get("arms", [a.value for a in ARMS])),
            cases=tuple(Case(c) for c in b.get("cases", [c.value for c in Case])),
            llm=str(b.get("llm", "mock")),
            two_chat=bool(b.get("two_chat", False)),
            out=Path(b["out"]) if "out" in b else None,
            exec=ExecConfig(**e),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad bench config {path}: {exc}") from exc


def make_backend(spec: str, transcript=None):
    from .llmcond import MockTable, RemoteEndpoint, ReplayLog

    if spec == "mock":
        return MockTable.default()
    if spec.startswith("replay:"):
        return ReplayLog(spec.split(":", 1)[1])
    if spec == "remote":
        return RemoteEndpoint.from_env(transcript)
    raise ValueError(f"unknown LLM backend {spec!r}")


# ---------------------------------------------------------------------------
# tables


@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)  # first cell is the row label

    def cell(self, row: str, column: str):
        j = self.columns.index(column)
        for r in self.rows:
            if r[0] == row:
                return r[j]
        raise KeyError(row)

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": list(self.columns), "rows": [list(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "Table":
        return cls(d["title"], list(d["columns"]), [list(r) for r in d["rows"]])


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{100.0 * v:.1f}%"
    return str(v)


def render_table(table: Table, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(table.to_dict(), indent=1) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(table.columns)
        for r in table.rows:
            w.writerow(["-" if v is None else v for v in r])
        return buf.getvalue()
    if fmt == "text":
        lines = [" | ".join(table.columns)]
        lines.extend(" | ".join(_fmt(v) for v in r) for r in table.rows)
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def report(table: Table, fmt: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_table(table, fmt), newline="")
    return path


def read_table_json(path) -> Table:
    return Table.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# scene perturbation

DISTRACTOR = "vase"
DISTRACTOR_SHAPE = {"cylinder": [0.025, 0.10]}


def episode_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def jitter_world(world: World, rng: np.random.Generator, sigma: float) -> World:
    """Shift every movable object in x and y by N(0, sigma)."""
    for oid in sorted(world.objects):
        o = world.objects[oid]
        if o.fixed or sigma == 0:
            continue
        dx, dy = rng.normal(0.0, sigma, 2)
        p = o.pose.position
        o.set_pose(Pose(Vec3(p.x + dx, p.y + dy, p.z), o.pose.orientation))
    return world


def table_top(world: World) -> float:
    return float(world.aabb("table").max[2]) if "table" in world.objects else 0.0


def place_distractor(world: World, goal, rng: np.random.Generator, tries: int = 16) -> bool:
    """Stand a fragile object on the table beside the gripper-to-goal path.

    The spot is a random point of the path's second half, pushed sideways by
    5-10 cm. Returns False when no free spot is found.
    """
    r, h = DISTRACTOR_SHAPE["cylinder"]
    if "table" not in world.objects:
        return False
    top = world.aabb("table")
    start = world.gripper_position
    d = np.asarray(goal, dtype=float)[:2] - start[:2]
    cloud = sample_cloud(DISTRACTOR_SHAPE, 120, rng)
    for _ in range(tries):
        u = rng.uniform(0.5, 1.0)
        base = start[:2] + u * d
        if np.linalg.norm(d) > 1e-2:
            side = np.array([-d[1], d[0]]) / np.linalg.norm(d) * rng.choice([-1.0, 1.0])
        else:
            ang = rng.uniform(0, 2 * math.pi)
            side = np.array([math.cos(ang), math.sin(ang)])
        xy = base + side * rng.uniform(0.05, 0.10)
        c = np.array([xy[0], xy[1], top.max[2] + h / 2])
        box = Aabb(c - [r, r, h / 2], c + [r, r, h / 2]).inflate(0.01)
        blocked = any(i != "table" and world.aabb(i).intersects(box) for i in world.objects)
        blocked = blocked or world.gripper_aabb().intersects(box)
        on_table = bool(np.all(top.min[:2] + r <= xy) and np.all(xy <= top.max[:2] - r))
        if not blocked and on_table:
            world.objects[DISTRACTOR] = SceneObject(DISTRACTOR, cloud, Pose(Vec3(*c)), ObjectKind.RIGID,
                                                    fragile=True, shape=dict(DISTRACTOR_SHAPE))
            return True
    return False


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Harness:
    cfg: BenchConfig
    library: DemoLibrary
    lhts: dict
    references: dict[str, TaskCondition]
    backend: object = None
    traces: list = field(default_factory=list)  # (episode id, trace) for export

    @classmethod
    def create(cls, cfg: BenchConfig, library: DemoLibrary | None = None) -> "Harness":
        lhts = load_lht_scripts(cfg.lht_file)
        lib = library or build_library(lhts)
        return cls(cfg, lib, lhts, load_reference_conditions(), make_backend(cfg.llm))

    def examples(self) -> list:
        return list(self.library.records.values())

    def _check(self, world: World, task: PrimitiveTaskName, *_):
        ref = self.references.get(str(task))
        return ref is not None and atoms_satisfied(world, ref.post_conditions)[0] and not world.toppled()

    def source(self, arm: Arm, exclude_same_verb: bool = False):
        if arm is Arm.FROM_ENV:
            return TableSource(self.library.conditions())
        return LlmSource(self.backend, self.examples(), exclude_same_verb, two_chat=self.cfg.two_chat)

    def run_arm(self, arm: Arm, world: World, tasks: Sequence, exclude_same_verb: bool = False):
        library = self.library.by_verb()
        if arm is Arm.NO_COND:
            ok, trace = run_without_conditions(world, tasks, library, self.cfg.exec, post_check=self._check)
            return ok, trace, None
        src = self.source(arm, exclude_same_verb)
        ok, trace = run_long_horizon(world, tasks, library, src, self.cfg.exec, post_check=self._check)
        verdict = None
        if isinstance(src, LlmSource) and src.outcomes:
            verdicts = [o.verdict.value for o in src.outcomes.values()]
            verdict = next((v for v in verdicts if v != "Success"), "Success")
        return ok, trace, verdict

    # -- primitive suite ----------------------------------------------------

    def primitive_start(self, verb: Verb, seed: int, episode: int) -> tuple[World, PrimitiveTaskName, bool]:
        """Jittered scene with the demonstrated prefix replayed, plus an optional distractor."""
        rec = self.library.by_verb().get(verb)
        if rec is None:
            raise MissingDemo(f"no demonstration for verb {verb.value!r}")
        lht_id, step = self.library.origin[str(rec.task)]
        spec = self.lhts[lht_id]
        rng = episode_rng(seed, VERB_ORDER.index(verb), episode)
        world = jitter_world(load_scene(scene_path(spec["scene"])), rng, self.cfg.jitter_sigma)
        for text in spec["tasks"][:step]:
            replay(world, scripted_path(world, parse_task_name(text)))
        task = rec.task
        placed = False
        if rng.random() < self.cfg.distractor_prob:
            placed = place_distractor(world, rec.anchor.goal(world, task), rng)
        return world, task, placed

    def primitive_episode(self, verb: Verb, seed: int, episode: int, arms: Iterable[Arm]) -> list[EpisodeReport]:
        start, task, placed = self.primitive_start(verb, seed, episode)
        out = []
        for arm in arms:
            world = start.copy()
            t0 = world.sim_time
            ok, trace, verdict = self.run_arm(arm, world, [task])
            out.append(EpisodeReport(str(task), arm, episode, bool(ok), round(world.sim_time - t0, 6),
                                     trace.goal_adjustments(), verdict, placed))
            self.traces.append((f"pt_{verb.value}_{arm.value}_{episode}", trace))
        return out

    def run_primitive_suite(self, verbs: Sequence[Verb] = VERB_ORDER) -> tuple[Table, list[EpisodeReport]]:
        reports: list[EpisodeReport] = []
        table = Table("Primitive task execution success rate", ["PT Name"] + [ARM_HEADERS[a] for a in ARMS])
        for verb in verbs:
            rows = []
            for ep in range(self.cfg.episodes_per_cell):
                rows.extend(self.primitive_episode(verb, self.cfg.seed, ep, self.cfg.arms))
            reports.extend(rows)
            cells = []
            for arm in ARMS:
                hits = [r.success for r in rows if r.arm is arm]
                cells.append(round(sum(hits) / len(hits), 6) if hits else None)
            table.rows.append([verb.title] + cells)
        return table, reports

    # -- long-horizon suite -------------------------------------------------

    def lht_rows(self, case: Case) -> list[str]:
        if case is Case.NOVEL_OBJECTS:
            return [k for k, v in self.lhts.items() if v.get("novel_of")]
        return [k for k, v in self.lhts.items() if v.get("demonstrated")]

    @staticmethod
    def feasible(arm: Arm, case: Case) -> bool:
        return case is Case.SAME_AS_DEMO or arm is Arm.FROM_LLM

    def lht_episode(self, lht_id: str, case: Case, arm: Arm, seed: int, episode: int) -> EpisodeReport:
        spec = self.lhts[lht_id]
        rng = episode_rng(seed, 1000 + list(self.lhts).index(lht_id), episode)
        world = jitter_world(load_scene(scene_path(spec["scene"])), rng, self.cfg.jitter_sigma)
        ok, trace, verdict = self.run_arm(arm, world, spec["tasks"], case is Case.NOVEL_PRIMITIVE)
        self.traces.append((f"lht_{lht_id}_{case.value}_{arm.value}_{episode}", trace))
        return EpisodeReport(lht_id, arm, episode, bool(ok), round(world.sim_time, 6), trace.goal_adjustments(),
                             verdict)

    def run_lht_suite(self, cases: Sequence[Case] | None = None) -> tuple[Table, list[EpisodeReport]]:
        cases = self.cfg.cases if cases is None else cases
        table = Table("Evaluation of long-horizon tasks ('-' for infeasible)",
                      ["LHT Name", "Case"] + [ARM_HEADERS[a] for a in ARMS])
        reports = []
        for case in cases:
            for lht_id in self.lht_rows(case):
                cells = []
                for arm in ARMS:
                    if arm not in self.cfg.arms or not self.feasible(arm, case):
                        cells.append(None)
                        continue
                    eps = [self.lht_episode(lht_id, case, arm, self.cfg.seed, ep)
                           for ep in range(self.cfg.lht_episodes)]
                    reports.extend(eps)
                    cells.append(round(sum(e.success for e in eps) / len(eps), 6))
                table.rows.append([lht_id, case.value] + cells)
        return table, reports

    # -- output ---------------------------------------------------------------

    def export_traces(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, trace in self.traces:
            (d / f"{name.replace('*', '_novel')}.jsonl").write_text(trace.to_jsonl())


def write_reports(table: Table, stem: Path, formats: Sequence[str] = ("text", "csv", "json")) -> list[Path]:
    ext = {"text": "txt", "csv": "csv", "json": "json"}
    return [report(table, f, stem.with_suffix("." + ext[f])) for f in formats]


def write_episodes(reports: Sequence[EpisodeReport], path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports))


def run_bench(cfg: BenchConfig, out, library: DemoLibrary | None = None) -> dict[str, Table]:
    out = Path(out)
    h = Harness.create(cfg, library)
    pt, pt_reports = h.run_primitive_suite()
    lht, lht_reports = h.run_lht_suite()
    write_reports(pt, out / "primitive")
    write_reports(lht, out / "lht")
    write_episodes(pt_reports + lht_reports, out / "episodes.jsonl")
    h.export_traces(out / "traces")
    return {"primitive": pt, "lht": lht}
