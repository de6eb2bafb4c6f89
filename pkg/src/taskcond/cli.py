"""Command line: demo -> learn -> gencond -> run-pt / run-lht -> bench -> report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import bench as B
from .cond import (DemoLibrary, learn_raw, load_lht_scripts, record_raw, scene_path)
from .core import Verb, parse_task_name
from .errors import DegenerateDemo, TaskCondError
from .llmcond import (MockTable, RemoteEndpoint, build_generalization_prompt, generate_condition,
                      render_condition)
from .world import load_scene

log = logging.getLogger("taskcond")


def _library(args) -> DemoLibrary | None:
    if getattr(args, "demos", None):
        return DemoLibrary.load(args.demos)
    return None


def cmd_demo(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lhts = load_lht_scripts(args.lht)
    seen = set()
    for lht_id, spec in lhts.items():
        if not spec.get("demonstrated"):
            continue
        world = load_scene(args.scene or scene_path(spec["scene"]))
        for step, text in enumerate(spec["tasks"]):
            raw, world = record_raw(world, parse_task_name(text))
            if raw["task_name"] in seen:
                continue
            seen.add(raw["task_name"])
            raw["origin"] = [lht_id, step]
            path = out / f"{len(seen) - 1:02d}_{raw['task_name'].replace(' ', '_')}.json"
            path.write_text(json.dumps(raw, indent=1))
            print(path)
    return 0


def cmd_learn(args) -> int:
    records, origin = {}, {}
    for p in sorted(Path(args.raw).glob("*.json")):
        raw = json.loads(p.read_text())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateDemo)
            rec = learn_raw(raw, args.n_basis)
        records[rec.condition.task_name] = rec
        if "origin" in raw:
            origin[rec.condition.task_name] = tuple(raw["origin"])
    for p in DemoLibrary(records, origin).save(args.out):
        print(p)
    return 0


def cmd_gencond(args) -> int:
    task = parse_task_name(args.task)
    if args.source == "env":
        lib = _library(args) or B.build_library()
        cond = lib.conditions().get(str(task))
        if cond is None:
            print(f"no demonstration of {task}", file=sys.stderr)
            return 1
        print(render_condition(cond))
        return 0
    lib = _library(args) or B.build_library()
    backend = MockTable.default() if args.source == "mock" else RemoteEndpoint.from_env(args.transcript)
    bundle = build_generalization_prompt(task, lib.records.values(), args.exclude_same_verb)
    if args.show_prompt:
        print(bundle.text(), end="\n\n")
    outcome = generate_condition(backend, bundle, args.retries, two_chat=args.two_chat)
    print(f"# verdict: {outcome.verdict.value}, attempts: {outcome.attempts}")
    if outcome.condition is None:
        print(outcome.raw_text)
        print(f"# {outcome.message}", file=sys.stderr)
        return 1
    print(render_condition(outcome.condition))
    return 0


def _config(args) -> B.BenchConfig:
    cfg = B.load_bench_config(args.config) if args.config else B.BenchConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.episodes is not None:
        changes["episodes_per_cell"] = args.episodes
    if getattr(args, "lht_episodes", None) is not None:
        changes["lht_episodes"] = args.lht_episodes
    if args.llm:
        changes["llm"] = args.llm
    if args.two_chat:
        changes["two_chat"] = True
    return replace(cfg, **changes)


def _emit(table: B.Table, out: str | None, stem: str) -> None:
    print(B.render_table(table, "text"), end="")
    if out:
        for p in B.write_reports(table, Path(out) / stem):
            log.info("wrote %s", p)


def cmd_run_pt(args) -> int:
    cfg = _config(args)
    if args.arm:
        cfg = replace(cfg, arms=tuple(B.Arm(a) for a in args.arm))
    verbs = [Verb(v) for v in args.verb] if args.verb else list(B.VERB_ORDER)
    h = B.Harness.create(cfg, _library(args))
    table, reports = h.run_primitive_suite(verbs)
    _emit(table, args.out, "primitive")
    if args.out:
        B.write_episodes(reports, Path(args.out) / "primitive_episodes.jsonl")
        h.export_traces(Path(args.out) / "traces")
    return 0


def cmd_run_lht(args) -> int:
    cfg = _config(args)
    cases = tuple(B.Case(c) for c in args.case) if args.case else tuple(B.Case)
    h = B.Harness.create(cfg, _library(args))
    table, reports = h.run_lht_suite(cases)
    _emit(table, args.out, "lht")
    if args.out:
        B.write_episodes(reports, Path(args.out) / "lht_episodes.jsonl")
        h.export_traces(Path(args.out) / "traces")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = Path(args.out or (cfg.out if cfg.out else "bench_out"))
    tables = B.run_bench(cfg, out, _library(args))
    for t in tables.values():
        print(B.render_table(t, "text"))
    print(f"reports written to {out}")
    return 0


def cmd_report(args) -> int:
    table = B.read_table_json(args.table)
    if args.out:
        B.report(table, args.format, args.out)
    else:
        sys.stdout.write(B.render_table(table, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskcond", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo", help="record scripted demonstrations")
    d.add_argument("--out", required=True)
    d.add_argument("--lht", help="long-horizon task script file (default: bundled)")
    d.add_argument("--scene", help="override the scene file for every script")
    d.set_defaults(func=cmd_demo)

    l = sub.add_parser("learn", help="fit DMPs to recorded demonstrations")
    l.add_argument("--raw", required=True, help="directory written by 'demo'")
    l.add_argument("--out", required=True)
    l.add_argument("--n-basis", type=int, default=30)
    l.set_defaults(func=cmd_learn)

    g = sub.add_parser("gencond", help="generate one task condition")
    g.add_argument("task")
    g.add_argument("--source", choices=["env", "llm", "mock"], default="mock")
    g.add_argument("--demos", help="demo-data directory written by 'learn'")
    g.add_argument("--exclude-same-verb", action="store_true")
    g.add_argument("--two-chat", action="store_true")
    g.add_argument("--retries", type=int, default=3)
    g.add_argument("--transcript", help="append live exchanges to this JSON-lines file")
    g.add_argument("--show-prompt", action="store_true")
    g.set_defaults(func=cmd_gencond)

    def common(sp):
        sp.add_argument("--config", help="bench.toml")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--llm", help="mock | replay:<file> | remote")
        sp.add_argument("--two-chat", action="store_true")
        sp.add_argument("--demos")
        sp.add_argument("--out")

    r = sub.add_parser("run-pt", help="primitive task suite")
    common(r)
    r.add_argument("--verb", action="append", choices=[v.value for v in Verb])
    r.add_argument("--arm", action="append", choices=[a.value for a in B.Arm])
    r.set_defaults(func=cmd_run_pt)

    h = sub.add_parser("run-lht", help="long-horizon task suite")
    common(h)
    h.add_argument("--case", action="append", choices=[c.value for c in B.Case])
    h.add_argument("--lht-episodes", type=int)
    h.set_defaults(func=cmd_run_lht)

    b = sub.add_parser("bench", help="both suites, all report formats")
    common(b)
    b.add_argument("--lht-episodes", type=int)
    b.set_defaults(func=cmd_bench)

    rp = sub.add_parser("report", help="re-render a table saved as JSON")
    rp.add_argument("table")
    rp.add_argument("--format", choices=["text", "csv", "json"], default="text")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("ignore", DegenerateDemo)
    try:
        return args.func(args)
    except TaskCondError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
