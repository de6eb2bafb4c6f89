"""Task-condition generation with a chat model.

The condition text layout is a repo convention::

    Relevant objects: gripper, bottle
    Pre-conditions:
    - none
    Post-conditions:
    - gripper grasping bottle
    Collisions:
    - bottle, gripper

``render_condition`` writes it and ``parse_condition`` reads it back.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx

from .core import (GRIPPER, CollisionPair, ConditionAtom, PrimitiveTaskName, RelationAtom,
                   SpatialRelation, StateAtom, StateKind, TaskCondition, parse_task_name)
from .errors import BackendUnavailable, SelfCollision

log = logging.getLogger(__name__)

TEMPERATURE = 0.0
MAX_RETRIES = 3
PROMPT_VOCABULARY = ("above", "below", "inside", "in front of")
STATE_VOCABULARY = tuple(k.value for k in StateKind)

HEADERS = ("Relevant objects:", "Pre-conditions:", "Post-conditions:", "Collisions:")


class Verdict(enum.Enum):
    SUCCESS = "Success"
    PARSE_FAILURE = "ParseFailure"
    SEMANTIC_FAILURE = "SemanticFailure"


@dataclass(frozen=True)
class GenerationOutcome:
    condition: TaskCondition | None
    raw_text: str
    attempts: int
    verdict: Verdict
    message: str = ""
    parts: tuple = field(default=(), repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.verdict is Verdict.SUCCESS


# ---------------------------------------------------------------------------
# text format


def render_atom(atom: ConditionAtom) -> str:
    return str(atom)


def render_condition(cond: TaskCondition) -> str:
    lines = ["Relevant objects: " + ", ".join(cond.relevant_objects)]
    for header, atoms in (("Pre-conditions:", cond.pre_conditions),
                          ("Post-conditions:", cond.post_conditions)):
        lines.append(header)
        lines.extend(f"- {render_atom(a)}" for a in atoms) if atoms else lines.append("- none")
    lines.append("Collisions:")
    if cond.allowed_collisions:
        lines.extend(f"- {p.a}, {p.b}" for p in cond.allowed_collisions)
    else:
        lines.append("- none")
    return "\n".join(lines)


class _Semantic(Exception):
    pass


class _Syntax(Exception):
    pass


_STATE_RE = re.compile(r"^(\S+) is (\w+)$")
_GRASP_RE = re.compile(r"^(\S+) grasping (\S+)$")
_RELATIONS = sorted((r.value for r in SpatialRelation), key=len, reverse=True)


def parse_atom(text: str) -> ConditionAtom:
    s = " ".join(text.strip().rstrip(".").lower().split())
    negated = False
    if s.startswith("not "):
        negated, s = True, s[4:]
    m = _GRASP_RE.match(s)
    if m:
        atom: ConditionAtom = StateAtom(StateKind.GRASPING, m.group(2), m.group(1))
        return ~atom if negated else atom
    m = _STATE_RE.match(s)
    if m:
        try:
            kind = StateKind(m.group(2))
        except ValueError:
            raise _Semantic(f"unknown object state {m.group(2)!r} in '{text}'") from None
        if kind is StateKind.GRASPING:
            raise _Syntax(f"grasping needs a gripper and an object: '{text}'")
        atom = StateAtom(kind, m.group(1))
        return ~atom if negated else atom
    for rel in _RELATIONS:
        parts = s.split(f" {rel} ")
        if len(parts) == 2 and " " not in parts[0] and " " not in parts[1]:
            if parts[0] == parts[1]:
                raise _Semantic(f"'{text}' relates an object to itself")
            atom = RelationAtom(parts[0], SpatialRelation(rel), parts[1])
            return ~atom if negated else atom
    tokens = s.split()
    if len(tokens) >= 3:
        raise _Semantic(f"relation {' '.join(tokens[1:-1])!r} is not in the vocabulary")
    raise _Syntax(f"cannot read condition '{text}'")


def _split_sections(text: str) -> dict[str, list[str]]:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if lines and lines[0].lower().startswith("a:"):
        rest = lines[0][2:].strip()
        lines = ([rest] if rest else []) + lines[1:]
    sections: dict[str, list[str]] = {}
    current = None
    for ln in lines:
        for h in HEADERS:
            if ln.lower().startswith(h.lower()):
                current = h
                if current in sections:
                    raise _Syntax(f"section {h!r} appears twice")
                tail = ln[len(h):].strip()
                sections[current] = [tail] if tail else []
                break
        else:
            if current is None:
                raise _Syntax(f"text before the first section: {ln!r}")
            sections[current].append(ln)
    missing = [h for h in HEADERS if h not in sections]
    if missing:
        raise _Syntax(f"missing section(s): {', '.join(missing)}")
    return sections


def _bullets(lines: list[str]) -> list[str]:
    items = []
    for ln in lines:
        if not ln.startswith("-"):
            raise _Syntax(f"expected a '- ' item, got {ln!r}")
        item = ln[1:].strip()
        if item.lower() not in ("none", ""):
            items.append(item)
    return items


def parse_condition(text: str, task: PrimitiveTaskName, *, require_post: bool = True) -> GenerationOutcome:
    def fail(verdict: Verdict, msg: str) -> GenerationOutcome:
        return GenerationOutcome(None, text, 1, verdict, msg)

    if not text or not text.strip():
        return fail(Verdict.PARSE_FAILURE, "empty response")
    try:
        sec = _split_sections(text)
        rel_lines = sec["Relevant objects:"]
        if rel_lines and not rel_lines[0].startswith("-"):
            relevant = [o.strip().lower() for o in ",".join(rel_lines).split(",") if o.strip()]
        else:
            relevant = [o.lower() for o in _bullets(rel_lines)]
        if any(" " in o for o in relevant):
            raise _Syntax(f"object ids cannot contain spaces: {relevant}")
        pre = [parse_atom(a) for a in _bullets(sec["Pre-conditions:"])]
        post = [parse_atom(a) for a in _bullets(sec["Post-conditions:"])]
        pairs = []
        for item in _bullets(sec["Collisions:"]):
            names = [n.strip().lower() for n in item.split(",")]
            if len(names) != 2 or not all(names) or any(" " in n for n in names):
                raise _Syntax(f"a collision is two comma-separated ids, got {item!r}")
            try:
                pairs.append(CollisionPair(*names))
            except SelfCollision:
                raise _Semantic(f"self collision {item!r}") from None
    except _Syntax as exc:
        return fail(Verdict.PARSE_FAILURE, str(exc))
    except _Semantic as exc:
        return fail(Verdict.SEMANTIC_FAILURE, str(exc))

    known = set(relevant) | {GRIPPER}
    missing_args = [a for a in task.args if a not in relevant]
    if missing_args:
        return fail(Verdict.SEMANTIC_FAILURE, f"task object(s) {missing_args} not listed as relevant")
    for atom in pre + post:
        if isinstance(atom, StateAtom) and atom.gripper not in (None, GRIPPER):
            return fail(Verdict.SEMANTIC_FAILURE, f"unknown gripper in '{atom}'")
        stray = [o for o in atom.objects if o not in known]
        if stray:
            return fail(Verdict.SEMANTIC_FAILURE, f"'{atom}' uses non-relevant object(s) {stray}")
    if not post and require_post:
        return fail(Verdict.SEMANTIC_FAILURE, "no post-conditions")
    for p in pairs:
        if p.a not in known and p.b not in known:
            return fail(Verdict.SEMANTIC_FAILURE, f"collision ({p}) has no relevant object")
    relevant = tuple(dict.fromkeys(relevant))
    pairs = tuple(dict.fromkeys(pairs))
    cond = TaskCondition(str(task), relevant, tuple(pre), tuple(post), pairs) if post else None
    return GenerationOutcome(cond, text, 1, Verdict.SUCCESS, parts=(relevant, tuple(pre), tuple(post), pairs))


# ---------------------------------------------------------------------------
# prompts

PRIMING = "I wish you to be a spatial relations and collisions judgment machine."
INTRO = "You will get the name of a task for a robot arm. Its end effector is a gripper."
RELEVANT_RULE = "First, determine what are the relevant objects in this task."
PREPOST_RULE = ("Then list the conditions that hold before the task starts (pre-conditions) and the ones "
                "that hold once it is done (post-conditions). Note that before the task is processed, "
                "the task itself is not satisfied.")
VOCAB_RULE = "Spatial relations to choose from:"
STATE_RULE = "Object states to choose from (write 'X is <state>' or 'gripper grasping X'):"
COLLISION_RULE = ("Finally, list the contacts expected while the task is carried out. You must only "
                  "generate collisions that includes the relevant objects.")
EXAMPLES_RULE = "Examples:"
FORMAT_RULE = ("Answer in the layout of the examples: strictly follow the examples' format, and use "
               "only the relations and states listed above.")


@dataclass(frozen=True)
class PromptBundle:
    system_priming: str
    relation_vocabulary: tuple[str, ...]
    examples: tuple[tuple[str, str], ...]
    format_rule: str
    query: str
    states: tuple[str, ...] = STATE_VOCABULARY

    def __post_init__(self):
        if not self.query.strip():
            raise ValueError("prompt query must be nonempty")

    def sections(self) -> list[str]:
        """Prompt blocks in order: priming, relevance, pre/post, vocabulary, collisions,
        examples, format, query."""
        vocab = VOCAB_RULE + "\n" + ", ".join(self.relation_vocabulary)
        if self.states:
            vocab += "\n" + STATE_RULE + "\n" + ", ".join(self.states)
        shots = "\n\n".join(f"Q: Task name: {name}\nA:\n{text}" for name, text in self.examples)
        return [self.system_priming + "\n" + INTRO, RELEVANT_RULE, PREPOST_RULE, vocab, COLLISION_RULE,
                EXAMPLES_RULE + ("\n" + shots if shots else ""), self.format_rule,
                f"Q: Task name: {self.query}"]

    def text(self) -> str:
        return "\n".join(self.sections())

    def messages(self) -> list[tuple[str, str]]:
        secs = self.sections()
        return [("system", secs[0]), ("user", "\n".join(secs[1:]))]


def _as_condition(example) -> TaskCondition:
    return getattr(example, "condition", example)


def build_generalization_prompt(task: PrimitiveTaskName, examples: Iterable, exclude_same_verb: bool = False,
                                *, states: Sequence[str] = STATE_VOCABULARY) -> PromptBundle:
    """Few-shot prompt for ``task``; examples are DemoRecords or TaskConditions."""
    shots = []
    for ex in examples:
        cond = _as_condition(ex)
        if exclude_same_verb and cond.task.verb is task.verb:
            continue
        shots.append((cond.task_name, render_condition(cond)))
    return PromptBundle(PRIMING, PROMPT_VOCABULARY, tuple(shots), FORMAT_RULE, str(task), tuple(states))


def split_two_chat(bundle: PromptBundle) -> tuple[PromptBundle, PromptBundle]:
    """Relations-and-collisions chat plus an object-state chat."""
    def keep(text: str, want_states: bool) -> str:
        out = []
        for ln in text.splitlines():
            if ln.startswith("- ") and not ln.startswith("- none") and "," not in ln:
                is_state = " is " in ln or " grasping " in ln
                if is_state != want_states:
                    continue
            out.append(ln)
        return "\n".join(out)
    rel = PromptBundle(bundle.system_priming, bundle.relation_vocabulary,
                       tuple((n, keep(t, False)) for n, t in bundle.examples), bundle.format_rule,
                       bundle.query, states=())
    st = PromptBundle(bundle.system_priming, (), tuple((n, keep(t, True)) for n, t in bundle.examples),
                      bundle.format_rule, bundle.query, states=bundle.states)
    return rel, st


# ---------------------------------------------------------------------------
# backends


class ChatBackend(Protocol):
    def send(self, messages: Sequence[tuple[str, str]], temperature: float = TEMPERATURE) -> str: ...


_QUERY_RE = re.compile(r"^Q: Task name:\s*(.+?)\s*$", re.MULTILINE)


def query_of(messages: Sequence[tuple[str, str]]) -> str:
    for _, text in reversed(messages):
        found = _QUERY_RE.findall(text)
        if found:
            return found[-1].strip().lower()
    return ""


class MockTable:
    """Canned answers keyed by task name; unknown tasks get an empty answer."""

    def __init__(self, table: dict[str, str]):
        self.table = {k.lower(): v for k, v in table.items()}
        self.calls = 0

    @classmethod
    def default(cls) -> "MockTable":
        from .cond import data_path
        return cls(json.loads(data_path("reference_conditions.json").read_text()))

    def send(self, messages, temperature: float = TEMPERATURE) -> str:
        self.calls += 1
        return self.table.get(query_of(messages), "")


class ReplayLog:
    """Replays recorded responses in file order, ignoring the prompt."""

    def __init__(self, path):
        self.path = Path(path)
        self.entries = [json.loads(ln) for ln in self.path.read_text().splitlines() if ln.strip()]
        self.position = 0

    def send(self, messages, temperature: float = TEMPERATURE) -> str:
        if self.position >= len(self.entries):
            raise BackendUnavailable(f"replay log {self.path} exhausted after {self.position} responses")
        entry = self.entries[self.position]
        self.position += 1
        return entry["response"]


def append_transcript(path, prompt: str, response: str) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"prompt": prompt, "response": response, "timestamp": time.time()}) + "\n")


@dataclass
class RemoteEndpoint:
    """Chat-completion style HTTP endpoint.

    Request: POST ``url`` with ``{"model", "messages": [{"role","content"}], "temperature"}``
    and a bearer token; the answer is read from ``choices[0].message.content``.
    """

    url: str
    api_key: str = ""
    model_name: str = ""
    transcript: Path | None = None
    retries: int = MAX_RETRIES
    timeout: float = 60.0
    backoff: float = 1.0
    client: httpx.Client | None = field(default=None, repr=False)

    @classmethod
    def from_env(cls, transcript=None) -> "RemoteEndpoint":
        url = os.environ.get("LLM_API_URL")
        if not url:
            raise BackendUnavailable("LLM_API_URL is not set")
        return cls(url, os.environ.get("LLM_API_KEY", ""), os.environ.get("LLM_MODEL", ""),
                   Path(transcript) if transcript else None)

    def send(self, messages, temperature: float = TEMPERATURE) -> str:
        body = {"model": self.model_name, "temperature": temperature,
                "messages": [{"role": r, "content": c} for r, c in messages]}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        client = self.client or httpx.Client(timeout=self.timeout)
        last: Exception | None = None
        try:
            for attempt in range(self.retries):
                try:
                    resp = client.post(self.url, json=body, headers=headers)
                    resp.raise_for_status()
                    text = resp.json()["choices"][0]["message"]["content"]
                    break
                except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                    last = exc
                    log.warning("chat request failed (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                    if attempt + 1 < self.retries and self.backoff > 0:
                        time.sleep(self.backoff * 2 ** attempt)
            else:
                raise BackendUnavailable(f"chat endpoint failed after {self.retries} attempts: {last}")
        finally:
            if self.client is None:
                client.close()
        if self.transcript is not None:
            append_transcript(self.transcript, "\n".join(c for _, c in messages), text)
        return text


# ---------------------------------------------------------------------------
# generation


def _one_chat(backend: ChatBackend, bundle: PromptBundle, max_retries: int,
              keep=None) -> tuple[GenerationOutcome, list]:
    """Ask until the answer parses. ``keep`` filters atoms (two-chat mode), in which
    case an empty post-condition list is acceptable for this chat alone."""
    task = parse_task_name(bundle.query)
    messages = bundle.messages()
    outcome = GenerationOutcome(None, "", 0, Verdict.PARSE_FAILURE, "no attempt made")
    for attempt in range(1, max_retries + 1):
        raw = backend.send(messages, TEMPERATURE)
        parsed = parse_condition(raw, task, require_post=keep is None)
        outcome = GenerationOutcome(parsed.condition, raw, attempt, parsed.verdict, parsed.message)
        if parsed.ok:
            return outcome, list(parsed.parts)
        messages = messages + [("assistant", raw),
                               ("user", f"That answer was rejected ({parsed.verdict.value}: {parsed.message}). "
                                        f"Try again and strictly follow the examples' format.\n"
                                        f"Q: Task name: {bundle.query}")]
    return outcome, []


def generate_condition(backend: ChatBackend, bundle: PromptBundle, max_retries: int = MAX_RETRIES, *,
                       two_chat: bool = False) -> GenerationOutcome:
    if max_retries < 1:
        raise ValueError("max_retries must be at least 1")
    if not two_chat:
        return _one_chat(backend, bundle, max_retries)[0]
    rel_bundle, state_bundle = split_two_chat(bundle)
    rel, rel_parts = _one_chat(backend, rel_bundle, max_retries, keep=RelationAtom)
    st, st_parts = _one_chat(backend, state_bundle, max_retries, keep=StateAtom)
    attempts = rel.attempts + st.attempts
    raw = rel.raw_text + "\n\n" + st.raw_text
    for part in (rel, st):
        if not part.ok:
            return GenerationOutcome(None, raw, attempts, part.verdict, part.message)
    (rel_obj, rel_pre, rel_post, pairs), (st_obj, st_pre, st_post, _) = rel_parts, st_parts
    pre = [a for a in rel_pre if isinstance(a, RelationAtom)] + [a for a in st_pre if isinstance(a, StateAtom)]
    post = [a for a in rel_post if isinstance(a, RelationAtom)] + [a for a in st_post if isinstance(a, StateAtom)]
    if not post:
        return GenerationOutcome(None, raw, attempts, Verdict.SEMANTIC_FAILURE, "no post-conditions")
    relevant = tuple(dict.fromkeys(list(rel_obj) + list(st_obj)))
    cond = TaskCondition(bundle.query, relevant, tuple(pre), tuple(post), tuple(pairs))
    return GenerationOutcome(cond, raw, attempts, Verdict.SUCCESS)


def generate_many(backend: ChatBackend, bundles: Sequence[PromptBundle], max_retries: int = MAX_RETRIES,
                  workers: int = 4, **kw) -> list[GenerationOutcome]:
    """Generate for several prompts with bounded request parallelism; results keep input order."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda b: generate_condition(backend, b, max_retries, **kw), bundles))
