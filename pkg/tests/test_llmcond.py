import json
from pathlib import Path

import httpx
import pytest
from hypothesis import given, settings, strategies as st

from taskcond.core import (CollisionPair, RelationAtom, SpatialRelation, StateAtom, StateKind, TaskCondition,
                           Verb, parse_task_name)
from taskcond.errors import BackendUnavailable
from taskcond.llmcond import (FORMAT_RULE, PRIMING, MockTable, PromptBundle, RemoteEndpoint, ReplayLog,
                              Verdict, build_generalization_prompt, generate_condition, generate_many,
                              parse_condition, render_condition, split_two_chat)

FIXTURE = Path(__file__).parent / "fixtures" / "replay_malformed_then_valid.jsonl"
GRASP = parse_task_name("grasp bottle")
GOOD = """Relevant objects: bottle, gripper
Pre-conditions:
- none
Post-conditions:
- gripper grasping bottle
Collisions:
- bottle, gripper"""

# ---------------------------------------------------------------------------
# random valid conditions

NAMES = ["bottle", "mug", "microwave", "towel", "cup", "box", "table"]


@st.composite
def conditions(draw):
    verb = draw(st.sampled_from(list(Verb)))
    pool = draw(st.permutations(NAMES))
    args = pool[: verb.arity]
    extra = pool[verb.arity: verb.arity + draw(st.integers(0, 2))]
    relevant = list(args) + list(extra) + (["gripper"] if draw(st.booleans()) else [])
    usable = list(dict.fromkeys(relevant + ["gripper"]))
    objs = [o for o in usable if o != "gripper"]

    def atom():
        neg = draw(st.booleans())
        if len(objs) >= 2 and draw(st.booleans()):
            a, b = draw(st.permutations(objs))[:2]
            at = RelationAtom(a, draw(st.sampled_from(list(SpatialRelation))), b)
        else:
            kind = draw(st.sampled_from(list(StateKind)))
            at = StateAtom(kind, draw(st.sampled_from(objs)), "gripper" if kind is StateKind.GRASPING else None)
        return ~at if neg else at

    pre = draw(st.lists(st.builds(lambda _: atom(), st.none()), max_size=3))
    post = draw(st.lists(st.builds(lambda _: atom(), st.none()), min_size=1, max_size=3))
    pairs = set()
    for _ in range(draw(st.integers(0, 3))):
        a = draw(st.sampled_from(usable))
        b = draw(st.sampled_from([n for n in NAMES + ["gripper"] if n != a]))
        pairs.add(CollisionPair(*sorted((a, b))))
    task = " ".join([verb.value, *args])
    return TaskCondition(task, tuple(relevant), tuple(pre), tuple(post), tuple(sorted(pairs)))


@settings(max_examples=100, deadline=None)
@given(conditions())
def test_render_parse_roundtrip(cond):
    out = parse_condition(render_condition(cond), cond.task)
    assert out.verdict is Verdict.SUCCESS, out.message
    assert out.condition == cond


# ---------------------------------------------------------------------------
# parsing


def test_parse_success():
    out = parse_condition(GOOD, GRASP)
    assert out.ok and out.condition.post_conditions[0] == StateAtom(StateKind.GRASPING, "bottle", "gripper")


def test_parse_tolerates_answer_prefix_and_bullet_relevant():
    text = "A:\nRelevant objects:\n- bottle\n- gripper\n" + GOOD.split("\n", 1)[1]
    assert parse_condition(text, GRASP).ok


@pytest.mark.parametrize("text,verdict", [
    ("", Verdict.PARSE_FAILURE),
    ("   ", Verdict.PARSE_FAILURE),
    ("the gripper grabs it", Verdict.PARSE_FAILURE),
    (GOOD.replace("Collisions:\n- bottle, gripper", ""), Verdict.PARSE_FAILURE),
    (GOOD.replace("gripper grasping bottle", "bottle behind gripper"), Verdict.SEMANTIC_FAILURE),
    (GOOD.replace("gripper grasping bottle", "bottle is shiny"), Verdict.SEMANTIC_FAILURE),
    (GOOD.replace("gripper grasping bottle", "gripper grasping mug"), Verdict.SEMANTIC_FAILURE),
    (GOOD.replace("- gripper grasping bottle", "- none"), Verdict.SEMANTIC_FAILURE),
    (GOOD.replace("Relevant objects: bottle, gripper", "Relevant objects: gripper"), Verdict.SEMANTIC_FAILURE),
    (GOOD.replace("- bottle, gripper", "- table, shelf"), Verdict.SEMANTIC_FAILURE),
    (GOOD.replace("- bottle, gripper", "- bottle, bottle"), Verdict.SEMANTIC_FAILURE),
    (GOOD.replace("- bottle, gripper", "- bottle gripper"), Verdict.PARSE_FAILURE),
])
def test_parse_failures(text, verdict):
    out = parse_condition(text, GRASP)
    assert out.verdict is verdict and out.condition is None


# ---------------------------------------------------------------------------
# prompts


def test_prompt_contains_sections_in_order(library):
    bundle = build_generalization_prompt(parse_task_name("grasp mug"), library.records.values())
    text = bundle.text()
    keys = [PRIMING, "determine what are the relevant objects",
            "before the task is processed, the task itself is not satisfied",
            "above, below, inside, in front of",
            "only generate collisions that includes the relevant objects",
            "Q: Task name: grasp bottle", "strictly follow the examples' format", "Q: Task name: grasp mug"]
    positions = [text.index(k) for k in keys[:-1]] + [text.rindex(keys[-1])]
    assert positions == sorted(positions)
    assert text.rstrip().endswith("Q: Task name: grasp mug")


def test_exclude_same_verb(library):
    task = parse_task_name("grasp mug")
    keep = build_generalization_prompt(task, library.records.values())
    drop = build_generalization_prompt(task, library.records.values(), exclude_same_verb=True)
    assert "grasp bottle" in [n for n, _ in keep.examples]
    assert not any(n.startswith("grasp ") for n, _ in drop.examples)
    assert len(drop.examples) == len(keep.examples) - sum(n.startswith("grasp ") for n, _ in keep.examples)
    empty = build_generalization_prompt(task, [])
    assert empty.examples == () and "Q: Task name: grasp mug" in empty.text()
    with pytest.raises(ValueError):
        PromptBundle(PRIMING, (), (), FORMAT_RULE, " ")


def test_two_chat_split(library):
    bundle = build_generalization_prompt(parse_task_name("grasp mug"), library.records.values())
    rel, sta = split_two_chat(bundle)
    assert " is " not in "".join(t for _, t in rel.examples).replace("Relevant", "")
    assert all(" inside " not in t for _, t in sta.examples)
    out = generate_condition(MockTable.default(), bundle, two_chat=True)
    single = generate_condition(MockTable.default(), bundle)
    assert out.ok and out.attempts == 2
    assert set(out.condition.post_conditions) == set(single.condition.post_conditions)


# ---------------------------------------------------------------------------
# generation


def test_mock_generation_deterministic(library):
    bundle = build_generalization_prompt(parse_task_name("open microwave"), library.records.values())
    a = generate_condition(MockTable.default(), bundle)
    b = generate_condition(MockTable.default(), bundle)
    assert a == b and a.raw_text == b.raw_text and a.attempts == 1


def test_unknown_task_exhausts_retries():
    backend = MockTable({})
    bundle = build_generalization_prompt(GRASP, [])
    out = generate_condition(backend, bundle, max_retries=3)
    assert out.verdict is Verdict.PARSE_FAILURE and out.attempts == 3 and backend.calls == 3
    with pytest.raises(ValueError):
        generate_condition(backend, bundle, max_retries=0)


def test_retry_message_carries_failure():
    seen = []

    class Spy:
        def send(self, messages, temperature=0.0):
            seen.append(messages)
            return "garbage" if len(seen) == 1 else GOOD

    out = generate_condition(Spy(), build_generalization_prompt(GRASP, []))
    assert out.ok and out.attempts == 2
    assert "rejected" in seen[1][-1][1] and seen[1][-2] == ("assistant", "garbage")


def test_replay_log(tmp_path):
    out = generate_condition(ReplayLog(FIXTURE), build_generalization_prompt(GRASP, []))
    assert out.ok and out.attempts == 2
    log = ReplayLog(FIXTURE)
    log.send([]), log.send([])
    with pytest.raises(BackendUnavailable):
        log.send([])


def test_generate_many_keeps_order(library):
    tasks = ["grasp mug", "open microwave", "fold towel", "tilt cup"]
    bundles = [build_generalization_prompt(parse_task_name(t), library.records.values()) for t in tasks]
    outs = generate_many(MockTable.default(), bundles, workers=4)
    assert [o.condition.task_name for o in outs] == tasks


# ---------------------------------------------------------------------------
# remote endpoint


def _endpoint(handler, tmp_path=None, retries=3):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return RemoteEndpoint("http://llm.test/v1/chat/completions", "k3y", "some-model",
                          transcript=(tmp_path / "t.jsonl") if tmp_path else None,
                          retries=retries, backoff=0.0, client=client)


def test_remote_request_shape_and_transcript(tmp_path):
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers["authorization"]
        return httpx.Response(200, json={"choices": [{"message": {"content": GOOD}}]})

    ep = _endpoint(handler, tmp_path)
    out = generate_condition(ep, build_generalization_prompt(GRASP, []))
    assert out.ok
    assert seen["auth"] == "Bearer k3y"
    assert seen["body"]["model"] == "some-model" and seen["body"]["temperature"] == 0.0
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
    rows = [json.loads(ln) for ln in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert rows[0]["response"] == GOOD and set(rows[0]) == {"prompt", "response", "timestamp"}
    assert ReplayLog(tmp_path / "t.jsonl").send([]) == GOOD


def test_remote_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"choices": [{"message": {"content": GOOD}}]})

    assert _endpoint(handler).send([("user", "hi")]) == GOOD and len(calls) == 3


def test_remote_unavailable_after_retries():
    def handler(request):
        raise httpx.ConnectError("down", request=request)

    with pytest.raises(BackendUnavailable):
        generate_condition(_endpoint(handler), build_generalization_prompt(GRASP, []))


def test_remote_from_env(monkeypatch):
    monkeypatch.delenv("LLM_API_URL", raising=False)
    with pytest.raises(BackendUnavailable):
        RemoteEndpoint.from_env()
    monkeypatch.setenv("LLM_API_URL", "http://x")
    monkeypatch.setenv("LLM_MODEL", "m")
    monkeypatch.setenv("LLM_API_KEY", "k")
    ep = RemoteEndpoint.from_env()
    assert (ep.url, ep.model_name, ep.api_key) == ("http://x", "m", "k")
