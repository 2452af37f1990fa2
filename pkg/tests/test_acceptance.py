"""Acceptance suite: one test per acceptance criterion, each printing a
PASS line when it holds (failures surface as normal test failures).

Counts and tolerances are pinned here and are not calibration knobs:
round-trip >=200 cases, decision truth table on 1000 pairs, prune oracle on
1000 sequences, >=50 mutants per fault class, similarity 0.727 +/- 0.001,
sword integration recall exactly 1/3, plumbing < 50 ms, budget abort at
7000 +/- 200 ms.
"""

import copy
import dataclasses
import random
import time

import pytest

from npctalk.backends import ExpertId
from npctalk.dataset import make_splits, restructure
from npctalk.evaluation import (
    integration_recall,
    run_eval,
    score_decision,
    similarity_f1,
)
from npctalk.model import (
    AssistantText,
    AssistantToolCalls,
    ToolCall,
    ToolResponse,
    ToolResult,
    UserText,
    parse_assistant_output,
    render_assistant_output,
)
from npctalk.router import (
    DECISION_PREFILL,
    DialogueEngine,
    RouteDecision,
    Session,
    prune_history,
)
from npctalk.service import NpcService
from npctalk.tools import ToolSet
from npctalk.validation import (
    check_flow_correspondence,
    validate_conversation,
    validate_schema,
    validate_semantics,
    validate_structure,
)

from support import (
    FIXED_CONFIG,
    SIMPLE_SCHEMAS,
    RecordingGateway,
    decision_output_for,
    gateway_from_rules,
    gold_echo_engine,
    gold_echo_rules,
    make_context,
    mutate_bad_json_body,
    mutate_consecutive_speaker,
    mutate_unclosed_tag,
    mutate_undeclared_call,
    mutate_unicode_remnant,
    mutate_wrong_type_argument,
    oracle_prune,
    random_clean_conversation,
    random_message_sequence,
    random_parsed_output,
    _ensure_tool_block,
)

REPLY_OUTPUT = 'reply"}\n</tool_call>'


def _pass(line: str) -> None:
    print(f"ACCEPTANCE PASS: {line}")


# ----------------------------------------------------------------------
# 1. round-trip parsing
# ----------------------------------------------------------------------

def test_round_trip_parsing(records, manifest):
    rng = random.Random(20250808)
    for _ in range(250):
        expected = random_parsed_output(rng)
        assert parse_assistant_output(render_assistant_output(expected)) == expected

    # every tool_call opening is either parsed or reported malformed
    for _ in range(250):
        rendered = render_assistant_output(random_parsed_output(rng))
        roll = rng.random()
        if roll < 0.3:
            rendered = rendered.replace('{"name":', "{broken", 1)
        elif roll < 0.5:
            rendered = rendered.replace("\n</tool_call>", "", 1)
        out = parse_assistant_output(rendered)
        assert rendered.count("<tool_call>") == len(out.tool_calls) + len(out.malformed)

    # and on every raw block text in the converted fixture corpus
    for record in records:
        conversation, _ = restructure(record, manifest)
        for message in conversation:
            raw = getattr(message, "raw_text", None)
            if raw is None:
                continue
            out = parse_assistant_output(raw)
            assert raw.count("<tool_call>") == len(out.tool_calls) + len(out.malformed)
    _pass("round-trip parsing: 250 generated outputs round-trip; "
          "extraction exhaustive on 250 corrupted variants and all fixture blocks")


# ----------------------------------------------------------------------
# 2. pipeline routing fidelity (30-turn scripted fixture)
# ----------------------------------------------------------------------

def test_pipeline_routing_fidelity():
    turns = []
    rules = []
    for i in range(30):
        text = f"fixture turn {i:02d}: tell me about item {i}."
        wants_tools = i % 2 == 0
        if wants_tools:
            decision = decision_output_for(
                [ToolCall("check_price", {"item_name": f"Item {i}"})]
            )
        else:
            decision = REPLY_OUTPUT
        turns.append((text, wants_tools))
        rules.append({"match": {"expert": "tool", "prompt_substring": text},
                      "output": decision})
        rules.append({"match": {"expert": "direct", "prompt_substring": text},
                      "output": f"Direct answer {i}."})
        rules.append({"match": {"expert": "persona", "prompt_substring": text},
                      "output": f"Persona answer {i}."})
    rules.reverse()  # later turns first, so growing history cannot shadow them

    executed: list[dict] = []
    toolset = ToolSet(
        schemas=tuple(SIMPLE_SCHEMAS),
        handlers={"check_price": lambda args, ctx: executed.append(args) or [{"price": "1 Gold"}]},
    )
    gateway = RecordingGateway(gateway_from_rules(rules))
    engine = DialogueEngine(gateway)
    session = Session("fidelity", make_context(), toolset, config=FIXED_CONFIG)

    for i, (text, wants_tools) in enumerate(turns):
        executed_before = len(executed)
        reply, trace = engine.run_turn(session, text)
        if wants_tools:
            assert len(executed) == executed_before + 1, f"turn {i}: executor not invoked"
            assert trace.expert_used == ExpertId.PERSONA
            assert reply == f"Persona answer {i}."
        else:
            assert len(executed) == executed_before, f"turn {i}: executor invoked on sentinel"
            assert trace.expert_used == ExpertId.DIRECT
            assert reply == f"Direct answer {i}."

    decision_requests = [r for e, r in gateway.requests if e == ExpertId.TOOL]
    assert len(decision_requests) == 30
    assert all(r.prefill == '<tool_call>\n{"name": "' for r in decision_requests)
    assert all(r.prefill == DECISION_PREFILL for r in decision_requests)
    _pass("pipeline routing fidelity: 30/30 turns routed correctly, "
          "decision prefill byte-equal in every request")


# ----------------------------------------------------------------------
# 3. spurious-argument tolerance
# ----------------------------------------------------------------------

def test_spurious_argument_tolerance():
    config = dataclasses.replace(FIXED_CONFIG, early_stop=False)
    hits = 0
    for i in range(20):
        rules = [{
            "match": {"expert": "tool"},
            "output": f'reply", "arguments": {{"text": "Injected reply {i}."}}}}\n</tool_call>',
        }]
        engine = DialogueEngine(gateway_from_rules(rules))
        session = Session(f"spurious{i}", make_context(),
                          ToolSet(schemas=tuple(SIMPLE_SCHEMAS)), config=config)
        outcome = engine.decide(session, f"hello {i}")
        assert outcome.decision == RouteDecision()
        assert any("spurious arguments" in w for w in outcome.warnings)
        hits += 1
    assert hits == 20
    _pass("spurious-argument tolerance: 20/20 injected reply-with-arguments "
          "decisions routed to Reply with a warning")


# ----------------------------------------------------------------------
# 4. pruning law
# ----------------------------------------------------------------------

def test_pruning_law(records, manifest):
    engine, _ = gold_echo_engine(records)
    for record in records:
        session = Session(
            record.data_id, record.context,
            _gold_session_toolset(record, manifest), config=FIXED_CONFIG,
        )
        for turn in record.turns:
            user_text = "\n".join(l.text for l in turn.dialogue if l.speaker == "player")
            engine.run_turn(session, user_text)
            blocks = [i for i, m in enumerate(session.history)
                      if isinstance(m, AssistantToolCalls)]
            assert len(blocks) <= 1
            if blocks:
                i = blocks[0]
                assert isinstance(session.history[i + 1], ToolResponse)
                assert not any(isinstance(m, AssistantText) for m in session.history[i + 2:])

    rng = random.Random(424242)
    for _ in range(1000):
        messages = random_message_sequence(rng)
        assert prune_history(messages) == oracle_prune(messages)
    _pass("pruning law: stored history holds <=1 trailing tool block after "
          "every fixture turn; oracle agrees on 1000 random sequences")


def _gold_session_toolset(record, manifest):
    from npctalk.service import Scenario
    return Scenario(record, list(manifest[record.function_list_id])).build_toolset()


# ----------------------------------------------------------------------
# 5. validator fault injection
# ----------------------------------------------------------------------

def _mutant_duplicate(rng):
    conversation = random_clean_conversation(rng)
    seen: set[str] = set()
    validate_structure(conversation, seen_hashes=seen)
    return validate_structure(copy.deepcopy(conversation), seen_hashes=seen)


def _mutant_missing_schema_field(rng):
    conversation = random_clean_conversation(rng)
    missing = rng.choice(["name", "description", "parameters"])
    tool = {"name": "check_price", "description": "x",
            "parameters": {"type": "object", "properties": {}}}
    del tool[missing]
    return validate_schema(conversation, [tool])


FAULT_CLASSES = {
    "consecutive-speaker": (
        lambda rng: validate_structure(mutate_consecutive_speaker(rng, random_clean_conversation(rng))),
        "structural",
    ),
    "unclosed-tag": (
        lambda rng: validate_structure(mutate_unclosed_tag(rng, _ensure_tool_block(rng))),
        "structural",
    ),
    "duplicate": (_mutant_duplicate, "structural"),
    "unicode-remnant": (
        lambda rng: validate_structure(mutate_unicode_remnant(rng, random_clean_conversation(rng))),
        "structural",
    ),
    "missing-schema-field": (_mutant_missing_schema_field, "schema"),
    "bad-json-body": (
        lambda rng: validate_schema(mutate_bad_json_body(rng, _ensure_tool_block(rng)), SIMPLE_SCHEMAS),
        "schema",
    ),
    "undeclared-call": (
        lambda rng: validate_schema(mutate_undeclared_call(rng, _ensure_tool_block(rng)), SIMPLE_SCHEMAS),
        "schema",
    ),
    "wrong-type-argument": (
        lambda rng: validate_semantics(mutate_wrong_type_argument(rng, _ensure_tool_block(rng)), SIMPLE_SCHEMAS),
        "semantic",
    ),
}


def test_validator_fault_injection(records, manifest):
    per_class = 50
    for name, (run_mutant, category) in FAULT_CLASSES.items():
        rng = random.Random(hash(name) & 0xFFFF)
        detected = 0
        for _ in range(per_class):
            issues = run_mutant(rng)
            if any(i.category == category and i.severity == "error" for i in issues):
                detected += 1
        assert detected == per_class, f"{name}: {detected}/{per_class} detected"

    # clean converted datasets produce zero errors
    seen: set[str] = set()
    for record in records:
        conversation, tools = restructure(record, manifest)
        issues = validate_conversation(conversation, tools, record.data_id, seen)
        assert [i for i in issues if i.severity == "error"] == []
    rng = random.Random(7)
    for _ in range(50):
        conversation = random_clean_conversation(rng)
        assert validate_conversation(conversation, SIMPLE_SCHEMAS) == []
    _pass("validator fault injection: 8 classes x 50 mutants all detected "
          "with the matching category; clean data yields 0 errors")


# ----------------------------------------------------------------------
# 6. flow correspondence
# ----------------------------------------------------------------------

def test_flow_correspondence(records, manifest):
    for record in records:
        conversation, _ = restructure(record, manifest)
        assert check_flow_correspondence(conversation, conversation) == []
    rng = random.Random(31337)
    for _ in range(50):
        conversation = random_clean_conversation(rng)
        assert check_flow_correspondence(conversation, conversation) == []

    position_detected = 0
    length_detected = 0
    for _ in range(50):
        original = _ensure_tool_block(rng)
        # drop a tool block but keep length: replace the block with filler turns
        no_block = []
        for m in original:
            if isinstance(m, AssistantToolCalls):
                no_block.append(AssistantText("filler reply"))
            elif isinstance(m, ToolResponse):
                no_block.append(UserText("filler question"))
            else:
                no_block.append(m)
        if any(i.severity == "error" for i in check_flow_correspondence(original, no_block)):
            position_detected += 1

        longer = original + [UserText("tacked-on question")]
        issues = check_flow_correspondence(original, longer)
        if any("message count differs" in i.message for i in issues):
            length_detected += 1
    assert position_detected == 50
    assert length_detected == 50
    _pass("flow correspondence: reflexive on all fixtures; 50/50 position "
          "faults and 50/50 length faults detected")


# ----------------------------------------------------------------------
# 7. metric oracles
# ----------------------------------------------------------------------

def test_metric_oracles():
    rng = random.Random(1000003)
    truth_table = {(True, True): "TP", (True, False): "FP",
                   (False, False): "TN", (False, True): "FN"}
    for _ in range(1000):
        predicted = (RouteDecision((ToolCall("check_price", {"item_name": "x"}),))
                     if rng.random() < 0.5 else RouteDecision())
        gold = [{"name": "check_price"}] * rng.randint(0, 2)
        assert score_decision(predicted, gold) == truth_table[(predicted.uses_tools, bool(gold))]

    for _ in range(300):
        a = " ".join(rng.choice(["sword", "gold", "price", "night", ""]) for _ in range(rng.randint(0, 8)))
        b = " ".join(rng.choice(["sword", "gold", "shield", "dawn", ""]) for _ in range(rng.randint(0, 8)))
        assert similarity_f1(a, b) == similarity_f1(b, a)

    worked = similarity_f1("the sword costs 300 gold", "this sword costs 300 gold coins")
    assert abs(worked - 0.727) <= 0.001

    sword_results = [ToolResult(
        "check_price", {"item_name": "sword"},
        [{"price": "300 Gold", "attack": "15 Attack", "feature": "good for night battles"}],
    )]
    assert integration_recall("It has an attack of 15.", sword_results) == 1 / 3
    _pass("metric oracles: decision quadrants match the truth table on 1000 "
          "pairs; similarity symmetric and 0.727 +/- 0.001 on the worked "
          "example; sword integration recall is exactly 1/3")


# ----------------------------------------------------------------------
# 8. converter fixture
# ----------------------------------------------------------------------

def test_converter_fixture(records, manifest):
    record = next(r for r in records if r.data_id == "task1_train_0001")
    conversation, tools = restructure(record, manifest)

    turn0 = conversation[:4]
    assert isinstance(turn0[0], UserText)
    assert turn0[0].text.startswith("Good evening. I hope I'm not")
    assert isinstance(turn0[1], AssistantToolCalls)
    assert turn0[1].calls[0].name == "search_item"
    assert isinstance(turn0[2], ToolResponse)
    assert turn0[2].results[0].return_value == [{"information": "many"}]
    assert isinstance(turn0[3], AssistantText)
    assert turn0[3].text.startswith("Not at all.")

    examples = make_splits(turn0, tools, record.context)
    assert len(examples) == 2
    targets = sorted(e.expert_target.value for e in examples)
    assert targets == ["persona", "tool"]
    _pass("converter fixture: documented sample yields the 4-message turn_0 "
          "sequence and exactly 2 training examples for that turn")


# ----------------------------------------------------------------------
# 9. plumbing latency and budget enforcement
# ----------------------------------------------------------------------

def test_plumbing_latency_and_budget(records, manifest):
    rules = gold_echo_rules(records)
    service = NpcService(records, manifest, DialogueEngine(gateway_from_rules(rules)),
                         config=FIXED_CONFIG)
    session_id = service.create_session("task1_train_0001")
    started = time.monotonic()
    response = service.post_message(session_id, "How much is for the Double-Handed sword?")
    elapsed_ms = (time.monotonic() - started) * 1000
    assert elapsed_ms < 50, f"scripted turn took {elapsed_ms:.1f} ms"
    assert "300 Gold" in response.reply

    slow_rules = [
        {"match": {"expert": "tool", "prompt_substring": "stall"},
         "output": REPLY_OUTPUT, "delay_ms": 8000},
        {"match": {"expert": "direct", "prompt_substring": "stall"},
         "output": "too late"},
    ] + rules
    slow_service = NpcService(records, manifest,
                              DialogueEngine(gateway_from_rules(slow_rules)),
                              config=FIXED_CONFIG, budget_ms=7000)
    slow_session = slow_service.create_session("task1_train_0001")
    started = time.monotonic()
    from npctalk.router import BudgetExceeded
    with pytest.raises(BudgetExceeded):
        slow_service.post_message(slow_session, "stall for a while")
    abort_ms = (time.monotonic() - started) * 1000
    assert 6800 <= abort_ms <= 7200, f"aborted at {abort_ms:.0f} ms"
    assert slow_service.history(slow_session) == []
    _pass(f"plumbing latency: scripted turn {elapsed_ms:.1f} ms < 50 ms; "
          f"slow backend aborted at {abort_ms:.0f} ms (7000 +/- 200)")


# ----------------------------------------------------------------------
# 10. oracle end-to-end eval
# ----------------------------------------------------------------------

def test_oracle_end_to_end_eval(records, manifest):
    engine, _ = gold_echo_engine(records)
    report = run_eval(records, manifest, engine, FIXED_CONFIG)
    assert report.skipped == 0
    assert report.accuracy == 1.0
    assert report.call_exact_match_rate == 1.0
    assert report.mean_similarity == 1.0
    _pass("oracle end-to-end eval: gold-echo pipeline scores accuracy 1.0, "
          "exact-match 1.0, similarity 1.0")
