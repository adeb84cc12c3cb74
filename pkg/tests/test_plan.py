import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rit.backends import Ports, SimConfig, SimWorld
from rit.errors import PlanApplicationError, PlanParseError, ProtocolError
from rit.plan import (
    Plan,
    apply_step,
    canonicalize,
    generate_plan,
    initial_slots,
    loads_plan,
    parse_plan,
    render_conversation,
    to_text,
    validate_plan,
)


def test_moon_plan_structure(moon_plan):
    assert moon_plan.K == 2
    assert [s.v for s in moon_plan.slots] == ["s1", "s2", "s3"]
    assert moon_plan.steps[0].from_entities == ("grassland",)
    assert moon_plan.steps[1].to_entities == ("cat astronaut",)
    assert moon_plan.target_entities == ("cat astronaut", "horse", "moon")
    assert validate_plan(moon_plan) == []


def test_derived_questions(moon_plan):
    first = [q.text for q in moon_plan.steps[0].question_set]
    assert first == [
        "Are there exactly 3 distinct entities in the image?",
        "Is there a man in the image?",
        "Is there a horse in the image?",
        "Is there a moon in the image?",
    ]
    second = [q.subject for q in moon_plan.steps[1].question_set]
    assert second == [3, "cat astronaut", "horse", "moon"]


def test_apply_updates_slots(moon_plan):
    base, slots = moon_plan.base_0, initial_slots(moon_plan)
    for step in moon_plan.steps:
        base, slots = apply_step(base, step, slots)
    assert base == "a cat astronaut riding a horse on the moon"
    assert slots["s1"].current_entity == "cat astronaut" and slots["s1"].n == 1
    assert slots["s2"].n == 0


def test_round_trip_text_and_json(moon_plan, moon_text):
    assert to_text(moon_plan) == moon_text
    assert parse_plan(to_text(moon_plan)) == moon_plan
    again = loads_plan(json.dumps(moon_plan.to_json()))
    assert again == moon_plan
    assert again.digest() == moon_plan.digest()


def test_canonicalize_is_what_to_text_emits(moon_text):
    messy = moon_text.replace("STEP 1:", "STEP   1 :").replace("@ s3", "@s3").replace("BASE:", "BASE:   ")
    messy = "# a comment\n\n" + messy
    assert canonicalize(messy) == moon_text
    assert to_text(parse_plan(messy)) == moon_text


entity = st.text(alphabet="abcdefghijklmnop", min_size=2, max_size=7)


@settings(max_examples=60)
@given(st.lists(entity, min_size=2, max_size=5, unique=True), st.data())
def test_generated_plans_round_trip(words, data):
    base = " and ".join(words)
    lines = [f"BASE: {base}"] + [f"SLOT s{i}: {w}" for i, w in enumerate(words)]
    current = list(words)
    k = data.draw(st.integers(1, len(words)))
    for step in range(1, k + 1):
        i = step - 1
        new = current[i] + "x" + str(step)
        lines.append(f"STEP {step}: REPLACE {current[i]} -> {new} @ s{i}")
        current[i] = new
        lines.append(f"RESULT: {' and '.join(current)}")
    plan = parse_plan("\n".join(lines))
    assert validate_plan(plan, current[:k]) == []
    assert parse_plan(to_text(plan)) == plan
    assert loads_plan(json.dumps(plan.to_json())) == plan


@pytest.mark.parametrize("text,line,needle", [
    ("", 1, "empty"),
    ("SLOT s1: man\n", 1, "BASE"),
    ("BASE: a man\nSLOT s1: man\nSTEP 2: REPLACE man -> cat @ s1\nRESULT: a cat\n", 3, "contiguity"),
    ("BASE: a man\nSLOT s1: man\nSTEP 1: REPLACE man -> cat @ s9\nRESULT: a cat\n", 3, "undeclared slot"),
    ("BASE: a man\nSLOT s1: man\nSTEP 1: REPLACE man -> cat @ s1\n", 3, "no RESULT"),
    ("BASE: a man\nSLOT s1: man\nSTEP 1: REPLACE man, dog -> cat @ s1\nRESULT: a cat\n", 3, "sources"),
    ("BASE: a man\nSLOT s1: man\nSLOT s1: dog\n", 3, "twice"),
    ("BASE: a man\nSLOT s1: man\nFROBNICATE\n", 3, "unexpected"),
    ("BASE: a man\nSLOT s1: man\nSTEP 1: REPLACE man -> cat @ s1\nRESULT: a cat\nTARGETS: cat\nRESULT: x\n",
     6, "TARGETS"),
])
def test_parse_errors_carry_position(text, line, needle):
    with pytest.raises(PlanParseError, match=needle) as err:
        parse_plan(text)
    assert err.value.line == line
    assert err.value.column >= 1


def test_cycle_and_unreached_target():
    text = """\
BASE: a man on grass
SLOT a: man < b
SLOT b: grass < a
STEP 1: REPLACE grass -> sand @ b
RESULT: a man on sand
"""
    problems = validate_plan(parse_plan(text), ["moon"])
    assert "unreached target: moon" in problems
    assert any(p.startswith("slot cycle: a -> b -> a") for p in problems)


def test_result_mismatch_reported():
    text = "BASE: a man on grass\nSLOT s: grass\nSTEP 1: REPLACE grass -> sand @ s\nRESULT: a man on the sea\n"
    problems = validate_plan(parse_plan(text))
    assert any("substitution gives" in p for p in problems)
    with pytest.raises(PlanApplicationError):
        plan = parse_plan(text)
        apply_step(plan.base_0, plan.steps[0])


def test_slot_holding_wrong_entity():
    text = "BASE: a man on grass\nSLOT s: man\nSTEP 1: REPLACE grass -> sand @ s\nRESULT: a man on sand\n"
    assert any("holds 'man'" in p for p in validate_plan(parse_plan(text)))


def test_spawned_slot_rules():
    good = """\
BASE: a man on grass
SLOT s1: man
SLOT s2: grass
STEP 1: REPLACE man -> cat astronaut @ s1
SLOT s1a: cat < s1
SLOT s1b: astronaut < s1
RESULT: a cat astronaut on grass
"""
    plan = parse_plan(good)
    assert validate_plan(plan) == []
    _, slots = apply_step(plan.base_0, plan.steps[0], initial_slots(plan))
    assert slots["s1a"].n == 0 and slots["s1a"].parent == "s1"
    bad = good.replace("SLOT s1b: astronaut < s1", "SLOT s1b: astronaut < s2")
    assert any("must hang under" in p for p in validate_plan(parse_plan(bad)))


def test_hand_edited_question_set_detected(moon_plan):
    data = moon_plan.to_json()
    data["steps"][0]["questions"] = data["steps"][0]["questions"][:2]
    problems = validate_plan(Plan.from_json(data))
    assert "step 1: no presence question for horse" in problems


def test_conversation_stages_need_history():
    with pytest.raises(ProtocolError):
        render_conversation("p", 2)
    with pytest.raises(ProtocolError):
        render_conversation("p", 3, [("a", "ENTITIES: x")])


def test_generate_plan_with_sim_lm():
    ports = Ports(SimWorld(SimConfig()))
    prompt = "a teapot orbiting a glacier"
    gen = generate_plan(prompt, ports, ["teapot", "glacier"])
    assert gen.plan.bases()[-1] == prompt
    assert validate_plan(gen.plan) == []
    assert len(gen.exchanges) == 3
    assert "ENTITIES: teapot, glacier" in gen.exchanges[1][0]


def test_generate_plan_retries_once_then_raises():
    class Broken:
        def __init__(self):
            self.calls = 0

        def complete(self, text):
            self.calls += 1
            if text.startswith("[ELNP stage 1"):
                return "ENTITIES: owl"
            return "no plan here"

    lm = Broken()
    with pytest.raises(PlanParseError):
        generate_plan("an owl", lm, ["owl"])
    assert lm.calls == 4  # two stages, one answer, one retry
