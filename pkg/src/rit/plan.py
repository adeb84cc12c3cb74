"""Replacement plans: grammar, validation, step application and question blocks.

Plan text grammar, one statement per line (blank lines and ``#`` comments
are ignored)::

    BASE: <sentence>
    SLOT <id>: <entity> [< <parent id>]
    STEP <k>: REPLACE <from>[, <from>...] -> <to>[, <to>...] @ <slot>[,<slot>...]
    SLOT <id>: <entity> < <parent id>        # slots spawned by step k
    RESULT: <sentence>
    TARGETS: <entity>, <entity>, ...          # optional, last line

Slots listed before the first step belong to the base sentence.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from rit.errors import PlanApplicationError, PlanParseError, ProtocolError
from rit.metrics import presence_question
from rit.templates import render
from rit.text import contains_word, entities_in, entity_key, normalize_space, replace_first_word

_ID = r"[A-Za-z0-9_.\-]+"
_BASE = re.compile(r"^BASE\s*:\s*(?P<text>\S.*)$")
_SLOT = re.compile(rf"^SLOT\s+(?P<id>{_ID})\s*:\s*(?P<entity>[^<]*?\S)\s*(?:<\s*(?P<parent>\S+))?$")
_STEP = re.compile(
    r"^STEP\s+(?P<k>\d+)\s*:\s*REPLACE\s+(?P<from>[^@]*?)\s*->\s*(?P<to>[^@]*?)\s*@\s*(?P<slots>\S.*)$"
)
_RESULT = re.compile(r"^RESULT\s*:\s*(?P<text>\S.*)$")
_TARGETS = re.compile(r"^TARGETS\s*:\s*(?P<text>\S.*)$")
_KEYWORD = re.compile(r"^([A-Z]+)")


@dataclass(frozen=True)
class Slot:
    v: str
    current_entity: str
    n: int = 0
    parent: str | None = None
    origin: int = 0  # step that declared the slot; 0 for the base sentence


@dataclass(frozen=True)
class Question:
    text: str
    kind: str  # "count" or "presence"
    subject: str | int

    def to_json(self) -> dict:
        return {"text": self.text, "kind": self.kind, "subject": self.subject}


def count_question(n: int) -> Question:
    noun = "entity" if n == 1 else "distinct entities"
    verb = "Is there exactly" if n == 1 else "Are there exactly"
    return Question(f"{verb} {n} {noun} in the image?", "count", n)


def presence(label: str) -> Question:
    return Question(presence_question(label), "presence", label)


@dataclass(frozen=True)
class ReplacementStep:
    index: int
    from_entities: tuple[str, ...]
    to_entities: tuple[str, ...]
    slot_refs: tuple[str, ...]
    resulting_base: str
    spawned: tuple[Slot, ...] = ()
    question_set: tuple[Question, ...] = ()


@dataclass(frozen=True)
class Plan:
    base_0: str
    steps: tuple[ReplacementStep, ...]
    slots: tuple[Slot, ...] = ()
    target_entities: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return len(self.steps)

    def all_slots(self) -> list[Slot]:
        return [*self.slots, *(s for step in self.steps for s in step.spawned)]

    def vocabulary(self) -> list[str]:
        """Every entity label the plan mentions, as entity keys."""
        labels = [s.current_entity for s in self.all_slots()]
        for step in self.steps:
            labels.extend(step.from_entities)
            labels.extend(step.to_entities)
        labels.extend(self.target_entities)
        return sorted({entity_key(x) for x in labels if x.strip()})

    def bases(self) -> list[str]:
        return [self.base_0, *(s.resulting_base for s in self.steps)]

    def digest(self) -> str:
        return hashlib.sha256(to_text(self).encode("utf-8")).hexdigest()[:16]

    def with_targets(self, targets: Iterable[str]) -> "Plan":
        plan = replace(self, target_entities=tuple(targets))
        return with_questions(plan)

    def to_json(self) -> dict:
        return {
            "base_0": self.base_0,
            "slots": [_slot_json(s) for s in self.slots],
            "steps": [
                {
                    "k": s.index,
                    "from": list(s.from_entities),
                    "to": list(s.to_entities),
                    "slots": list(s.slot_refs),
                    "spawned": [_slot_json(c) for c in s.spawned],
                    "result": s.resulting_base,
                    "questions": [q.to_json() for q in s.question_set],
                }
                for s in self.steps
            ],
            "targets": list(self.target_entities),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Plan":
        steps = []
        for item in data["steps"]:
            questions = tuple(
                Question(q["text"], q["kind"], q["subject"]) for q in item.get("questions", ())
            )
            steps.append(
                ReplacementStep(
                    index=int(item["k"]),
                    from_entities=tuple(item["from"]),
                    to_entities=tuple(item["to"]),
                    slot_refs=tuple(item["slots"]),
                    resulting_base=item["result"],
                    spawned=tuple(_slot_from(c, int(item["k"])) for c in item.get("spawned", ())),
                    question_set=questions,
                )
            )
        plan = cls(
            base_0=data["base_0"],
            steps=tuple(steps),
            slots=tuple(_slot_from(s, 0) for s in data.get("slots", ())),
            target_entities=tuple(data.get("targets", ())),
        )
        if not any(s.question_set for s in plan.steps):
            plan = with_questions(plan)
        return plan


def _slot_json(s: Slot) -> dict:
    return {"id": s.v, "entity": s.current_entity, "parent": s.parent}


def _slot_from(d: dict, origin: int) -> Slot:
    return Slot(d["id"], d["entity"], 0, d.get("parent"), origin)


def _split_list(text: str, line: int, col: int, what: str) -> tuple[str, ...]:
    items = tuple(normalize_space(p) for p in text.split(","))
    if not items or any(not p for p in items):
        raise PlanParseError(f"empty item in {what} list", line, col)
    return items


def parse_plan(text: str, targets: Sequence[str] | None = None) -> Plan:
    """Parse plan text; any grammar violation raises ``PlanParseError``.

    Question sets are derived from the slot vocabulary, never parsed.
    """
    base = None
    declared: dict[str, tuple[Slot, int]] = {}
    slots: list[Slot] = []
    steps: list[dict] = []
    plan_targets: tuple[str, ...] | None = None
    saw_content = False

    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        col = len(raw) - len(raw.lstrip()) + 1
        saw_content = True
        if plan_targets is not None:
            raise PlanParseError("nothing may follow TARGETS", lineno, col)
        if base is None:
            m = _BASE.match(stripped)
            if not m:
                raise PlanParseError("plan must start with 'BASE: <sentence>'", lineno, col)
            base = normalize_space(m["text"])
            continue

        keyword = _KEYWORD.match(stripped)
        keyword = keyword.group(1) if keyword else ""
        if keyword == "SLOT":
            m = _SLOT.match(stripped)
            if not m:
                raise PlanParseError("malformed SLOT line", lineno, col)
            if m["id"] in declared:
                raise PlanParseError(f"slot {m['id']!r} declared twice", lineno, col + stripped.index(m["id"]))
            if steps and steps[-1]["result"] is not None:
                raise PlanParseError("spawned slots must precede the step's RESULT", lineno, col)
            if m["parent"] is not None and not re.fullmatch(_ID, m["parent"]):
                raise PlanParseError("malformed parent slot id", lineno, col + m.start("parent"))
            origin = steps[-1]["k"] if steps else 0
            slot = Slot(m["id"], normalize_space(m["entity"]), 0, m["parent"], origin)
            declared[slot.v] = (slot, lineno)
            if steps:
                steps[-1]["spawned"].append(slot)
            else:
                slots.append(slot)
        elif keyword == "STEP":
            m = _STEP.match(stripped)
            if not m:
                raise PlanParseError("malformed STEP line, expected 'STEP <k>: REPLACE a -> b @ slot'", lineno, col)
            if steps and steps[-1]["result"] is None:
                raise PlanParseError(f"step {steps[-1]['k']} has no RESULT line", lineno, col)
            k = int(m["k"])
            expected = len(steps) + 1
            if k != expected:
                raise PlanParseError(f"step index {k} breaks contiguity, expected {expected}", lineno,
                                     col + stripped.index(m["k"]))
            froms = _split_list(m["from"], lineno, col + m.start("from"), "REPLACE source")
            tos = _split_list(m["to"], lineno, col + m.start("to"), "REPLACE target")
            refs = tuple(p.strip() for p in m["slots"].split(","))
            if len(froms) != len(tos):
                raise PlanParseError(f"{len(froms)} sources but {len(tos)} targets", lineno, col + m.start("to"))
            if any(not re.fullmatch(_ID, r) for r in refs):
                raise PlanParseError("malformed slot reference", lineno, col + m.start("slots"))
            if len(refs) not in (1, len(froms)):
                raise PlanParseError("give one slot per replaced entity or a single slot", lineno,
                                     col + m.start("slots"))
            steps.append({"k": k, "from": froms, "to": tos, "slots": refs, "result": None,
                          "spawned": [], "line": lineno, "col": col + m.start("slots")})
        elif keyword == "RESULT":
            m = _RESULT.match(stripped)
            if not m:
                raise PlanParseError("malformed RESULT line", lineno, col)
            if not steps or steps[-1]["result"] is not None:
                raise PlanParseError("RESULT without a preceding STEP", lineno, col)
            steps[-1]["result"] = normalize_space(m["text"])
        elif keyword == "TARGETS":
            m = _TARGETS.match(stripped)
            if not m:
                raise PlanParseError("malformed TARGETS line", lineno, col)
            plan_targets = _split_list(m["text"], lineno, col + m.start("text"), "TARGETS")
        else:
            raise PlanParseError(f"unexpected line {stripped[:40]!r}", lineno, col)

    if not saw_content:
        raise PlanParseError("empty plan", 1, 1)
    if not steps:
        raise PlanParseError("plan has no steps", lineno, 1)
    if steps[-1]["result"] is None:
        raise PlanParseError(f"step {steps[-1]['k']} has no RESULT line", lineno, 1)

    for slot, line in declared.values():
        if slot.parent is not None and slot.parent not in declared:
            raise PlanParseError(f"slot {slot.v!r} has undeclared parent {slot.parent!r}", line, 1)
    for st in steps:
        for ref in st["slots"]:
            if ref not in declared:
                raise PlanParseError(f"undeclared slot {ref!r}", st["line"], st["col"])

    plan = Plan(
        base_0=base,
        steps=tuple(
            ReplacementStep(st["k"], st["from"], st["to"], st["slots"], st["result"], tuple(st["spawned"]))
            for st in steps
        ),
        slots=tuple(slots),
        target_entities=tuple(targets) if targets is not None else (plan_targets or ()),
    )
    return with_questions(plan)


def _slot_line(s: Slot) -> str:
    line = f"SLOT {s.v}: {s.current_entity}"
    return line + (f" < {s.parent}" if s.parent is not None else "")


def to_text(plan: Plan) -> str:
    lines = [f"BASE: {plan.base_0}"]
    lines.extend(_slot_line(s) for s in plan.slots)
    for step in plan.steps:
        lines.append(
            f"STEP {step.index}: REPLACE {', '.join(step.from_entities)} -> "
            f"{', '.join(step.to_entities)} @ {','.join(step.slot_refs)}"
        )
        lines.extend(_slot_line(s) for s in step.spawned)
        lines.append(f"RESULT: {step.resulting_base}")
    if plan.target_entities:
        lines.append(f"TARGETS: {', '.join(plan.target_entities)}")
    return "\n".join(lines) + "\n"


def canonicalize(text: str) -> str:
    """Lexically normalized plan text: the form ``to_text`` emits."""
    out = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if m := _BASE.match(line):
            out.append(f"BASE: {normalize_space(m['text'])}")
        elif m := _SLOT.match(line):
            slot = f"SLOT {m['id']}: {normalize_space(m['entity'])}"
            out.append(slot + (f" < {m['parent']}" if m["parent"] else ""))
        elif m := _STEP.match(line):
            froms = ", ".join(normalize_space(p) for p in m["from"].split(","))
            tos = ", ".join(normalize_space(p) for p in m["to"].split(","))
            refs = ",".join(p.strip() for p in m["slots"].split(","))
            out.append(f"STEP {int(m['k'])}: REPLACE {froms} -> {tos} @ {refs}")
        elif m := _RESULT.match(line):
            out.append(f"RESULT: {normalize_space(m['text'])}")
        elif m := _TARGETS.match(line):
            out.append("TARGETS: " + ", ".join(normalize_space(p) for p in m["text"].split(",")))
        else:
            out.append(line)
    return "\n".join(out) + "\n"


def loads_plan(text: str, targets: Sequence[str] | None = None) -> Plan:
    """Plan from either grammar text or its JSON serialization."""
    if text.lstrip().startswith("{"):
        plan = Plan.from_json(json.loads(text))
        return plan.with_targets(targets) if targets is not None else plan
    return parse_plan(text, targets)


def initial_slots(plan: Plan) -> dict[str, Slot]:
    return {s.v: s for s in plan.slots}


def apply_step(base: str, step: ReplacementStep, slots: dict[str, Slot] | None = None):
    """Substitute each ``from`` by its ``to`` (first whole-word occurrence).

    Returns ``(next_base, slots)``; the declared ``resulting_base`` must match
    the substitution up to whitespace and case.
    """
    text = base
    for old, new in zip(step.from_entities, step.to_entities):
        updated = replace_first_word(text, old, new)
        if updated is None:
            raise PlanApplicationError(f"step {step.index}: {old!r} does not occur in {text!r}")
        text = updated
    if normalize_space(text).lower() != normalize_space(step.resulting_base).lower():
        raise PlanApplicationError(
            f"step {step.index}: substitution gives {normalize_space(text)!r}, "
            f"plan states {step.resulting_base!r}"
        )
    new_slots = dict(slots or {})
    for i, ref in enumerate(step.slot_refs):
        if ref not in new_slots:
            continue
        if len(step.slot_refs) == len(step.to_entities):
            entity = step.to_entities[i]
        else:
            entity = ", ".join(step.to_entities)
        cur = new_slots[ref]
        new_slots[ref] = replace(cur, current_entity=entity, n=cur.n + 1)
    for child in step.spawned:
        new_slots[child.v] = replace(child, n=0)
    return step.resulting_base, new_slots


def required_entities(plan: Plan, base: str) -> list[str]:
    return entities_in(base, plan.vocabulary())


def derive_questions(plan: Plan) -> list[tuple[Question, ...]]:
    """Count question plus one presence question per entity present in each Base_k."""
    blocks = []
    for step in plan.steps:
        ents = required_entities(plan, step.resulting_base)
        blocks.append((count_question(len(ents)), *(presence(e) for e in ents)))
    return blocks


def with_questions(plan: Plan) -> Plan:
    blocks = derive_questions(plan)
    return replace(plan, steps=tuple(replace(s, question_set=b) for s, b in zip(plan.steps, blocks)))


def _cycles(slots: Sequence[Slot]) -> list[str]:
    parent = {s.v: s.parent for s in slots}
    found = []
    for start in parent:
        seen = []
        node = start
        while node is not None and node in parent:
            if node in seen:
                cycle = seen[seen.index(node):]
                if min(cycle) == start:
                    found.append(" -> ".join([*cycle, node]))
                break
            seen.append(node)
            node = parent[node]
    return found


def validate_plan(plan: Plan, target_entities: Sequence[str] | None = None) -> list[str]:
    """Every structural violation, in a stable order; an empty list means valid."""
    targets = list(target_entities) if target_entities is not None else list(plan.target_entities)
    violations: list[str] = []
    final = plan.bases()[-1]
    for t in targets:
        if not (contains_word(final, t) or contains_word(final, entity_key(t))):
            violations.append(f"unreached target: {t}")

    all_slots = plan.all_slots()
    for cycle in _cycles(all_slots):
        violations.append(f"slot cycle: {cycle}")

    indices = [s.index for s in plan.steps]
    if indices != list(range(1, len(indices) + 1)):
        violations.append(f"step indices not contiguous: {indices}")

    origin = {s.v: s.origin for s in all_slots}
    slots = initial_slots(plan)
    base = plan.base_0
    for step in plan.steps:
        if len(set(step.slot_refs)) != len(step.slot_refs):
            violations.append(f"step {step.index}: slot touched twice in one replacement")
        for i, ref in enumerate(step.slot_refs):
            if ref not in origin:
                violations.append(f"step {step.index}: undeclared slot {ref}")
            elif origin[ref] >= step.index:
                violations.append(f"step {step.index}: slot {ref} used before it is declared")
            elif ref in slots:
                expect = step.from_entities[i] if len(step.slot_refs) == len(step.from_entities) else None
                current = entity_key(slots[ref].current_entity)
                if expect is not None and entity_key(expect) != current:
                    violations.append(
                        f"step {step.index}: slot {ref} holds {slots[ref].current_entity!r}, not {expect!r}"
                    )
                elif expect is None and current not in {entity_key(f) for f in step.from_entities}:
                    violations.append(f"step {step.index}: slot {ref} holds none of the replaced entities")
        for child in step.spawned:
            if child.parent is None or child.parent not in step.slot_refs:
                violations.append(f"step {step.index}: spawned slot {child.v} must hang under a replaced slot")
        for to in step.to_entities:
            if not contains_word(step.resulting_base, to):
                violations.append(f"step {step.index}: result lacks {to!r}")
        try:
            base, slots = apply_step(base, step, slots)
        except PlanApplicationError as exc:
            violations.append(str(exc))
            base = step.resulting_base

        block = step.question_set
        expected = set(required_entities(plan, step.resulting_base))
        counts = [q for q in block if q.kind == "count"]
        if not block:
            violations.append(f"step {step.index}: empty question set")
        elif len(counts) != 1:
            violations.append(f"step {step.index}: question set needs exactly one count question")
        else:
            if counts[0].subject != len(expected):
                violations.append(
                    f"step {step.index}: count question expects {counts[0].subject}, base has {len(expected)}"
                )
            asked = {entity_key(str(q.subject)) for q in block if q.kind == "presence"}
            for ent in sorted(expected - asked):
                violations.append(f"step {step.index}: no presence question for {ent}")
    return violations


# language-model conversation

def parse_entities(response: str) -> list[str]:
    for line in response.splitlines():
        m = re.match(r"^\s*ENTITIES\s*:\s*(.*)$", line)
        if m:
            return [normalize_space(p) for p in m.group(1).split(",") if p.strip()]
    raise ProtocolError("stage-1 answer has no 'ENTITIES:' line")


def render_conversation(
    prompt: str,
    stage: int,
    history: Sequence[tuple[str, str]] = (),
    targets: Sequence[str] | None = None,
) -> str:
    """Request text for plan-generation stage 1, 2 or 3.

    ``history`` holds the earlier ``(request, response)`` exchanges in order.
    """
    if stage == 1:
        hint = f"Required entities: {', '.join(targets)}" if targets else ""
        return render("elnp_stage1", prompt=prompt, hint=hint)
    if stage == 2:
        if len(history) < 1:
            raise ProtocolError("stage 2 needs the stage-1 exchange")
        entities = parse_entities(history[0][1])
        return render("elnp_stage2", prompt=prompt, entities=", ".join(entities))
    if stage == 3:
        if len(history) < 2:
            raise ProtocolError("stage 3 needs the stage-1 and stage-2 exchanges")
        return render(
            "elnp_stage3",
            prompt=prompt,
            stage1_request=history[0][0],
            stage1_response=history[0][1],
            stage2_request=history[1][0],
            stage2_response=history[1][1],
        )
    raise ValueError(f"stage must be 1, 2 or 3, got {stage}")


@dataclass
class PlanGeneration:
    plan: Plan
    exchanges: list[tuple[str, str]] = field(default_factory=list)


def generate_plan(prompt: str, lm, targets: Sequence[str] | None = None, retries: int = 1) -> PlanGeneration:
    """Run the three-stage conversation and parse the final answer.

    A parse failure or validation violation triggers ``retries`` re-asks with
    the error appended; after that the last error propagates.
    """
    history: list[tuple[str, str]] = []
    for stage in (1, 2):
        request = render_conversation(prompt, stage, history, targets)
        history.append((request, lm.complete(request)))
    request = render_conversation(prompt, 3, history, targets)
    for attempt in range(retries + 1):
        response = lm.complete(request)
        history.append((request, response))
        try:
            plan = parse_plan(response, targets)
            problems = validate_plan(plan) if plan.target_entities else []
            if not problems:
                return PlanGeneration(plan, history)
            error: Exception = PlanParseError("; ".join(problems), 0, 0)
        except PlanParseError as exc:
            error = exc
        if attempt == retries:
            raise error
        request = (
            render_conversation(prompt, 3, history, targets)
            + f"\nYour previous answer was rejected: {error}. Answer again in exactly the required format."
        )
    raise AssertionError("unreachable")
