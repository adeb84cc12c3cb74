"""Deterministic simulated world implementing every port.

Images are maps from entity key to fidelity. All randomness is a pure
function of ``(run_seed, lineage, purpose)``, so results never depend on
scheduling or wall-clock.
"""
from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass, field
from typing import Sequence

from rit.errors import ProtocolError
from rit.text import (
    contains_word,
    entities_in,
    entity_key,
    normalize_space,
    replace_first_word,
    with_article,
)

_PRESENCE = re.compile(r"^Is there an? (?P<label>.+) in the image\?$")
_COUNT = re.compile(r"^(?:Is|Are) there exactly (?P<n>\d+) (?:entity|distinct entities) in the image\?$")

STAND_INS = ("table", "chair", "lamp", "tree", "dog", "bench", "ball", "box", "cup", "rock",
             "bird", "car", "fence", "flower", "bucket", "basket")
CONNECTORS = ("beside", "near", "next to", "with", "behind", "in front of")


def uniform(*key) -> float:
    """Uniform draw in [0, 1) keyed by ``key``."""
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


@dataclass(frozen=True)
class SimConfig:
    p_success: float = 1.0
    partial_outcome_probs: tuple[float, float] = (0.5, 0.5)  # (both present, neither present)
    fidelity_range: tuple[float, float] = (0.6, 1.0)
    epsilon: float = 0.0
    run_seed: int = 0
    vocabulary: tuple[str, ...] = ()
    presence_cutoff: float = 0.5
    score_scale: dict = field(default_factory=lambda: {"C": (0.35, 0.0), "I": (2.0, -1.0)})
    score_jitter: float = 0.02
    prob_table: dict = field(default_factory=dict)
    lm_scripts: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.p_success <= 1.0:
            raise ValueError("p_success outside [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon outside [0, 1]")
        lo, hi = self.fidelity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("fidelity range must satisfy 0 <= lo <= hi <= 1")
        both, neither = self.partial_outcome_probs
        if both < 0 or neither < 0 or both + neither <= 0:
            raise ValueError("partial outcome weights must be nonnegative and not both zero")

    @classmethod
    def from_json(cls, data: dict) -> "SimConfig":
        data = dict(data)
        partial = data.pop("partial_outcome_probs", None)
        if isinstance(partial, dict):
            data["partial_outcome_probs"] = (float(partial.get("both", 0.0)), float(partial.get("neither", 0.0)))
        elif partial is not None:
            data["partial_outcome_probs"] = tuple(partial)
        for key in ("fidelity_range", "vocabulary"):
            if key in data:
                data[key] = tuple(data[key])
        if "score_scale" in data:
            data["score_scale"] = {k: tuple(v) for k, v in data["score_scale"].items()}
        if "lm_scripts" in data:
            data["lm_scripts"] = tuple((s["match"], s["response"]) for s in data["lm_scripts"])
        return cls(**data)


@dataclass(frozen=True)
class SimImage:
    entities: tuple[tuple[str, float], ...]
    lineage: tuple

    def fidelity(self, key: str) -> float:
        return dict(self.entities).get(key, 0.0)

    def visible(self, cutoff: float = 0.5) -> list[str]:
        return [k for k, f in self.entities if f >= cutoff]


class SimWorld:
    """In-process backend; ``call`` speaks the same wire format as HTTP."""

    def __init__(self, config: SimConfig | None = None):
        self.config = config or SimConfig()
        self._lock = threading.Lock()
        self._images: dict[str, SimImage] = {}
        self._tokens: dict[str, str] = {}
        self._children: dict[str, int] = {}
        self._generations = 0

    # helpers
    def _draw(self, lineage, purpose) -> float:
        return uniform(self.config.run_seed, lineage, purpose)

    def _fidelity(self, lineage, purpose) -> float:
        lo, hi = self.config.fidelity_range
        return lo + (hi - lo) * self._draw(lineage, purpose)

    def _issue(self, lineage: tuple, entities: dict[str, float]) -> dict:
        path = ".".join(str(x) for x in lineage)
        image_ref = f"sim-img:{self.config.run_seed}:{path}"
        token = f"sim-state:{self.config.run_seed}:{path}"
        image = SimImage(tuple(sorted(entities.items())), lineage)
        self._images[image_ref] = image
        self._tokens[token] = image_ref
        return {"image_ref": image_ref, "state_token": token}

    def image(self, image_ref: str) -> SimImage:
        try:
            return self._images[image_ref]
        except KeyError:
            raise ProtocolError(f"unknown image {image_ref!r}") from None

    # ports
    def generate(self, prompt: str) -> dict:
        with self._lock:
            lineage = (self._generations,)
            self._generations += 1
            keys = entities_in(prompt, self.config.vocabulary)
            ents = {k: self._fidelity(lineage, ("seed", k)) for k in keys}
            return self._issue(lineage, ents)

    def replace(self, state_token: str, slots, from_: Sequence[str], to: Sequence[str], base: str) -> dict:
        if len(from_) != len(to) or not from_:
            raise ProtocolError("replace needs equal-length, non-empty from/to lists")
        with self._lock:
            if state_token not in self._tokens:
                raise ProtocolError(f"unknown state token {state_token!r}")
            parent = self._images[self._tokens[state_token]]
            attempt = self._children.get(state_token, 0)
            self._children[state_token] = attempt + 1
            lineage = (*parent.lineage, attempt)
            ents = dict(parent.entities)
            both_w, neither_w = self.config.partial_outcome_probs
            p = self.config.p_success
            for i, (old, new) in enumerate(zip(from_, to)):
                old_k, new_k = entity_key(old), entity_key(new)
                u = self._draw(lineage, ("outcome", i))
                if u < p:
                    outcome = "success"
                else:
                    v = (u - p) / (1.0 - p)
                    outcome = "both" if v < both_w / (both_w + neither_w) else "neither"
                if outcome in ("success", "neither"):
                    ents.pop(old_k, None)
                if outcome in ("success", "both"):
                    ents[new_k] = self._fidelity(lineage, ("add", i))
            return self._issue(lineage, ents)

    def ask(self, image_ref: str, question: str) -> str:
        image = self.image(image_ref)
        cutoff = self.config.presence_cutoff
        question = normalize_space(question)
        if m := _PRESENCE.match(question):
            truth = image.fidelity(entity_key(m["label"])) >= cutoff
        elif m := _COUNT.match(question):
            truth = len(image.visible(cutoff)) == int(m["n"])
        else:
            raise ProtocolError(f"simulated vqa cannot answer {question!r}")
        if self.config.epsilon > 0 and self._draw(image.lineage, ("vqa", question)) < self.config.epsilon:
            truth = not truth
        return "yes" if truth else "no"

    def score(self, image_ref: str, text: str, kind: str = "C") -> float:
        image = self.image(image_ref)
        if kind not in self.config.score_scale:
            raise ProtocolError(f"unknown score kind {kind!r}")
        scale, offset = self.config.score_scale[kind]
        matched = [f for k, f in image.entities if contains_word(text, k)]
        best = max(matched, default=0.0)
        jitter = self.config.score_jitter * (2.0 * self._draw(image.lineage, ("score", kind, text)) - 1.0)
        return scale * best + offset + jitter

    def prob(self, a: str, b: str) -> float:
        lo, hi = sorted((a, b))
        table = self.config.prob_table
        if f"{lo}|{hi}" in table:
            return float(table[f"{lo}|{hi}"])
        return uniform(self.config.run_seed, "prob", lo, hi)

    def complete(self, text: str) -> str:
        for match, response in self.config.lm_scripts:
            if match in text:
                return response
        if text.startswith("[task: scene prompt]"):
            return self._sentence(text)
        if text.startswith("[ELNP stage 1"):
            return self._stage1(text)
        if text.startswith("[ELNP stage 2"):
            ents = _line_list(text, "ENTITIES")
            return "\n".join(f"STATUS {e}: counterfactual; stand-in: {s}"
                             for e, s in zip(ents, STAND_INS))
        if text.startswith("[ELNP stage 3"):
            return self._stage3(text)
        raise ProtocolError("simulated language model has no answer for this request")

    def _sentence(self, text: str) -> str:
        labels = _line_list(text, "Concepts")
        parts = [labels[0]]
        for i, label in enumerate(labels[1:], 1):
            conn = CONNECTORS[int(uniform(self.config.run_seed, "sentence", tuple(labels), i) * len(CONNECTORS))]
            parts.append(f"{conn} {with_article(label)}")
        return " ".join(parts)

    def _stage1(self, text: str) -> str:
        hinted = _line_list(text, "Required entities")
        if hinted:
            return "ENTITIES: " + ", ".join(hinted)
        prompt = _line_value(text, "Prompt")
        return "ENTITIES: " + ", ".join(entities_in(prompt, self.config.vocabulary))

    def _stage3(self, text: str) -> str:
        prompt = _line_value(text, "Prompt", last=True)
        entities = _line_list(text, "ENTITIES", last=True)
        placed = sorted(
            ((m.start(), e) for e in entities if (m := re.search(
                r"(?<!\w)" + re.escape(e) + r"(?!\w)", prompt, re.IGNORECASE))),
        )
        pool = [s for s in STAND_INS if not contains_word(prompt, s)]
        base = prompt
        pairs = []
        for (_, ent), stand in zip(placed, pool):
            base = replace_first_word(base, ent, stand)
            pairs.append((stand, ent))
        lines = [f"BASE: {base}"]
        lines += [f"SLOT s{i}: {stand}" for i, (stand, _) in enumerate(pairs, 1)]
        current = base
        for i, (stand, ent) in enumerate(pairs, 1):
            current = replace_first_word(current, stand, ent)
            lines.append(f"STEP {i}: REPLACE {stand} -> {ent} @ s{i}")
            lines.append(f"RESULT: {current}")
        lines.append("TARGETS: " + ", ".join(entities))
        return "\n".join(lines)

    def call(self, endpoint: str, request: dict) -> dict:
        try:
            if endpoint == "generate":
                return self.generate(request["prompt"])
            if endpoint == "replace":
                return self.replace(request["state_token"], request.get("slots", []),
                                    request["from"], request["to"], request.get("base", ""))
            if endpoint == "vqa":
                return {"answer": self.ask(request["image_ref"], request["question"])}
            if endpoint == "complete":
                return {"text": self.complete(request["text"])}
            if endpoint == "prob":
                return {"p": self.prob(request["a"], request["b"])}
            if endpoint == "score":
                return {"score": self.score(request["image_ref"], request["text"], request.get("kind", "C"))}
        except KeyError as exc:
            raise ProtocolError(f"/{endpoint} request lacks {exc}") from None
        raise ProtocolError(f"unknown endpoint /{endpoint}")


def _line_value(text: str, name: str, last: bool = False) -> str:
    found = ""
    for line in text.splitlines():
        if line.startswith(name + ":"):
            found = line[len(name) + 1:].strip()
            if not last:
                return found
    return found


def _line_list(text: str, name: str, last: bool = False) -> list[str]:
    value = _line_value(text, name, last)
    return [normalize_space(p) for p in value.split(",") if p.strip()]
