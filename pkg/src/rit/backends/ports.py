"""Wire-level port contract and the typed facade the engine talks to.

Every backend implements ``call(endpoint, request) -> response`` over plain
JSON-able dicts, with one endpoint per port operation:

=========  ===============================================================
generate   {"prompt"} -> {"image_ref", "state_token"}
replace    {"state_token", "slots", "from", "to", "base"} -> {"image_ref", "state_token"}
vqa        {"image_ref", "question"} -> {"answer": "yes" | "no"}
complete   {"text"} -> {"text"}
prob       {"a", "b"} -> {"p"}
score      {"image_ref", "text", "kind"} -> {"score"}
=========  ===============================================================
"""
from __future__ import annotations

import math
from typing import Protocol, Sequence

from rit.errors import ProtocolError

ENDPOINTS = ("generate", "replace", "vqa", "complete", "prob", "score")


class Backend(Protocol):
    def call(self, endpoint: str, request: dict) -> dict: ...


def _field(response: dict, key: str, endpoint: str):
    if not isinstance(response, dict) or key not in response:
        raise ProtocolError(f"/{endpoint} response lacks {key!r}: {response!r}")
    return response[key]


class Ports:
    """Typed access to the six endpoints with response validation."""

    def __init__(self, backend: Backend):
        self.backend = backend

    def _state(self, endpoint: str, response: dict) -> tuple[str, str]:
        image_ref = _field(response, "image_ref", endpoint)
        token = _field(response, "state_token", endpoint)
        if not isinstance(image_ref, str) or not isinstance(token, str) or not token:
            raise ProtocolError(f"/{endpoint} returned malformed state {response!r}")
        return image_ref, token

    def generate(self, prompt: str) -> tuple[str, str]:
        return self._state("generate", self.backend.call("generate", {"prompt": prompt}))

    def replace(self, state_token: str, slots: Sequence[str], from_: Sequence[str],
                to: Sequence[str], base: str) -> tuple[str, str]:
        request = {"state_token": state_token, "slots": list(slots), "from": list(from_),
                   "to": list(to), "base": base}
        return self._state("replace", self.backend.call("replace", request))

    def ask(self, image_ref: str, question: str) -> bool:
        answer = _field(self.backend.call("vqa", {"image_ref": image_ref, "question": question}),
                        "answer", "vqa")
        if answer not in ("yes", "no"):
            raise ProtocolError(f"/vqa answer must be 'yes' or 'no', got {answer!r}")
        return answer == "yes"

    def complete(self, text: str) -> str:
        out = _field(self.backend.call("complete", {"text": text}), "text", "complete")
        if not isinstance(out, str):
            raise ProtocolError(f"/complete returned non-text {out!r}")
        return out

    def prob(self, a: str, b: str) -> float:
        p = _field(self.backend.call("prob", {"a": a, "b": b}), "p", "prob")
        if isinstance(p, bool) or not isinstance(p, (int, float)) or math.isnan(p) or not 0.0 <= p <= 1.0:
            raise ProtocolError(f"/prob returned {p!r}, expected a probability in [0, 1]")
        return float(p)

    def score(self, image_ref: str, text: str, kind: str = "C") -> float:
        s = _field(self.backend.call("score", {"image_ref": image_ref, "text": text, "kind": kind}),
                   "score", "score")
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s):
            raise ProtocolError(f"/score returned non-finite {s!r}")
        return float(s)
