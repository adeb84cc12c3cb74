"""Question-block gating: threshold schedules, verdicts and the commit/rollback machine."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

from rit.errors import GateError

# ratios and thresholds are compared with this slack so 3/5 passes 0.6
EPS = 1e-12


@dataclass(frozen=True)
class ThresholdSchedule:
    kind: str = "fixed"
    fixed_value: float = 0.6
    dynamic_start: float = 1.0
    dynamic_decrement: float = 0.2
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "dynamic"):
            raise ValueError(f"schedule kind must be fixed or dynamic, got {self.kind!r}")
        for name in ("fixed_value", "dynamic_start", "dynamic_decrement", "floor"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    @classmethod
    def fixed(cls, value: float = 0.6) -> "ThresholdSchedule":
        return cls("fixed", fixed_value=value)

    @classmethod
    def dynamic(cls, start: float = 1.0, decrement: float = 0.2, floor: float = 0.0) -> "ThresholdSchedule":
        return cls("dynamic", dynamic_start=start, dynamic_decrement=decrement, floor=floor)

    @classmethod
    def parse(cls, text: str) -> "ThresholdSchedule":
        """``"0.6"`` or ``"60%"`` for fixed, ``"dynamic"`` for the 100%/-20% schedule."""
        text = text.strip().lower()
        if text == "dynamic":
            return cls.dynamic()
        if text.endswith("%"):
            return cls.fixed(float(text[:-1]) / 100.0)
        return cls.fixed(float(text))

    @property
    def name(self) -> str:
        if self.kind == "dynamic":
            return "dynamic"
        return f"{round(self.fixed_value * 100):d}%"

    def to_json(self) -> dict:
        return asdict(self)


def threshold_for_step(schedule: ThresholdSchedule, k: int) -> float:
    if k < 1:
        raise ValueError(f"steps are numbered from 1, got {k}")
    if schedule.kind == "fixed":
        return schedule.fixed_value
    value = schedule.dynamic_start - (k - 1) * schedule.dynamic_decrement
    return max(schedule.floor, round(value, 12))


@dataclass(frozen=True)
class Verdict:
    answers: tuple[bool, ...]
    pass_ratio: float
    passed: bool
    mandatory_count_ok: bool
    threshold: float


def evaluate(block: Sequence, image_ref: str, vqa, threshold: float) -> Verdict:
    """Ask every question; pass when the yes fraction reaches ``threshold``.

    The count question votes like any other; its answer is also kept apart
    in ``mandatory_count_ok``.
    """
    if not block:
        raise GateError("empty question block")
    if not any(q.kind == "count" for q in block):
        raise GateError("question block lacks the mandatory count question")
    answers = []
    count_ok = True
    for q in block:
        try:
            yes = bool(vqa.ask(image_ref, q.text))
        except GateError:
            raise
        except Exception as exc:
            raise GateError(f"vqa failed on {q.text!r}: {exc}") from exc
        answers.append(yes)
        if q.kind == "count":
            count_ok = count_ok and yes
    ratio = sum(answers) / len(answers)
    return Verdict(tuple(answers), ratio, ratio >= threshold - EPS, count_ok, threshold)


@dataclass(frozen=True)
class IterationState:
    step: int
    state_token: str
    image_ref: str
    attempts: int = 0


class Transition(str, Enum):
    COMMIT = "commit"
    ROLLBACK_RETRY = "rollback-retry"
    FORCE_COMMIT = "force-commit"
    ABORT = "abort"


@dataclass(frozen=True)
class GateEvent:
    run: str
    step: int
    attempt: int
    ratio: float | None
    threshold: float
    transition: str
    error: str | None = None

    def to_json(self) -> dict:
        out = {"run": self.run, "step": self.step, "attempt": self.attempt,
               "ratio": self.ratio, "threshold": self.threshold, "transition": self.transition}
        if self.error is not None:
            out["error"] = self.error
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=False)


@dataclass
class GateMachine:
    """Owns the committed state stack of one run and its per-step retry budget.

    ``stack[i]`` is the state after step ``i``; a rollback simply leaves the
    stack as it was, so the active token is the step ``k-1`` commit.
    """

    base: IterationState
    budget: int = 5
    run: str = ""
    stack: list[IterationState] = field(init=False)
    attempts: int = field(init=False, default=0)
    candidates: list[tuple[float, IterationState]] = field(init=False, default_factory=list)
    events: list[GateEvent] = field(init=False, default_factory=list)
    forced: list[int] = field(init=False, default_factory=list)
    evaluations: int = field(init=False, default=0)
    aborted: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("retry budget must be at least 1")
        self.stack = [self.base]

    @property
    def step(self) -> int:
        """Index of the step currently being attempted."""
        return len(self.stack)

    @property
    def active(self) -> IterationState:
        return self.stack[-1]

    def _reset(self):
        self.attempts = 0
        self.candidates = []

    def _commit(self, state: IterationState, kind: Transition, ratio, threshold) -> Transition:
        self.stack.append(IterationState(self.step, state.state_token, state.image_ref, self.attempts))
        self.events.append(GateEvent(self.run, state.step, self.attempts, ratio, threshold, kind.value))
        self._reset()
        return kind

    def advance(self, verdict: Verdict, candidate: IterationState) -> Transition:
        if self.aborted:
            raise GateError("machine already aborted")
        if candidate.step != self.step:
            raise GateError(f"candidate for step {candidate.step}, machine at step {self.step}")
        self.attempts += 1
        self.evaluations += 1
        self.candidates.append((verdict.pass_ratio, candidate))
        if verdict.passed:
            return self._commit(candidate, Transition.COMMIT, verdict.pass_ratio, verdict.threshold)
        if self.attempts < self.budget:
            self.events.append(GateEvent(self.run, self.step, self.attempts, verdict.pass_ratio,
                                         verdict.threshold, Transition.ROLLBACK_RETRY.value))
            return Transition.ROLLBACK_RETRY
        return self._force(verdict.threshold)

    def _force(self, threshold: float) -> Transition:
        if not self.candidates:
            self.aborted = True
            self.events.append(GateEvent(self.run, self.step, self.attempts, None, threshold,
                                         Transition.ABORT.value, "retry budget spent without a candidate"))
            return Transition.ABORT
        best_ratio, best = self.candidates[0]
        for ratio, cand in self.candidates[1:]:
            if ratio > best_ratio + EPS:
                best_ratio, best = ratio, cand
        self.forced.append(self.step)
        return self._commit(best, Transition.FORCE_COMMIT, best_ratio, threshold)

    def fail_attempt(self, error: Exception | str, threshold: float, retryable: bool = True) -> Transition:
        """A port failure during replace or evaluation; it consumes one attempt."""
        if self.aborted:
            raise GateError("machine already aborted")
        self.attempts += 1
        if not retryable:
            self.aborted = True
            self.events.append(GateEvent(self.run, self.step, self.attempts, None, threshold,
                                         Transition.ABORT.value, str(error)))
            return Transition.ABORT
        if self.attempts < self.budget:
            self.events.append(GateEvent(self.run, self.step, self.attempts, None, threshold,
                                         Transition.ROLLBACK_RETRY.value, str(error)))
            return Transition.ROLLBACK_RETRY
        if not self.candidates:
            self.aborted = True
            self.events.append(GateEvent(self.run, self.step, self.attempts, None, threshold,
                                         Transition.ABORT.value, str(error)))
            return Transition.ABORT
        return self._force(threshold)
