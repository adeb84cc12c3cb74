"""Alignment metrics: entity score, disparity, multi-concept variance, coverage.

Scores are accepted as any finite reals; nothing here clamps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from rit import _accel
from rit.errors import CoverageError, ScoringError
from rit.text import with_article

REPORT_SCALE = 10.0
SQRT_N = "sqrt_n"
BIASED = "n"


@dataclass(frozen=True)
class EntityScore:
    concept: str
    s_label: float
    s_desc: float | None
    s: float

    def to_json(self, image: str) -> dict:
        return {"image": image, "concept": self.concept, "s_label": self.s_label,
                "s_desc": self.s_desc, "s": self.s}


@dataclass(frozen=True)
class ScoreVector:
    image: str
    entries: tuple[EntityScore, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("score vector needs at least one entry")
        ids = [e.concept for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate concepts in score vector: {ids}")
        for e in self.entries:
            if not math.isfinite(e.s):
                raise ValueError(f"non-finite score for {e.concept!r}")

    @property
    def values(self) -> list[float]:
        return [e.s for e in self.entries]

    @property
    def mean(self) -> float:
        return sum(self.values) / len(self.entries)


def _finite(value, what: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ScoringError(f"{what}: scorer returned {value!r}") from None
    if not math.isfinite(value):
        raise ScoringError(f"{what}: scorer returned non-finite {value!r}")
    return value


def entity_score(image: str, concept, scorer, kind: str = "C") -> EntityScore:
    """Max of the scorer over the concept label and, if present, its description."""
    cid = getattr(concept, "id", concept)
    label = getattr(concept, "label", concept)
    description = getattr(concept, "description", None)
    try:
        s_label = _finite(scorer.score(image, label, kind), f"concept {cid!r} label")
        s_desc = None
        if description:
            s_desc = _finite(scorer.score(image, description, kind), f"concept {cid!r} description")
    except ScoringError:
        raise
    except Exception as exc:
        raise ScoringError(f"scoring concept {cid!r} failed: {exc}") from exc
    best = s_label if s_desc is None else max(s_label, s_desc)
    return EntityScore(cid, s_label, s_desc, best)


def score_image(image: str, concepts: Sequence, scorer, kind: str = "C") -> ScoreVector:
    return ScoreVector(image, tuple(entity_score(image, c, scorer, kind) for c in concepts))


def disparity(a: float, b: float) -> float:
    return abs(a - b)


def variance_n(scores: Sequence[float], normalization: str = SQRT_N) -> float:
    """Sum of squared deviations from the mean, divided by sqrt(n).

    ``normalization="n"`` gives the textbook biased variance instead.
    """
    values = [float(s) for s in scores]
    n = len(values)
    if n < 2:
        raise ValueError(f"variance needs at least two scores, got {n}")
    if not all(math.isfinite(v) for v in values):
        raise ValueError("scores must be finite")
    if normalization not in (SQRT_N, BIASED):
        raise ValueError(f"unknown normalization {normalization!r}")
    mean = 0.0
    for v in values:
        mean = mean + v
    mean = mean / n
    ss = 0.0
    for v in values:
        dev = v - mean
        ss = ss + dev * dev
    return ss / (math.sqrt(n) if normalization == SQRT_N else float(n))


def variance_batch(rows, normalization: str = SQRT_N) -> np.ndarray:
    """``variance_n`` over each row of an equal-width score array."""
    return _accel.variance_rows(np.asarray(rows, dtype=np.float64), normalization == SQRT_N)


def variance_mix(groups: Sequence[Sequence[float]], normalization: str = SQRT_N) -> float:
    """Unweighted mean of per-kind variances; each group is one kind's score list."""
    if not groups:
        raise ValueError("variance_mix needs at least one group")
    return sum(variance_n(g, normalization) for g in groups) / len(groups)


def mean_of(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        raise ValueError("mean of an empty sequence")
    return sum(vals) / len(vals)


@dataclass(frozen=True)
class CoverageResult:
    image: str
    n: int
    k: int
    verdicts: tuple[tuple[str, bool], ...] = field(default=())

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise ValueError(f"covered count {self.k} outside [0, {self.n}]")
        if self.verdicts and sum(v for _, v in self.verdicts) != self.k:
            raise ValueError("k disagrees with the per-concept verdicts")

    def to_json(self) -> dict:
        return {"image": self.image, "n": self.n, "k": self.k,
                "verdicts": {c: v for c, v in self.verdicts}}


def targeted(coverage: CoverageResult) -> float:
    if coverage.n <= 0:
        raise ValueError("coverage over zero concepts")
    return coverage.k / coverage.n


def total_targeted(ts: Sequence[float], n_images: int | None = None) -> float:
    n_images = len(ts) if n_images is None else n_images
    if n_images <= 0 or n_images != len(ts):
        raise ValueError(f"need one t per image, got {len(ts)} values for N={n_images}")
    return sum(ts) / n_images


def presence_question(label: str) -> str:
    return f"Is there {with_article(label)} in the image?"


def count_covered(image: str, concepts: Sequence, vqa) -> CoverageResult:
    """Ask one presence question per concept; k is the number of yes answers."""
    verdicts = []
    for concept in concepts:
        cid = getattr(concept, "id", concept)
        label = getattr(concept, "label", concept)
        try:
            answer = vqa.ask(image, presence_question(label))
        except Exception as exc:
            raise CoverageError(f"presence check for {cid!r} failed: {exc}") from exc
        verdicts.append((cid, bool(answer)))
    return CoverageResult(image, len(verdicts), sum(v for _, v in verdicts), tuple(verdicts))


def scaled(value: float, enabled: bool = True) -> float:
    """Apply the x10 reporting convention (disparity and variance columns only)."""
    return value * REPORT_SCALE if enabled else value
