"""Benchmark construction: concept distances, collection ranking, prompt synthesis."""
from __future__ import annotations

import itertools
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from rit import _accel
from rit.errors import (
    BuildError,
    IncompleteMatrixError,
    OracleProtocolError,
    PromptSynthesisError,
)
from rit.templates import render
from rit.text import contains_word

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Concept:
    id: str
    label: str
    description: str | None = None
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ValueError("concept id must be non-empty")
        if not self.label.strip():
            raise ValueError(f"concept {self.id!r} has an empty label")

    def to_json(self) -> dict:
        out = {"id": self.id, "label": self.label}
        if self.description is not None:
            out["description"] = self.description
        if self.aliases:
            out["aliases"] = list(self.aliases)
        return out


def load_universe(path: str | os.PathLike) -> list[Concept]:
    """Read a JSON list of ``{id, label, description?, aliases?}`` records."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    concepts = [
        Concept(
            id=str(item["id"]),
            label=item["label"],
            description=item.get("description"),
            aliases=tuple(item.get("aliases", ())),
        )
        for item in raw
    ]
    ids = [c.id for c in concepts]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate concept ids in universe: {dupes}")
    return concepts


def pair_key(a: str, b: str) -> str:
    lo, hi = sorted((a, b))
    return f"{lo}|{hi}"


class ProbabilityCache:
    """Memoized co-occurrence probabilities keyed by unordered pair.

    Safe under concurrent insert; persisted as ``{"idA|idB": p}`` JSON with
    sorted keys so the file is reproducible.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._values: dict[str, float] = {}
        if self.path is not None and self.path.exists():
            self._values = {k: float(v) for k, v in json.loads(self.path.read_text()).items()}

    def get(self, a: str, b: str) -> float | None:
        with self._lock:
            return self._values.get(pair_key(a, b))

    def put(self, a: str, b: str, p: float) -> float:
        key = pair_key(a, b)
        with self._lock:
            # first writer wins so concurrent duplicates stay consistent
            return self._values.setdefault(key, p)

    def __len__(self):
        return len(self._values)

    def save(self, path: str | os.PathLike | None = None) -> None:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("no cache path configured")
        with self._lock:
            data = dict(sorted(self._values.items()))
        target.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def pair_distance(a: Concept, b: Concept, oracle, cache: ProbabilityCache | None = None) -> float:
    """Distance ``1 - p`` where ``p`` is the oracle's co-occurrence probability."""
    if a.id == b.id:
        raise ValueError(f"distance needs two distinct concepts, got {a.id!r} twice")
    p = cache.get(a.id, b.id) if cache is not None else None
    if p is None:
        lo, hi = sorted((a, b), key=lambda c: c.id)
        try:
            p = oracle.prob(lo.label, hi.label)
        except Exception as exc:
            raise OracleProtocolError((lo.id, hi.id), exc) from exc
        if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0 or math.isnan(p):
            raise OracleProtocolError((lo.id, hi.id), f"probability {p!r} outside [0, 1]")
        p = float(p)
        if cache is not None:
            p = cache.put(a.id, b.id, p)
    return 1.0 - p


class DistanceMatrix:
    """Symmetric pairwise distances over an ordered universe of concept ids."""

    def __init__(self, universe: Sequence[str]):
        ids = list(universe)
        if len(set(ids)) != len(ids):
            raise ValueError("universe ids must be unique")
        self.universe = sorted(ids)
        self._index = {cid: i for i, cid in enumerate(self.universe)}
        self.entries: dict[tuple[str, str], float] = {}

    def set(self, a: str, b: str, distance: float) -> None:
        if a == b:
            raise ValueError("no self distances")
        if not 0.0 <= distance <= 1.0:
            raise ValueError(f"distance {distance} outside [0, 1]")
        for cid in (a, b):
            if cid not in self._index:
                raise KeyError(cid)
        self.entries[tuple(sorted((a, b)))] = float(distance)

    def get(self, a: str, b: str) -> float:
        try:
            return self.entries[tuple(sorted((a, b)))]
        except KeyError:
            raise IncompleteMatrixError(f"no distance for pair {a!r}|{b!r}") from None

    def missing_pairs(self) -> list[tuple[str, str]]:
        return [p for p in itertools.combinations(self.universe, 2) if p not in self.entries]

    def is_complete(self) -> bool:
        return not self.missing_pairs()

    def as_array(self) -> np.ndarray:
        """Dense matrix in universe order; raises when any pair is missing."""
        missing = self.missing_pairs()
        if missing:
            raise IncompleteMatrixError(f"{len(missing)} pairs missing, first {missing[0]}")
        n = len(self.universe)
        arr = np.zeros((n, n), dtype=np.float64)
        for (a, b), d in self.entries.items():
            i, j = self._index[a], self._index[b]
            arr[i, j] = arr[j, i] = d
        return arr

    @classmethod
    def from_probabilities(cls, universe: Sequence[str], probs: dict[str, float]) -> "DistanceMatrix":
        matrix = cls(universe)
        for a, b in itertools.combinations(matrix.universe, 2):
            key = pair_key(a, b)
            if key in probs:
                matrix.set(a, b, 1.0 - probs[key])
        return matrix


def build_distance_matrix(
    concepts: Sequence[Concept],
    oracle,
    cache: ProbabilityCache | None = None,
    workers: int = 1,
) -> DistanceMatrix:
    """Query the oracle for every unordered pair, concurrently if asked."""
    by_id = {c.id: c for c in concepts}
    matrix = DistanceMatrix(list(by_id))
    pairs = list(itertools.combinations(matrix.universe, 2))

    def one(pair):
        a, b = pair
        return pair, pair_distance(by_id[a], by_id[b], oracle, cache)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    for (a, b), d in results:
        matrix.set(a, b, d)
    return matrix


@dataclass(frozen=True)
class Collection:
    concepts: tuple[str, ...]
    total_distance: float

    @property
    def m(self) -> int:
        return len(self.concepts)


def total_distance(concepts: Iterable[str], matrix: DistanceMatrix) -> float:
    ids = sorted(concepts)
    pairs = list(itertools.combinations(ids, 2))
    assert len(pairs) == math.comb(len(ids), 2)
    total = 0.0
    for a, b in pairs:
        total = total + matrix.get(a, b)
    return total


def make_collection(concepts: Iterable[str], matrix: DistanceMatrix) -> Collection:
    ids = tuple(sorted(concepts))
    if len(set(ids)) != len(ids):
        raise ValueError(f"collection repeats a concept: {ids}")
    if len(ids) < 2:
        raise ValueError("a collection needs at least two concepts")
    return Collection(ids, total_distance(ids, matrix))


def _ids(universe) -> list[str]:
    return sorted(c.id if isinstance(c, Concept) else str(c) for c in universe)


def enumerate_collections(universe, m: int, matrix: DistanceMatrix) -> Iterator[Collection]:
    """All ``C(n, m)`` collections, lexicographic by sorted id tuple."""
    ids = _ids(universe)
    if not 2 <= m <= len(ids):
        raise ValueError(f"m must lie in [2, {len(ids)}], got {m}")
    for combo in itertools.combinations(ids, m):
        yield Collection(combo, total_distance(combo, matrix))


def _rank_key(c: Collection):
    return (-c.total_distance, c.concepts)


def rank_and_pick(collections: Iterable[Collection], r: int) -> list[Collection]:
    """Top ``r`` by total distance, ties to the lexicographically smaller id tuple."""
    pool = list(collections)
    if r < 0:
        raise ValueError("r must be nonnegative")
    if r > len(pool):
        raise ValueError(f"requested {r} collections but only {len(pool)} exist")
    return sorted(pool, key=_rank_key)[:r]


def top_collections(matrix: DistanceMatrix, m: int, r: int) -> list[Collection]:
    """Same result as ``rank_and_pick(enumerate_collections(...), r)`` via the kernel."""
    n = len(matrix.universe)
    if not 2 <= m <= n:
        raise ValueError(f"m must lie in [2, {n}], got {m}")
    available = math.comb(n, m)
    if r > available:
        raise ValueError(f"requested {r} collections but only {available} exist")
    indices, totals = _accel.top_collections(matrix.as_array(), m, r)
    ids = matrix.universe
    return [
        Collection(tuple(ids[i] for i in row), float(t))
        for row, t in zip(indices.tolist(), totals.tolist())
    ]


def mentions(prompt: str, concept: Concept) -> bool:
    return any(contains_word(prompt, form) for form in (concept.label, *concept.aliases))


def generate_prompt(concepts: Sequence[Concept], lm, retries: int = 1) -> str:
    """Ask the language model for one natural sentence naming every concept."""
    labels = [c.label for c in concepts]
    if not labels:
        raise ValueError("no concepts to describe")
    request = render("prompt_synthesis", concepts=", ".join(labels))
    raw = ""
    for attempt in range(retries + 1):
        raw = lm.complete(request)
        sentence = " ".join(raw.strip().splitlines()).strip().strip('"')
        missing = [c.label for c in concepts if not mentions(sentence, c)]
        if not missing:
            return sentence
        log.info("prompt attempt %d misses %s", attempt + 1, missing)
        request = render(
            "prompt_synthesis", concepts=", ".join(labels)
        ) + f"\nYour previous answer omitted: {', '.join(missing)}. Mention every concept."
    raise PromptSynthesisError(labels, raw, missing)


@dataclass(frozen=True)
class DatasetEntry:
    id: str
    collection: Collection
    prompt: str

    @property
    def n(self) -> int:
        return self.collection.m

    @property
    def concepts(self) -> tuple[str, ...]:
        return self.collection.concepts

    def to_json(self) -> dict:
        return {"id": self.id, "concepts": list(self.concepts), "prompt": self.prompt, "n": self.n}


@dataclass
class DatasetSpec:
    targets: list[tuple[int, int]] = field(default_factory=list)
    mixed: list[int] | None = None


def dumps_entry(entry: DatasetEntry) -> str:
    return json.dumps(entry.to_json(), ensure_ascii=False, sort_keys=False)


def load_dataset(path: str | os.PathLike) -> list[dict]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            item = json.loads(line)
            for key in ("id", "concepts", "prompt", "n"):
                if key not in item:
                    raise ValueError(f"{path}:{lineno}: dataset entry lacks {key!r}")
            if item["n"] != len(item["concepts"]):
                raise ValueError(f"{path}:{lineno}: n disagrees with concept count")
            entries.append(item)
    return entries


def build_dataset(
    concepts: Sequence[Concept],
    matrix: DistanceMatrix,
    spec: DatasetSpec,
    lm,
    out_dir: str | os.PathLike | None = None,
    workers: int = 1,
) -> dict[str, list[DatasetEntry]]:
    """Rank collections for each ``(m, r)`` target and synthesize their prompts.

    The mixed dataset reuses the top entries of each target in order, so its
    prompts are byte-identical to the per-size files.
    """
    by_id = {c.id: c for c in concepts}
    datasets: dict[str, list[DatasetEntry]] = {}
    for m, r in spec.targets:
        try:
            picked = top_collections(matrix, m, r)
        except ValueError as exc:
            raise BuildError(f"dataset-{m}: {exc}") from exc

        def synth(item):
            rank, coll = item
            prompt = generate_prompt([by_id[i] for i in coll.concepts], lm)
            return DatasetEntry(f"d{m}-{rank:04d}", coll, prompt)

        items = list(enumerate(picked))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                entries = list(pool.map(synth, items))
        else:
            entries = [synth(i) for i in items]
        datasets[f"dataset-{m}"] = entries

    if spec.mixed:
        if len(spec.mixed) != len(spec.targets):
            raise BuildError("mixed counts must pair one-to-one with the targets")
        mixed: list[DatasetEntry] = []
        for (m, r), take in zip(spec.targets, spec.mixed):
            if take > r:
                raise BuildError(f"mixed wants {take} of dataset-{m} which has {r}")
            mixed.extend(datasets[f"dataset-{m}"][:take])
        datasets["dataset-mixed"] = mixed

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, entries in datasets.items():
            with open(out / f"{name}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                for entry in entries:
                    fh.write(dumps_entry(entry) + "\n")
    return datasets
