"""Benchmark aggregation and the method x metric report tables."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from rit.metrics import SQRT_N, disparity, mean_of, scaled, variance_n

KINDS = ("C", "I")


@dataclass
class ImageResult:
    """Scores and coverage of one generated image."""

    image: str
    n: int
    scores: dict[str, list[float]] = field(default_factory=dict)
    t: float | None = None
    forced: bool = False
    aborted: bool = False


@dataclass
class MetricReport:
    dataset: str
    method: str
    columns: list[str]
    raw: dict[str, float | None]
    scale: bool = True
    diagnostics: dict[str, float] = field(default_factory=dict)
    images: list[ImageResult] = field(default_factory=list)

    def reported(self, column: str) -> float | None:
        value = self.raw.get(column)
        if value is None:
            return None
        return scaled(value, self.scale) if not column.startswith("T") else value

    def cells(self) -> dict[str, str]:
        return {c: _fmt(self.reported(c)) for c in self.columns}


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def dataset_kind(ns: Iterable[int]) -> str:
    values = sorted(set(ns))
    if len(values) == 1:
        return str(values[0])
    return "mixed"


def columns_for(kind: str) -> list[str]:
    if kind == "2":
        return ["D(C)", "D(I)", "T_2"]
    label = "mix" if kind == "mixed" else kind
    return [f"V_{label}(C)", f"V_{label}(I)", f"T_{label}"]


def compute_report(
    images: Sequence[ImageResult],
    dataset: str = "",
    method: str = "RIT",
    scale: bool = True,
    kind: str | None = None,
    normalization: str = SQRT_N,
    skipped: int = 0,
) -> MetricReport:
    """Aggregate per-image results into the dataset's metric columns.

    2-concept sets report mean disparity, larger fixed sets mean variance,
    mixed sets the unweighted mean of per-size mean variances. Coverage is
    the plain mean of every image's t. Aborted runs are excluded.
    """
    usable = [im for im in images if not im.aborted]
    kind = kind or (dataset_kind(im.n for im in usable) if usable else "2")
    cols = columns_for(kind)
    raw: dict[str, float | None] = {c: None for c in cols}

    for idx, sk in enumerate(KINDS):
        col = cols[idx]
        scored = [im for im in usable if sk in im.scores]
        if not scored:
            continue
        if kind == "2":
            raw[col] = mean_of(disparity(*im.scores[sk]) for im in scored)
        elif kind == "mixed":
            by_n: dict[int, list[float]] = defaultdict(list)
            for im in scored:
                by_n[im.n].append(variance_n(im.scores[sk], normalization))
            raw[col] = mean_of(mean_of(v) for _, v in sorted(by_n.items()))
        else:
            raw[col] = mean_of(variance_n(im.scores[sk], normalization) for im in scored)
    ts = [im.t for im in usable if im.t is not None]
    if ts:
        raw[cols[2]] = sum(ts) / len(ts)

    total = len(images)
    diagnostics = {
        "runs": float(total),
        "forced_commit_rate": (sum(im.forced for im in images) / total) if total else 0.0,
        "abort_rate": (sum(im.aborted for im in images) / total) if total else 0.0,
        "skipped": float(skipped),
    }
    return MetricReport(dataset, method, cols, raw, scale, diagnostics, list(images))


def images_from_records(records: Iterable[dict]) -> list[ImageResult]:
    out = []
    for rec in records:
        scores = {k: [e["s"] for e in v] for k, v in (rec.get("scores") or {}).items()}
        cov = rec.get("coverage")
        t = cov["k"] / cov["n"] if cov and cov.get("n") else None
        out.append(ImageResult(rec.get("final_image") or rec["run"], rec["n"], scores, t,
                               bool(rec.get("forced_commits")), bool(rec.get("aborted"))))
    return out


def images_from_dumps(score_lines: Iterable[dict], coverage_lines: Iterable[dict] = ()) -> list[ImageResult]:
    """Rebuild per-image results from a score dump and optional coverage dump."""
    order: list[str] = []
    scores: dict[str, dict[str, list[float]]] = {}
    concepts: dict[str, set] = defaultdict(set)
    for line in score_lines:
        image = line["image"]
        if image not in scores:
            scores[image] = defaultdict(list)
            order.append(image)
        scores[image][line.get("kind", "C")].append(float(line["s"]))
        concepts[image].add(line["concept"])
    cov = {c["image"]: c for c in coverage_lines}
    for image in cov:
        if image not in scores:
            scores[image] = {}
            order.append(image)
    out = []
    for image in order:
        c = cov.get(image)
        n = c["n"] if c else len(concepts[image])
        t = c["k"] / c["n"] if c else None
        out.append(ImageResult(image, n, dict(scores[image]), t))
    return out


DIAG_COLUMNS = ("forced_commit_rate", "abort_rate")


def format_report(reports: Sequence[MetricReport]) -> tuple[str, str]:
    """Pretty text and CSV for one or more reports sharing a dataset kind.

    With no reports the tables still carry the header (2-concept columns).
    """
    cols = reports[0].columns if reports else columns_for("2")
    header = ["method", *cols, *DIAG_COLUMNS]
    rows = [[r.method, *(r.cells()[c] for c in cols),
             *(f"{r.diagnostics.get(d, 0.0):.2f}" for d in DIAG_COLUMNS)]
            for r in reports]
    widths = [max([len(h)] + [len(row[i]) for row in rows]) for i, h in enumerate(header)]
    title = reports[0].dataset if reports else ""
    lines = [title or "dataset",
             " | ".join(h.ljust(w) for h, w in zip(header, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    scale_note = "D/V columns x10" if not reports or reports[0].scale else "raw values"
    lines.append(f"({scale_note}; forced/abort rates are diagnostics)")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return "\n".join(lines) + "\n", buf.getvalue()


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
