"""Entity matching helpers used by plans, questions and the simulated world."""
from __future__ import annotations

import re
from typing import Iterable

_ARTICLES = ("a ", "an ", "the ")
_SPACE = re.compile(r"\s+")


def normalize_space(text: str) -> str:
    return _SPACE.sub(" ", text).strip()


def entity_key(label: str) -> str:
    """Lowercase, whitespace-collapsed label with one leading article removed."""
    key = normalize_space(label).lower()
    for article in _ARTICLES:
        if key.startswith(article) and len(key) > len(article):
            return key[len(article):]
    return key


def word_pattern(label: str) -> re.Pattern:
    words = [re.escape(w) for w in normalize_space(label).split(" ")]
    return re.compile(r"(?<!\w)" + r"\s+".join(words) + r"(?!\w)", re.IGNORECASE)


def find_word(text: str, label: str) -> re.Match | None:
    if not label.strip():
        return None
    return word_pattern(label).search(text)


def contains_word(text: str, label: str) -> bool:
    return find_word(text, label) is not None


def replace_first_word(text: str, old: str, new: str) -> str | None:
    """Replace the first whole-word occurrence of ``old``; ``None`` when absent."""
    match = find_word(text, old)
    if match is None:
        return None
    return text[: match.start()] + new + text[match.end():]


def entities_in(text: str, vocabulary: Iterable[str]) -> list[str]:
    """Entity keys from ``vocabulary`` mentioned in ``text``, in sentence order.

    A match lying inside a longer match is dropped, so "cat astronaut"
    hides "cat" and "astronaut".
    """
    spans = []
    for key in sorted({entity_key(v) for v in vocabulary if v.strip()}):
        for match in word_pattern(key).finditer(text):
            spans.append((match.start(), match.end(), key))
    kept: dict[str, int] = {}
    for start, end, key in spans:
        covered = any(
            s <= start and end <= e and (e - s) > (end - start)
            for s, e, _ in spans
        )
        if not covered and key not in kept:
            kept[key] = start
    return sorted(kept, key=lambda k: (kept[k], k))


def with_article(label: str) -> str:
    return ("an " if label[:1].lower() in "aeiou" else "a ") + label
