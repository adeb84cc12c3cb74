"""Request/response transcripts: recording wrapper and offline replay backend."""
from __future__ import annotations

import json
import os
import threading
from collections import defaultdict, deque

from rit.errors import ProtocolError, RitError, TokenExpiredError, TransportError

_ERRORS = {
    "ProtocolError": ProtocolError,
    "TransportError": TransportError,
    "TokenExpiredError": TokenExpiredError,
}


def _canon(request: dict) -> str:
    return json.dumps(request, sort_keys=True, ensure_ascii=False)


class Transcript:
    """Ordered log of port exchanges, optionally streamed to a JSONL file."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8", newline="\n") if path is not None else None

    def append(self, endpoint: str, request: dict, response: dict) -> dict:
        with self._lock:
            entry = {"endpoint": endpoint, "request": request, "response": response,
                     "index": len(self.entries)}
            self.entries.append(entry)
            if self._fh is not None:
                self._fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
                self._fh.flush()
            return entry

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @staticmethod
    def load(path: str | os.PathLike) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            entries = [json.loads(line) for line in fh if line.strip()]
        return sorted(entries, key=lambda e: e["index"])


class RecordingBackend:
    """Wraps a backend and logs every exchange, errors included."""

    def __init__(self, inner, transcript: Transcript | None = None):
        self.inner = inner
        self.transcript = transcript if transcript is not None else Transcript()

    def call(self, endpoint: str, request: dict) -> dict:
        try:
            response = self.inner.call(endpoint, request)
        except RitError as exc:
            self.transcript.append(endpoint, request,
                                   {"error": {"type": type(exc).__name__, "message": str(exc)}})
            raise
        self.transcript.append(endpoint, request, response)
        return response


class ReplayBackend:
    """Answers from a recorded transcript; any unrecorded request is a protocol error.

    Exchanges are matched by endpoint and request body; repeats of the same
    request are served in recorded order.
    """

    def __init__(self, entries):
        if isinstance(entries, (str, os.PathLike)):
            entries = Transcript.load(entries)
        self._queues: dict[tuple[str, str], deque] = defaultdict(deque)
        for e in entries:
            self._queues[(e["endpoint"], _canon(e["request"]))].append(e["response"])
        self._lock = threading.Lock()

    def call(self, endpoint: str, request: dict) -> dict:
        with self._lock:
            queue = self._queues.get((endpoint, _canon(request)))
            if not queue:
                raise ProtocolError(f"replay has no recorded /{endpoint} exchange for {request!r}")
            response = queue.popleft()
        if isinstance(response, dict) and set(response) == {"error"}:
            err = response["error"]
            raise _ERRORS.get(err.get("type"), ProtocolError)(err.get("message", ""))
        return response

    def remaining(self) -> int:
        return sum(len(q) for q in self._queues.values())
