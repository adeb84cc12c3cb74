"""HTTP+JSON client backend and a stub server exposing any backend over HTTP."""
from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx

from rit.backends.ports import ENDPOINTS
from rit.errors import ProtocolError, RitError, TokenExpiredError, TransportError

log = logging.getLogger(__name__)


class HttpBackend:
    """POSTs each port call to ``<url>/<endpoint>``.

    ``urls`` maps endpoint names to base URLs; ``base_url`` covers any
    endpoint not listed.
    """

    def __init__(self, base_url: str | None = None, urls: dict[str, str] | None = None,
                 timeout: float = 30.0, client: httpx.Client | None = None):
        self.urls = {name: (urls or {}).get(name, base_url) for name in ENDPOINTS}
        self._client = client or httpx.Client(timeout=timeout)

    def close(self):
        self._client.close()

    def call(self, endpoint: str, request: dict) -> dict:
        base = self.urls.get(endpoint)
        if not base:
            raise ProtocolError(f"no URL configured for /{endpoint}")
        url = base.rstrip("/") + "/" + endpoint
        try:
            resp = self._client.post(url, json=request)
        except httpx.TimeoutException as exc:
            raise TransportError(f"/{endpoint} timed out: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"/{endpoint} unreachable: {exc}") from exc
        if resp.status_code == 200:
            try:
                return resp.json()
            except ValueError:
                raise ProtocolError(f"/{endpoint} returned invalid JSON") from None
        detail = _error_text(resp)
        if resp.status_code == 410:
            raise TokenExpiredError(f"/{endpoint}: {detail}")
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"/{endpoint} HTTP {resp.status_code}: {detail}")
        raise ProtocolError(f"/{endpoint} HTTP {resp.status_code}: {detail}")


def _error_text(resp) -> str:
    try:
        return resp.json().get("error", resp.text)
    except ValueError:
        return resp.text


def _status_for(exc: Exception) -> int:
    if isinstance(exc, TokenExpiredError):
        return 410
    if isinstance(exc, TransportError):
        return 503
    if isinstance(exc, ProtocolError):
        msg = str(exc)
        return 404 if msg.startswith("unknown") else 400
    return 500


class _Handler(BaseHTTPRequestHandler):
    backend = None  # set per server class

    def log_message(self, fmt, *args):
        log.debug("stub server: " + fmt, *args)

    def _reply(self, status: int, body: dict):
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        endpoint = self.path.strip("/").rsplit("/", 1)[-1]
        if endpoint not in ENDPOINTS:
            return self._reply(404, {"error": f"unknown endpoint /{endpoint}"})
        try:
            length = int(self.headers.get("Content-Length", 0))
            request = json.loads(self.rfile.read(length) or b"{}")
        except ValueError:
            return self._reply(400, {"error": "body is not JSON"})
        try:
            response = self.server.backend.call(endpoint, request)
        except RitError as exc:
            return self._reply(_status_for(exc), {"error": str(exc)})
        except Exception as exc:  # report, never kill the server thread
            return self._reply(500, {"error": f"{type(exc).__name__}: {exc}"})
        self._reply(200, response)


class StubServer:
    """Threaded HTTP server wrapping a backend; usable as a context manager."""

    def __init__(self, backend, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.backend = backend
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
