"""Port contracts and backends: simulated world, HTTP client, transcripts."""
from rit.backends.http import HttpBackend, StubServer
from rit.backends.ports import ENDPOINTS, Backend, Ports
from rit.backends.sim import SimConfig, SimImage, SimWorld
from rit.backends.transcript import RecordingBackend, ReplayBackend, Transcript

__all__ = [
    "ENDPOINTS", "Backend", "Ports", "HttpBackend", "StubServer", "SimConfig", "SimImage",
    "SimWorld", "RecordingBackend", "ReplayBackend", "Transcript",
]
