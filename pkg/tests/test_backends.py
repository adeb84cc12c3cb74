import json

import httpx
import pytest

from rit.backends import (
    HttpBackend,
    Ports,
    RecordingBackend,
    ReplayBackend,
    SimConfig,
    SimWorld,
    StubServer,
    Transcript,
)
from rit.errors import ProtocolError, TokenExpiredError, TransportError

VOCAB = ("man", "horse", "grassland", "moon", "cat astronaut")


def world(**kw):
    kw.setdefault("vocabulary", VOCAB)
    return SimWorld(SimConfig(**kw))


def test_generate_places_prompt_entities():
    w = world()
    ref, token = Ports(w).generate("a man riding a horse on grassland")
    assert [k for k, _ in w.image(ref).entities] == ["grassland", "horse", "man"]
    assert all(0.6 <= f <= 1.0 for _, f in w.image(ref).entities)
    assert token.startswith("sim-state:")


@pytest.mark.parametrize("p,partial,expected", [
    (1.0, (0.5, 0.5), {"man", "horse", "moon"}),
    (0.0, (1.0, 0.0), {"man", "horse", "grassland", "moon"}),
    (0.0, (0.0, 1.0), {"man", "horse"}),
])
def test_replace_outcomes(p, partial, expected):
    w = world(p_success=p, partial_outcome_probs=partial)
    ports = Ports(w)
    _, token = ports.generate("a man riding a horse on grassland")
    ref, _ = ports.replace(token, ["s3"], ["grassland"], ["the moon"], "a man riding a horse on the moon")
    assert {k for k, _ in w.image(ref).entities} == expected


def test_truthful_vqa_and_count():
    ports = Ports(world())
    ref, _ = ports.generate("a man riding a horse on grassland")
    assert ports.ask(ref, "Is there a horse in the image?")
    assert not ports.ask(ref, "Is there a moon in the image?")
    assert ports.ask(ref, "Are there exactly 3 distinct entities in the image?")
    assert not ports.ask(ref, "Are there exactly 2 distinct entities in the image?")


def test_epsilon_one_flips_every_answer():
    ports = Ports(world(epsilon=1.0))
    ref, _ = ports.generate("a man riding a horse on grassland")
    assert not ports.ask(ref, "Is there a horse in the image?")
    assert ports.ask(ref, "Is there a moon in the image?")


def test_unknown_question_and_stale_token_are_protocol_errors():
    ports = Ports(world())
    ref, _ = ports.generate("a man")
    with pytest.raises(ProtocolError):
        ports.ask(ref, "How many legs does the horse have?")
    with pytest.raises(ProtocolError):
        ports.replace("sim-state:0:99", ["s1"], ["man"], ["cat"], "a cat")
    with pytest.raises(ProtocolError):
        ports.ask("sim-img:0:99", "Is there a man in the image?")


def test_probability_out_of_range_rejected():
    ports = Ports(world(prob_table={"cat|moon": 1.2}))
    with pytest.raises(ProtocolError):
        ports.prob("moon", "cat")
    assert 0.0 <= Ports(world()).prob("cat", "moon") < 1.0


def test_draws_keyed_by_lineage_not_call_order():
    a, b = world(p_success=0.5, run_seed=3), world(p_success=0.5, run_seed=3)
    pa, pb = Ports(a), Ports(b)
    _, ta = pa.generate("a man riding a horse on grassland")
    _, tb = pb.generate("a man riding a horse on grassland")
    pb.prob("cat", "moon")  # unrelated traffic in between
    ra, _ = pa.replace(ta, ["s3"], ["grassland"], ["the moon"], "")
    rb, _ = pb.replace(tb, ["s3"], ["grassland"], ["the moon"], "")
    assert a.image(ra) == b.image(rb)


def test_scores_follow_fidelity():
    w = world(score_jitter=0.0)
    ports = Ports(w)
    ref, _ = ports.generate("a man riding a horse on grassland")
    fid = w.image(ref).fidelity("horse")
    assert ports.score(ref, "horse", "C") == pytest.approx(0.35 * fid)
    assert ports.score(ref, "horse", "I") == pytest.approx(2 * fid - 1)
    assert ports.score(ref, "moon", "C") == 0.0


class Failing:
    def __init__(self, exc):
        self.exc = exc

    def call(self, endpoint, request):
        raise self.exc


@pytest.fixture
def served():
    servers = []

    def start(backend):
        s = StubServer(backend).start()
        servers.append(s)
        return HttpBackend(s.url)

    yield start
    for s in servers:
        s.stop()


def test_http_round_trip_matches_in_process(served):
    direct, remote = Ports(world()), Ports(served(world()))
    for ports in (direct, remote):
        ref, token = ports.generate("a man riding a horse on grassland")
        ref2, _ = ports.replace(token, ["s3"], ["grassland"], ["the moon"], "x")
        ports.result = (ref, ref2, ports.ask(ref2, "Is there a moon in the image?"),
                        ports.score(ref2, "moon", "C"), ports.prob("cat", "moon"),
                        ports.complete("[task: scene prompt]\nConcepts: cat, moon"))
    assert direct.result == remote.result


@pytest.mark.parametrize("exc,expected", [
    (TokenExpiredError("token gone"), TokenExpiredError),
    (TransportError("overloaded"), TransportError),
    (ProtocolError("bad field"), ProtocolError),
])
def test_http_error_mapping(served, exc, expected):
    with pytest.raises(expected):
        served(Failing(exc)).call("vqa", {"image_ref": "x", "question": "q"})


def test_http_unknown_endpoint_and_unreachable(served):
    backend = served(world())
    resp = httpx.post(backend.urls["vqa"] + "/nonsense", json={})
    assert resp.status_code == 404
    with pytest.raises(TransportError):
        HttpBackend("http://127.0.0.1:9", timeout=0.5).call("vqa", {})
    with pytest.raises(ProtocolError):
        HttpBackend(urls={"generate": "http://x"}).call("vqa", {})


def test_record_then_replay(tmp_path):
    path = tmp_path / "t.jsonl"
    transcript = Transcript(path)
    rec = Ports(RecordingBackend(world(p_success=0.5), transcript))
    ref, token = rec.generate("a man riding a horse on grassland")
    answers = [rec.ask(ref, "Is there a man in the image?") for _ in range(2)]
    with pytest.raises(ProtocolError):
        rec.replace("bogus", ["s1"], ["man"], ["cat"], "")
    transcript.close()
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert [x["endpoint"] for x in lines] == ["generate", "vqa", "vqa", "replace"]

    replay = ReplayBackend(path)
    rp = Ports(replay)
    assert rp.generate("a man riding a horse on grassland") == (ref, token)
    assert [rp.ask(ref, "Is there a man in the image?") for _ in range(2)] == answers
    with pytest.raises(ProtocolError, match="unknown state token"):
        rp.replace("bogus", ["s1"], ["man"], ["cat"], "")
    assert replay.remaining() == 0
    with pytest.raises(ProtocolError, match="no recorded"):
        rp.ask(ref, "Is there a man in the image?")
