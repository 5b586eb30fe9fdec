import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from fakes import StubServer
from trpgeval.gateway import (
    BackendKind,
    BackendSpec,
    CachedBackend,
    CallableBackend,
    ChatMessage,
    GatewayTimeout,
    MessageRole,
    RecordingBackend,
    RemoteBackend,
    Sampling,
    ScriptedBackend,
    ScriptMiss,
    TransportError,
    assistant,
    check_messages,
    complete,
    derive_seed,
    open_backend,
    record_script,
    request_digest,
    system,
    user,
)

MSGS = [system("You are a judge."), user("Count the overlaps.")]


def test_digest_is_stable_and_sensitive():
    d = request_digest("m", MSGS, Sampling())
    assert d == request_digest("m", list(MSGS), Sampling())
    assert len(d) == 64
    variants = {
        request_digest("m2", MSGS, Sampling()),
        request_digest("m", MSGS[:1] + [user("Count the overlaps!")], Sampling()),
        request_digest("m", [user("You are a judge."), MSGS[1]], Sampling()),
        request_digest("m", MSGS, Sampling(temperature=1.0)),
        request_digest("m", MSGS, Sampling(seed=1)),
    }
    assert d not in variants and len(variants) == 5


def test_digest_matches_independent_encoding():
    blob = json.dumps(
        {"model": "m", "messages": [{"role": "user", "content": "hi"}], "sampling": {"temperature": 0.0}},
        sort_keys=True, separators=(",", ":"),
    )
    assert request_digest("m", [user("hi")], Sampling()) == hashlib.sha256(blob.encode()).hexdigest()


def test_digest_collision_free_on_1e5_requests():
    digests = {request_digest("m", [user(f"request {i}")], Sampling()) for i in range(100_000)}
    assert len(digests) == 100_000


@pytest.mark.parametrize("messages", [[], [assistant("hi")], [user("")], [system("s"), user("")]])
def test_message_preconditions(messages):
    with pytest.raises(ValueError):
        check_messages(messages)


def test_assistant_placeholder_may_be_empty():
    check_messages([user("q"), assistant("")])
    assert ChatMessage.from_dict({"role": "assistant", "content": ""}).role is MessageRole.ASSISTANT


def test_scripted_playback_and_miss():
    d = request_digest(None, MSGS, Sampling())
    backend = ScriptedBackend.from_responses([(d, "first"), (d, "second")])
    assert backend.complete(MSGS) == "first"
    assert backend.complete(MSGS) == "second"
    with pytest.raises(ScriptMiss):
        backend.complete(MSGS)


def test_cached_backend_serves_repeats_from_cache(tmp_path):
    inner = CallableBackend(lambda m, s: "answer")
    cached = CachedBackend(inner, tmp_path / "cache.jsonl")
    assert cached.complete(MSGS) == cached.complete(MSGS) == "answer"
    assert inner.calls == 1
    reloaded_inner = CallableBackend(lambda m, s: "other")
    assert CachedBackend(reloaded_inner, tmp_path / "cache.jsonl").complete(MSGS) == "answer"
    assert reloaded_inner.calls == 0


def test_record_then_replay(tmp_path):
    script = tmp_path / "run.jsonl"
    counter = iter(range(100))
    rec = RecordingBackend(CallableBackend(lambda m, s: f"reply {next(counter)}"), script)
    asked = [[user(f"q{i}")] for i in range(3)]
    recorded = [rec.complete(m) for m in asked]
    replay = ScriptedBackend.from_file(script)
    assert [replay.complete(m) for m in asked] == recorded
    with pytest.raises(ScriptMiss):
        replay.complete([user("q3")])


def test_empty_script_with_no_calls(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert ScriptedBackend.from_file(path).remaining() == 0


def test_record_script_requires_live_backend(tmp_path):
    with pytest.raises(ValueError):
        record_script(BackendSpec(BackendKind.SCRIPTED, script_path=tmp_path / "x"), tmp_path / "out")


def test_spec_violations():
    assert BackendSpec(BackendKind.REMOTE, endpoint="http://x").violations()
    assert BackendSpec(BackendKind.SCRIPTED).violations()
    assert BackendSpec(BackendKind.SCRIPTED, script_path="x", max_parallel=0).violations()
    with pytest.raises(ValueError):
        open_backend(BackendSpec(BackendKind.REMOTE))


def test_remote_against_stub(stub_server):
    stub_server.responder = lambda m, s: "fixed body"
    spec = BackendSpec(BackendKind.REMOTE, endpoint=stub_server.url, model_name="stub-model")
    assert complete(spec, MSGS, Sampling(max_tokens=16, seed=7)) == "fixed body"
    body = stub_server.requests[0]
    assert body["model"] == "stub-model"
    assert body["messages"][0] == {"role": "system", "content": "You are a judge."}
    assert body["max_tokens"] == 16 and body["seed"] == 7 and body["temperature"] == 0.0


def test_remote_token_counts(stub_server):
    backend = RemoteBackend(stub_server.url, "m")
    stub_server.responder = lambda m, s: "ok"
    rec = backend.complete_record(MSGS)
    assert rec.response == "ok" and rec.token_counts == {"prompt_tokens": 1, "completion_tokens": 1}


def test_remote_retries_transient_failures():
    with StubServer(lambda m, s: "after retry", fail_first=2) as server:
        backend = RemoteBackend(server.url, "m", retry_limit=3, backoff=0.0)
        assert backend.complete(MSGS) == "after retry"
        assert len(server.requests) == 3


def test_remote_gives_up_after_retry_limit():
    with StubServer(lambda m, s: "never", fail_first=10) as server:
        backend = RemoteBackend(server.url, "m", retry_limit=2, backoff=0.0)
        with pytest.raises(TransportError):
            backend.complete(MSGS)
        assert len(server.requests) == 3


def test_remote_client_errors_are_not_retried():
    with StubServer(lambda m, s: "x", fail_first=5, status=400) as server:
        with pytest.raises(TransportError):
            RemoteBackend(server.url, "m", retry_limit=3, backoff=0.0).complete(MSGS)
        assert len(server.requests) == 1


def test_remote_timeout():
    def slow(m, s):
        time.sleep(0.5)
        return "late"

    with StubServer(slow) as server:
        with pytest.raises(GatewayTimeout):
            RemoteBackend(server.url, "m", timeout=0.05, retry_limit=0).complete(MSGS)


def test_bearer_token_from_environment(monkeypatch, stub_server):
    monkeypatch.setenv("ANTEVAL_API_KEY", "sk-test")
    stub_server.responder = lambda m, s: "ok"
    backend = RemoteBackend(stub_server.url, "m")
    assert backend._client.headers["Authorization"] == "Bearer sk-test"
    assert backend.complete(MSGS) == "ok"


def test_in_flight_calls_never_exceed_max_parallel():
    active = peak = 0
    lock = threading.Lock()

    def fn(messages, sampling):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        time.sleep(0.01)
        with lock:
            active -= 1
        return "ok"

    backend = CallableBackend(fn, max_parallel=3)
    with ThreadPoolExecutor(16) as pool:
        list(pool.map(lambda i: backend.complete([user(f"q{i}")]), range(48)))
    assert peak == 3


def test_derive_seed_is_stable():
    expected = int.from_bytes(hashlib.sha256("7\x1fsession\x1f0".encode()).digest()[:8], "big") & (2**63 - 1)
    assert derive_seed(7, "session", 0) == expected
    assert derive_seed(7, "session", 0) != derive_seed(7, "session", 1)
