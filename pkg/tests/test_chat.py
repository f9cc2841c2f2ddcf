from __future__ import annotations

import random

import pytest

from hkfr.backends import HttpBackend, make_backend
from hkfr.chat import (
    API_KEY_ENV,
    BackendRejected,
    BackendUnavailable,
    ChatMessage,
    ChatRequest,
    ProtocolError,
    backoff_delay,
    chat,
)
from helpers import StubChatServer

REQ = ChatRequest("m1", (ChatMessage("system", "s"), ChatMessage("user", "hi")), 0.0)


def no_sleep(_):
    pass


def test_success_and_body_fields(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "secret")
    with StubChatServer([200]) as stub:
        resp = chat(stub.url, REQ, sleep=no_sleep)
    assert resp.content == "ok"
    req = stub.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert set(req["body"]) == {"model", "messages", "temperature"}
    assert req["body"]["messages"] == [{"role": "system", "content": "s"}, {"role": "user", "content": "hi"}]
    assert req["headers"]["Authorization"] == "Bearer secret"


def test_retry_then_success():
    delays = []
    with StubChatServer([500, 500, 200]) as stub:
        resp = chat(stub.url, REQ, sleep=delays.append, rng=random.Random(0))
    assert resp.content == "ok"
    assert len(stub.requests) == 3
    assert len(delays) == 2
    assert 0 <= delays[0] <= 0.5 and 0 <= delays[1] <= 1.0


def test_401_not_retried():
    with StubChatServer([401]) as stub:
        with pytest.raises(BackendRejected) as exc:
            chat(stub.url, REQ, sleep=no_sleep)
    assert exc.value.status == 401
    assert len(stub.requests) == 1


def test_exhausted_retries():
    with StubChatServer([503] * 10) as stub:
        with pytest.raises(BackendUnavailable):
            chat(stub.url, REQ, sleep=no_sleep)
    assert len(stub.requests) == 4


def test_connection_refused_is_unavailable():
    with StubChatServer([]) as stub:
        url = stub.url
    with pytest.raises(BackendUnavailable):
        chat(url, REQ, sleep=no_sleep, max_retries=1, timeout=2)


def test_malformed_response():
    import http.server
    import threading

    class Bad(http.server.BaseHTTPRequestHandler):
        def do_POST(self):
            self.rfile.read(int(self.headers["Content-Length"]))
            self.send_response(200)
            self.send_header("Content-Length", "7")
            self.end_headers()
            self.wfile.write(b"{oops}!")

        def log_message(self, *args):
            pass

    srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Bad)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        with pytest.raises(ProtocolError):
            chat(f"http://127.0.0.1:{srv.server_address[1]}", REQ, sleep=no_sleep)
    finally:
        srv.shutdown()
        srv.server_close()


def test_backoff_bounds():
    rng = random.Random(1)
    for attempt in range(4):
        for _ in range(50):
            assert 0 <= backoff_delay(attempt, rng) <= 0.5 * 2**attempt


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", ())
    with pytest.raises(ValueError):
        ChatRequest("m", (ChatMessage("user", "x"),), temperature=3)


def test_http_backend_uses_model_name():
    with StubChatServer([200], content="1. Sichuan") as stub:
        backend = HttpBackend(stub.url, "tuned-7b", api_key="")
        assert backend.complete([ChatMessage("user", "x")]) == "1. Sichuan"
    assert stub.requests[0]["body"]["model"] == "tuned-7b"
    with pytest.raises(ValueError):
        make_backend("http", "m", None)
