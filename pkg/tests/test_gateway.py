from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from tmf.errors import ValidationError
from tmf.gateway import (
    CompletionRequest,
    Gateway,
    OpenAICompatProvider,
    RateLimited,
    RetryPolicy,
    ScriptRule,
    ScriptedProvider,
    UnmatchedPrompt,
)


def test_scripted_rule_fires_once():
    provider = ScriptedProvider([ScriptRule("possible cyberattacks", "canned text")])
    gateway = Gateway(provider)
    response = gateway.complete("What are the possible cyberattacks here?")
    assert response.text == "canned text"
    assert len(provider.call_log) == 1


def test_scripted_first_matching_rule_wins():
    provider = ScriptedProvider(
        [ScriptRule("alpha", "first"), ScriptRule("beta", "second")]
    )
    gateway = Gateway(provider)
    assert gateway.complete("only beta appears").text == "second"


def test_scripted_unmatched_prompt():
    provider = ScriptedProvider([ScriptRule("alpha", "first")])
    gateway = Gateway(provider)
    with pytest.raises(UnmatchedPrompt):
        gateway.complete("nothing matches this")
    # Errors land in the transcript too.
    assert gateway.transcript[-1][1].startswith("ERROR:")


def test_scripted_rules_file_round_trip(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps([{"match": "ping", "response": "pong"}]))
    provider = ScriptedProvider.from_file(path)
    assert provider.complete(CompletionRequest(user_text="ping me")).text == "pong"


def test_transcript_one_entry_per_call():
    provider = ScriptedProvider([ScriptRule("a", "1"), ScriptRule("b", "2")])
    gateway = Gateway(provider)
    gateway.complete("a")
    gateway.complete("b")
    gateway.complete("a and b")
    assert len(gateway.transcript) == 3
    assert gateway.transcript[2] == ("a and b", "1")


def test_request_validation():
    with pytest.raises(ValidationError):
        CompletionRequest(user_text="   ")
    with pytest.raises(ValidationError):
        CompletionRequest(user_text="x", temperature=-0.1)


class _FlakyHandler(BaseHTTPRequestHandler):
    """Replies 429 a configurable number of times, then succeeds."""

    failures_left = 2

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        if type(self).failures_left > 0:
            type(self).failures_left -= 1
            self.send_response(429)
            self.end_headers()
            return
        body = json.dumps(
            {"choices": [{"message": {"content": "recovered"}}]}
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def flaky_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _FlakyHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def test_retry_on_rate_limit_then_success(flaky_server):
    _FlakyHandler.failures_left = 2
    provider = OpenAICompatProvider(flaky_server, api_key="k")
    gateway = Gateway(
        provider, retry=RetryPolicy(attempts=3, backoff_seconds=(0.01, 0.02, 0.04))
    )
    response = gateway.complete("hello")
    assert response.text == "recovered"
    assert len(gateway.retry_events) == 2
    assert len(gateway.transcript) == 1


def test_retry_budget_exhausted(flaky_server):
    _FlakyHandler.failures_left = 99
    provider = OpenAICompatProvider(flaky_server, api_key="k")
    gateway = Gateway(
        provider, retry=RetryPolicy(attempts=3, backoff_seconds=(0.01, 0.01, 0.01))
    )
    with pytest.raises(RateLimited):
        gateway.complete("hello")
    assert len(gateway.retry_events) == 2  # two sleeps between three attempts
    assert gateway.transcript[-1][1].startswith("ERROR:")


def test_system_text_reaches_provider():
    captured = {}

    class Recorder:
        tag = "recorder"

        def complete(self, request):
            captured["system"] = request.system_text
            from tmf.gateway import CompletionResponse

            return CompletionResponse(text="ok", provider_tag=self.tag, latency_ms=0)

    gateway = Gateway(Recorder(), system_text="You are an expert-level cybersecurity analyst.")
    gateway.complete("hi")
    assert captured["system"].startswith("You are an expert-level")
