import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmfilter.llm_correct import (
    API_KEY_ENV,
    DEFAULT_BATCH_SIZE,
    BatchDropped,
    CorrectionBatch,
    EndpointConfigError,
    HttpChatClient,
    MockEndpoint,
    ParseError,
    RetryPolicy,
    TransportError,
    correct_batch,
    correct_batches,
    echo_response,
    extract_payload,
    load_template,
    make_batches,
    mock_endpoint,
    parse_response,
    render_payload,
    render_prompt,
    sanitize,
)
from llmfilter.manifest import Lang

from .conftest import FIXTURES

EN = load_template(Lang.EN)


def batch(*texts):
    return CorrectionBatch.from_texts([f"u{i}" for i in range(len(texts))], texts, [1.0] * len(texts))


def test_en_template_matches_fixture_bytes():
    fixture = (FIXTURES / "reference_prompt_en.txt").read_bytes()
    assert render_prompt(EN).encode("utf-8") == fixture


def test_zh_template_loads():
    zh = load_template("ZH")
    assert zh.language is Lang.ZH
    assert "#" in zh.text and "<" in zh.text
    with pytest.raises(ValueError):
        load_template(Lang.CS)


def test_render_payload_examples():
    assert render_payload(batch("Nice to meat you", "hello word")) == "#Nice to meat you#hello word#"
    assert render_payload(batch("")) == "##"
    prompt = render_prompt(EN, batch("a", "b"))
    assert prompt == EN.text + "\n#a#b#"


def test_reserved_characters_are_rejected_by_id():
    raw = CorrectionBatch(("ok", "bad7"), ("fine", "has # inside"))
    with pytest.raises(ValueError, match="bad7"):
        render_payload(raw)


def test_from_texts_sanitizes():
    assert sanitize("a#b<c>d\ne\rf") == "a b c d e f"
    assert render_payload(batch("x#y")) == "#x y#"


def test_batch_construction_errors():
    with pytest.raises(ValueError):
        CorrectionBatch((), ())
    with pytest.raises(ValueError):
        CorrectionBatch(("a",), ("x", "y"))
    with pytest.raises(ValueError):
        make_batches(["a"], ["x"], [1.0], batch_size=0)
    with pytest.raises(ValueError):
        RetryPolicy(0)


def test_make_batches_sizes():
    ids = [f"u{i}" for i in range(95)]
    batches = make_batches(ids, ["t"] * 95, [1.0] * 95)
    assert [len(b) for b in batches] == [40, 40, 15]
    assert [u for b in batches for u in b.utt_ids] == ids
    assert make_batches([], [], []) == []


def test_parse_response_examples():
    assert parse_response("<Nice to meet you>#<hello world>", 2) == ["Nice to meet you", "hello world"]
    assert parse_response("Sure! <a> and then <>.", 2) == ["a", ""]
    with pytest.raises(ParseError) as err:
        parse_response("<a>#<b>", 3)
    assert (err.value.found, err.value.expected) == (2, 3)
    with pytest.raises(ParseError, match="unterminated"):
        parse_response("<a>#<b", 2)
    with pytest.raises(ParseError, match="nested"):
        parse_response("<a<b>>", 1)


def test_echo_mock_returns_input():
    b = batch("Nice to meat you", "hello word")
    assert correct_batch(mock_endpoint("echo"), EN, b) == ["Nice to meat you", "hello word"]


def test_scripted_mock():
    ep = mock_endpoint("scripted", responses=["<x>#<y>"])
    assert correct_batch(ep, EN, batch("a", "b")) == ["x", "y"]
    assert ep.calls == 1


def test_failing_mock_recovers_within_budget():
    ep = mock_endpoint("failing", k=2)
    assert correct_batch(ep, EN, batch("a", "b")) == ["a", "b"]
    assert ep.calls == 3


def test_failing_mock_beyond_budget_drops_batch():
    ep = mock_endpoint("failing", k=3)
    out = correct_batch(ep, EN, batch("a", "b"))
    assert isinstance(out, BatchDropped)
    assert out.utt_ids == ("u0", "u1") and out.duration_s == 2.0
    assert out.attempts == 3 and ep.calls == 3
    assert "TransportError" in out.last_error


def test_malformed_replies_drop_after_max_attempts():
    ep = mock_endpoint("malformed")
    out = correct_batch(ep, EN, batch("a"), RetryPolicy(max_attempts=5))
    assert isinstance(out, BatchDropped) and ep.calls == 5
    assert "ParseError" in out.last_error


def test_retries_resend_identical_prompt():
    seen = []

    def responder(prompt):
        seen.append(prompt)
        return "nothing" if len(seen) < 3 else "<ok>"

    assert correct_batch(MockEndpoint(responder), EN, batch("a")) == ["ok"]
    assert len(seen) == 3 and len(set(seen)) == 1


def test_config_error_is_not_retried():
    def responder(prompt):
        raise EndpointConfigError("bad key")

    ep = MockEndpoint(responder)
    with pytest.raises(EndpointConfigError):
        correct_batch(ep, EN, batch("a"))
    assert ep.calls == 1


def test_unknown_mock_behavior():
    with pytest.raises(ValueError):
        mock_endpoint("psychic")


hyp_text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="#<>\r\n"), max_size=15
)


@given(st.lists(hyp_text, min_size=1, max_size=DEFAULT_BATCH_SIZE))
def test_payload_round_trip(texts):
    b = CorrectionBatch(tuple(f"u{i}" for i in range(len(texts))), tuple(texts))
    prompt = render_prompt(EN, b)
    assert extract_payload(prompt) == texts
    assert parse_response(echo_response(prompt), len(texts)) == texts


def test_parallel_results_keep_input_order():
    def slow_echo(prompt):
        # later batches answer first
        first = extract_payload(prompt)[0]
        time.sleep(0.002 * (20 - int(first[1:])))
        return echo_response(prompt)

    ids = [f"u{i}" for i in range(20)]
    batches = make_batches(ids, ids, [1.0] * 20, batch_size=1)
    out = correct_batches(MockEndpoint(slow_echo), EN, batches, parallelism=8)
    assert out == [[u] for u in ids]


class _Handler(BaseHTTPRequestHandler):
    status = 200
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((dict(self.headers), body))
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if self.status == 200:
            reply = {"choices": [{"message": {"role": "assistant", "content": "<fixed>"}}]}
            self.wfile.write(json.dumps(reply).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    _Handler.seen = []
    _Handler.status = 200
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, _Handler
    server.shutdown()
    server.server_close()


def test_http_client_wire_format(http_server, monkeypatch):
    server, handler = http_server
    monkeypatch.setenv(API_KEY_ENV, "sk-test-123")
    client = HttpChatClient(f"http://127.0.0.1:{server.server_port}/v1/chat/completions", "gpt-test", 5)
    assert "sk-test" not in repr(client)
    prompt = render_prompt(EN, batch("hello word"))
    assert correct_batch(client, EN, batch("hello word")) == ["fixed"]
    headers, body = handler.seen[0]
    assert headers["Authorization"] == "Bearer sk-test-123"
    assert body == {"model": "gpt-test", "messages": [{"role": "user", "content": prompt}], "temperature": 0.0}


@pytest.mark.parametrize("status, exc", [(401, EndpointConfigError), (404, EndpointConfigError), (500, TransportError)])
def test_http_client_status_mapping(http_server, status, exc, monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    server, handler = http_server
    handler.status = status
    client = HttpChatClient(f"http://127.0.0.1:{server.server_port}/", "m", 5)
    with pytest.raises(exc):
        client.complete("hi")
    assert "Authorization" not in handler.seen[0][0]


def test_http_client_unreachable():
    client = HttpChatClient("http://127.0.0.1:9/", "m", 2)
    with pytest.raises(EndpointConfigError, match="cannot reach"):
        client.complete("hi")


def test_http_client_requires_url_and_model():
    with pytest.raises(EndpointConfigError):
        HttpChatClient("", "m")
    with pytest.raises(EndpointConfigError):
        HttpChatClient("http://x", "")
