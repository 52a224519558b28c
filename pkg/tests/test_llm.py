import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from uncap.llm import API_KEY_ENV, BASE_URL_ENV, EndpointConfig, LLMPlanner, parse_completion
from uncap.planning import PlannerAuthError, PlannerFormatError, PlannerNetworkError, PlanQuery

TOKENS = [("action", -0.01), (":", -0.001), (" no", -0.3), (" merge", -0.05), ("\n", -0.002),
          ("reason", -0.01), (":", -0.001), (" close", -0.7), (" car", -0.2)]


def completion(tokens=TOKENS, with_logprobs=True):
    text = "".join(t for t, _ in tokens)
    choice = {"message": {"role": "assistant", "content": text}}
    if with_logprobs:
        choice["logprobs"] = {"content": [{"token": t, "logprob": lp, "top_logprobs": []} for t, lp in tokens]}
    return {"choices": [choice]}


def test_probability_from_action_tokens():
    d = parse_completion(completion())
    assert d.action == "no_merge" and d.reason == "close car"
    assert d.probability == pytest.approx(math.exp(-0.3 - 0.05), abs=1e-12)


def test_no_logprobs_gives_no_probability():
    d = parse_completion(completion(with_logprobs=False))
    assert d.action == "no_merge" and d.probability is None and d.u_d is None


def test_missing_action_line():
    body = completion([("I would merge", -0.1)])
    with pytest.raises(PlannerFormatError) as e:
        parse_completion(body)
    assert e.value.raw == "I would merge"


def test_action_must_fit_intention():
    body = completion([("action: yield", -0.1)])
    with pytest.raises(PlannerFormatError):
        parse_completion(body, "merge")
    assert parse_completion(body, "turn").action == "yield"


def test_bracketed_action_accepted():
    assert parse_completion(completion([("action: [merge]", -0.2)], False)).action == "merge"


def test_empty_response_is_format_error():
    with pytest.raises(PlannerFormatError):
        parse_completion({"choices": []})


class _Handler(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, self.headers.get("Authorization"), body))
        status, payload = type(self).script.pop(0)
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *a):
        pass


@pytest.fixture
def server(monkeypatch):
    try:
        srv = HTTPServer(("127.0.0.1", 0), _Handler)
    except OSError:
        pytest.skip("cannot bind a local port")
    _Handler.script, _Handler.seen = [], []
    monkeypatch.delenv(BASE_URL_ENV, raising=False)
    monkeypatch.setenv(API_KEY_ENV, "test-key")
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/v1", _Handler
    srv.shutdown()
    srv.server_close()


def _planner(url, **kw):
    p = LLMPlanner(EndpointConfig(base_url=url, timeout_s=5.0, backoff_s=0.0, **kw))
    p.sleep = lambda s: None
    return p


QUERY = PlanQuery("Ego Vehicle: Facing N, Speed: 8.00")


def test_round_trip_against_local_endpoint(server):
    url, h = server
    h.script.append((200, completion()))
    planner = _planner(url)
    d = planner.plan(QUERY)
    assert d.probability == pytest.approx(math.exp(-0.35), abs=1e-9)
    path, auth, body = h.seen[0]
    assert path == "/v1/chat/completions" and auth == "Bearer test-key"
    assert body["logprobs"] is True and body["temperature"] == 0
    assert "Ego Vehicle: Facing N" in body["messages"][0]["content"]
    assert planner.transcript[0]["response"] == completion()


def test_base_url_env_override(server, monkeypatch):
    url, h = server
    monkeypatch.setenv(BASE_URL_ENV, url)
    h.script.append((200, completion()))
    assert _planner("http://invalid.example/v1").plan(QUERY).action == "no_merge"


def test_unauthorised(server):
    url, h = server
    h.script.append((401, {"error": "bad key"}))
    with pytest.raises(PlannerAuthError):
        _planner(url).plan(QUERY)


def test_retries_on_server_error(server):
    url, h = server
    h.script += [(503, {}), (200, completion())]
    assert _planner(url).plan(QUERY).action == "no_merge"
    assert len(h.seen) == 2


def test_gives_up_after_retries(server):
    url, h = server
    h.script += [(500, {})] * 3
    with pytest.raises(PlannerNetworkError):
        _planner(url, max_retries=2).plan(QUERY)
    assert len(h.seen) == 3


def test_missing_credential(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    with pytest.raises(PlannerAuthError, match=API_KEY_ENV):
        _planner("http://127.0.0.1:9/v1").plan(QUERY)
