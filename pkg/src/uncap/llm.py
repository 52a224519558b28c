"""Client for an OpenAI-compatible chat-completions endpoint used as planner.

Only the standard library is used. The response must carry token
log-probabilities; the decision probability is the product of the
probabilities of the tokens that spell the action value.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from .planning import (
    ACTION_PAIRS,
    PlanDecision,
    PlannerAuthError,
    PlannerError,
    PlannerFormatError,
    PlannerNetworkError,
    PlanQuery,
)
from .prompts import build_planning_prompt

API_KEY_ENV = "UNCAP_API_KEY"
BASE_URL_ENV = "UNCAP_BASE_URL"

_ACTION_WORDS = {
    "merge": "merge",
    "no merge": "no_merge",
    "no_merge": "no_merge",
    "proceed": "proceed",
    "stop": "stop",
    "yield": "yield",
}
_ACTION_LINE = re.compile(r"^[ \t*]*action[ \t*]*:[ \t]*(.*?)[ \t]*$", re.IGNORECASE | re.MULTILINE)
_REASON_LINE = re.compile(r"^[ \t*]*reason[ \t*]*:[ \t]*(.*?)[ \t]*$", re.IGNORECASE | re.MULTILINE)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    timeout_s: float = 30.0
    max_retries: int = 2
    backoff_s: float = 0.5
    top_logprobs: int = 5

    def resolved_base_url(self) -> str:
        return os.environ.get(BASE_URL_ENV) or self.base_url


def _normalise_action(value: str) -> str | None:
    v = value.strip().strip("[]*.\"'`").strip().lower()
    return _ACTION_WORDS.get(v)


def parse_completion(response: dict, intention: str = "merge") -> PlanDecision:
    """Turn a chat-completions response body into a decision. Pure; used for fixture replay."""
    try:
        choice = response["choices"][0]
        text = choice["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise PlannerFormatError("response has no message content", json.dumps(response)) from None
    if not isinstance(text, str):
        raise PlannerFormatError("message content is not text", json.dumps(response))
    m = _ACTION_LINE.search(text)
    if not m:
        raise PlannerFormatError("response missing 'action:' line", text)
    action = _normalise_action(m.group(1))
    if action is None:
        raise PlannerFormatError(f"unrecognised action {m.group(1)!r}", text)
    if action not in ACTION_PAIRS.get(intention, ()):
        raise PlannerFormatError(f"action {action!r} does not fit intention {intention!r}", text)
    r = _REASON_LINE.search(text)
    reason = r.group(1) if r else ""

    tokens = (choice.get("logprobs") or {}).get("content")
    if not tokens:
        # no likelihoods exposed: usable for driving, excluded from IG
        return PlanDecision(action, reason, None)
    joined = "".join(t["token"] for t in tokens)
    span = m if joined == text else _ACTION_LINE.search(joined)
    if span is None:
        raise PlannerFormatError("log-probability tokens do not spell the action line", text)
    start, end = span.start(1), span.end(1)
    pos, total, used = 0, 0.0, 0
    for t in tokens:
        tok = t["token"]
        a, b = pos, pos + len(tok)
        pos = b
        if b <= start or a >= end or not tok.strip():
            continue
        total += float(t["logprob"])
        used += 1
    if used == 0:
        raise PlannerFormatError("no tokens cover the action value", text)
    return PlanDecision(action, reason, min(1.0, math.exp(total)))


@dataclass
class LLMPlanner:
    config: EndpointConfig = field(default_factory=EndpointConfig)
    api_key: str | None = None
    transcript: list = field(default_factory=list)
    sleep = staticmethod(time.sleep)

    def _key(self) -> str:
        key = self.api_key or os.environ.get(API_KEY_ENV)
        if not key:
            raise PlannerAuthError(f"no credential: set {API_KEY_ENV}")
        return key

    def request_body(self, query: PlanQuery) -> dict:
        return {
            "model": self.config.model,
            "messages": [{"role": "user", "content": build_planning_prompt(query.text, query.intention)}],
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": self.config.top_logprobs,
        }

    def _post(self, body: dict) -> dict:
        url = self.config.resolved_base_url().rstrip("/") + "/chat/completions"
        data = json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json", "Authorization": f"Bearer {self._key()}"}
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.backoff_s * 2 ** (attempt - 1))
            req = urllib.request.Request(url, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.config.timeout_s) as resp:
                    raw = resp.read().decode("utf-8")
            except urllib.error.HTTPError as e:
                if e.code in (401, 403):
                    raise PlannerAuthError(f"endpoint rejected credentials (HTTP {e.code})") from None
                if e.code == 429 or e.code >= 500:
                    last = e
                    continue
                raise PlannerError(f"endpoint returned HTTP {e.code}") from None
            except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
                last = e
                continue
            try:
                return json.loads(raw)
            except json.JSONDecodeError:
                raise PlannerFormatError("endpoint returned non-JSON body", raw) from None
        raise PlannerNetworkError(f"endpoint unreachable after {self.config.max_retries + 1} attempts: {last}")

    def plan(self, query: PlanQuery) -> PlanDecision:
        body = self.request_body(query)
        response = self._post(body)
        self.transcript.append({"request": body, "response": response})
        return parse_completion(response, query.intention)


def llm_plan(query: PlanQuery, config: EndpointConfig = EndpointConfig()) -> PlanDecision:
    return LLMPlanner(config).plan(query)
