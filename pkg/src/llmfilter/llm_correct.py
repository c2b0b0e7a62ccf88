"""LLM correction of greedy hypotheses: prompts, transport, parsing and retries.

A batch of hypotheses is sent as one user message made of the language's
prompt template followed, on its own final line, by the payload
``#h1#h2#...#hn#``. The model is expected to answer ``<c1>#<c2>#...#<cn>``.
"""

from __future__ import annotations

import logging
import math
import os
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Protocol

from .manifest import Lang

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 40
DEFAULT_MAX_ATTEMPTS = 3
API_KEY_ENV = "LLMFILTER_API_KEY"

_DELIMITERS = "#<>"


class TransportError(RuntimeError):
    """A request failed in a way worth retrying (timeout, 5xx, rate limit)."""


class EndpointConfigError(RuntimeError):
    """The endpoint cannot be used at all (bad credentials, unreachable host)."""


class ParseError(ValueError):
    def __init__(self, message: str, found: int | None = None, expected: int | None = None):
        self.found = found
        self.expected = expected
        super().__init__(message)


@dataclass(frozen=True)
class PromptTemplate:
    language: Lang
    system_instruction: str
    problem_description: str
    examples: str

    @property
    def text(self) -> str:
        return " ".join((self.system_instruction, self.problem_description, self.examples))


def load_template(language: Lang | str) -> PromptTemplate:
    """Load the bundled prompt for ``language`` (ZH or EN).

    The prompt file holds one section per line: system instruction, problem
    description, examples.
    """
    language = Lang(language)
    if language not in (Lang.ZH, Lang.EN):
        raise ValueError(f"no prompt template for {language}")
    raw = resources.files("llmfilter").joinpath("prompts", f"{language.value.lower()}.txt")
    lines = raw.read_text(encoding="utf-8").splitlines()
    if len(lines) != 3:
        raise ValueError(f"prompt file for {language} must have 3 lines, found {len(lines)}")
    return PromptTemplate(language, *lines)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


def sanitize(text: str) -> str:
    """Blank out protocol delimiters and line breaks."""
    for ch in _DELIMITERS + "\r\n":
        text = text.replace(ch, " ")
    return text


@dataclass(frozen=True)
class CorrectionBatch:
    utt_ids: tuple[str, ...]
    greedy_texts: tuple[str, ...]
    durations: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.utt_ids:
            raise ValueError("a correction batch needs at least one hypothesis")
        if len(self.utt_ids) != len(self.greedy_texts):
            raise ValueError("utt_ids and greedy_texts differ in length")
        if self.durations and len(self.durations) != len(self.utt_ids):
            raise ValueError("durations and utt_ids differ in length")

    def __len__(self) -> int:
        return len(self.utt_ids)

    @classmethod
    def from_texts(
        cls,
        utt_ids: Sequence[str],
        texts: Sequence[str],
        durations: Sequence[float] = (),
    ) -> CorrectionBatch:
        return cls(tuple(utt_ids), tuple(sanitize(t) for t in texts), tuple(durations))

    @property
    def total_duration(self) -> float:
        return math.fsum(self.durations)


@dataclass(frozen=True)
class BatchDropped:
    """A batch that failed every attempt; its utterances get no pseudo label."""

    utt_ids: tuple[str, ...]
    duration_s: float
    attempts: int
    last_error: str = ""


def make_batches(
    utt_ids: Sequence[str],
    texts: Sequence[str],
    durations: Sequence[float],
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[CorrectionBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [
        CorrectionBatch.from_texts(
            utt_ids[i : i + batch_size], texts[i : i + batch_size], durations[i : i + batch_size]
        )
        for i in range(0, len(utt_ids), batch_size)
    ]


def render_payload(batch: CorrectionBatch) -> str:
    for utt_id, text in zip(batch.utt_ids, batch.greedy_texts):
        bad = sorted({ch for ch in text if ch in _DELIMITERS or ch in "\r\n"})
        if bad:
            raise ValueError(f"{utt_id}: hypothesis contains reserved character(s) {''.join(bad)!r}")
    return "#" + "#".join(batch.greedy_texts) + "#"


def render_prompt(template: PromptTemplate, batch: CorrectionBatch | None = None) -> str:
    """Template text, then the batch payload on a final line of its own."""
    if batch is None:
        return template.text
    return template.text + "\n" + render_payload(batch)


def extract_payload(prompt: str) -> list[str]:
    """Inverse of :func:`render_payload` applied to a full rendered prompt."""
    last = prompt.rsplit("\n", 1)[-1]
    if len(last) < 2 or not (last.startswith("#") and last.endswith("#")):
        raise ValueError("prompt does not end with a '#...#' payload line")
    return last[1:-1].split("#")


def parse_response(text: str, expected_n: int) -> list[str]:
    """Pull the ``<...>`` groups out of a model reply.

    >>> parse_response("<Nice to meet you>#<hello world>.", 2)
    ['Nice to meet you', 'hello world']
    """
    if expected_n < 1:
        raise ValueError("expected_n must be >= 1")
    groups: list[str] = []
    start = -1
    for pos, ch in enumerate(text):
        if ch == "<":
            if start >= 0:
                raise ParseError(f"nested '<' at offset {pos}")
            start = pos + 1
        elif ch == ">" and start >= 0:
            groups.append(text[start:pos])
            start = -1
    if start >= 0:
        raise ParseError(f"unterminated '<' at offset {start - 1}")
    if len(groups) != expected_n:
        raise ParseError(
            f"found {len(groups)} corrected hypotheses, expected {expected_n}",
            found=len(groups),
            expected=expected_n,
        )
    return groups


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpChatClient:
    """Minimal client for an OpenAI-style ``/chat/completions`` endpoint."""

    def __init__(
        self,
        url: str,
        model: str,
        timeout_s: float = 60.0,
        api_key: str | None = None,
        temperature: float = 0.0,
    ):
        if not url:
            raise EndpointConfigError("endpoint.url is not configured")
        if not model:
            raise EndpointConfigError("endpoint.model is not configured")
        self.url = url
        self.model = model
        self.timeout_s = timeout_s
        self.temperature = temperature
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)

    def __repr__(self) -> str:
        return f"HttpChatClient(url={self.url!r}, model={self.model!r})"

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        try:
            resp = requests.post(
                self.url, json=self.request_body(prompt), headers=headers, timeout=self.timeout_s
            )
        except requests.exceptions.ConnectionError as exc:
            raise EndpointConfigError(f"cannot reach {self.url}: {exc.__class__.__name__}") from None
        except requests.exceptions.Timeout:
            raise TransportError(f"request timed out after {self.timeout_s}s") from None
        except requests.exceptions.RequestException as exc:
            raise TransportError(str(exc)) from None
        if resp.status_code in (401, 403):
            raise EndpointConfigError(f"endpoint rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 404:
            raise EndpointConfigError(f"endpoint not found (HTTP 404): {self.url}")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise TransportError("response body has no assistant message") from None


class MockEndpoint:
    """Offline stand-in for :class:`HttpChatClient`.

    ``responder`` maps a rendered prompt to a reply; the first ``fail_first``
    calls raise :class:`TransportError` instead.
    """

    def __init__(self, responder: Callable[[str], str], fail_first: int = 0):
        self._responder = responder
        self.fail_first = fail_first
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
            call = self.calls
        if call <= self.fail_first:
            raise TransportError(f"mock transport failure on call {call}")
        return self._responder(prompt)


def echo_response(prompt: str) -> str:
    return "#".join(f"<{h}>" for h in extract_payload(prompt))


class _Script:
    def __init__(self, responses: Sequence[str]):
        self._responses = list(responses)
        self._next = 0
        self._lock = threading.Lock()

    def __call__(self, prompt: str) -> str:
        with self._lock:
            if self._next >= len(self._responses):
                raise TransportError("scripted responses exhausted")
            reply = self._responses[self._next]
            self._next += 1
        return reply


def _always_malformed(prompt: str) -> str:
    return "I am unable to help with that."


def mock_endpoint(behavior: str = "echo", responses: Sequence[str] = (), k: int = 0) -> MockEndpoint:
    """Build a mock client: ``echo``, ``scripted`` (replays ``responses``),
    ``failing`` (``k`` transport errors, then echo) or ``malformed``."""
    if behavior == "echo":
        return MockEndpoint(echo_response)
    if behavior == "scripted":
        return MockEndpoint(_Script(responses))
    if behavior == "failing":
        return MockEndpoint(echo_response, fail_first=k)
    if behavior == "malformed":
        return MockEndpoint(_always_malformed)
    raise ValueError(f"unknown mock behavior {behavior!r}")


def correct_batch(
    endpoint: ChatClient,
    template: PromptTemplate,
    batch: CorrectionBatch,
    policy: RetryPolicy = RetryPolicy(),
) -> list[str] | BatchDropped:
    """Send one batch, retrying transport and parse failures.

    Returns the corrections in ``batch.utt_ids`` order, or a
    :class:`BatchDropped` once ``policy.max_attempts`` requests have failed.
    :class:`EndpointConfigError` propagates immediately.
    """
    prompt = render_prompt(template, batch)
    last_error = ""
    for attempt in range(1, policy.max_attempts + 1):
        try:
            reply = endpoint.complete(prompt)
            return parse_response(reply, len(batch))
        except (TransportError, ParseError) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            logger.warning(
                "batch starting %s: attempt %d/%d failed (%s)",
                batch.utt_ids[0],
                attempt,
                policy.max_attempts,
                last_error,
            )
    logger.warning("dropping batch starting %s (%d utts)", batch.utt_ids[0], len(batch))
    return BatchDropped(batch.utt_ids, batch.total_duration, policy.max_attempts, last_error)


def correct_batches(
    endpoint: ChatClient,
    template: PromptTemplate,
    batches: Sequence[CorrectionBatch],
    policy: RetryPolicy = RetryPolicy(),
    parallelism: int = 1,
) -> list[list[str] | BatchDropped]:
    """Run :func:`correct_batch` over ``batches``; results come back in input order."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if parallelism == 1 or len(batches) <= 1:
        return [correct_batch(endpoint, template, b, policy) for b in batches]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(lambda b: correct_batch(endpoint, template, b, policy), batches))


@dataclass
class EndpointSettings:
    url: str = ""
    model: str = ""
    timeout_s: float = 60.0

    def client(self) -> HttpChatClient:
        return HttpChatClient(self.url, self.model, self.timeout_s)
