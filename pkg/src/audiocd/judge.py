"""LLM-as-judge: binary correctness and five-state error categorisation.

The judge talks to any chat-completions-compatible endpoint. Replies must end
with a labelled final line (``VERDICT: Correct`` / ``STATE: W_REASON``);
free-text rationale before that line is kept as the raw output.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import httpx

log = logging.getLogger(__name__)

RUBRIC_VERSION = "v1"
DEFAULT_MODEL = "gpt-4o-2024-11-20"
DEFAULT_BASE_URL = "https://api.openai.com/v1"


class ResponseState(str, enum.Enum):
    W_NO_AUDIO = "W_NO_AUDIO"
    W_REASON = "W_REASON"
    W_DIRECT = "W_DIRECT"
    W_GUESS = "W_GUESS"
    CORRECT = "CORRECT"


# Axis order used by every matrix and report.
STATE_ORDER = (
    ResponseState.W_NO_AUDIO,
    ResponseState.W_REASON,
    ResponseState.W_DIRECT,
    ResponseState.W_GUESS,
    ResponseState.CORRECT,
)
WRONG_STATES = STATE_ORDER[:4]


class JudgeError(RuntimeError):
    pass


class JudgeProtocolError(JudgeError):
    """The judge replied, but not with a usable label."""


class JudgeUnavailableError(JudgeError):
    """The endpoint kept failing (rate limits, 5xx, network) past the retry budget."""


@dataclass(frozen=True)
class JudgeRequest:
    question: str
    ground_truth: str
    response: str
    correct: bool | None = None

    def __post_init__(self):
        if not self.response.strip():
            raise ValueError("response text must be non-empty")


@dataclass(frozen=True)
class Verdict:
    sample_id: str
    correct: bool
    state: ResponseState
    judge_model: str
    raw: str = ""

    def __post_init__(self):
        object.__setattr__(self, "state", ResponseState(self.state))
        if self.correct != (self.state is ResponseState.CORRECT):
            raise ValueError(f"{self.sample_id}: correct={self.correct} contradicts state {self.state.value}")

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "correct": self.correct,
            "state": self.state.value,
            "judge_model": self.judge_model,
            "raw": self.raw,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Verdict":
        return cls(rec["id"], rec["correct"], ResponseState(rec["state"]), rec["judge_model"], rec.get("raw", ""))


# --------------------------------------------------------------------------
# prompts
# --------------------------------------------------------------------------

CORRECTNESS_SYSTEM = (
    "You grade answers produced by an audio-language model. Compare the model "
    "response with the ground truth for the given question. The response is "
    "Correct only if its final answer matches the ground truth.\n"
    "You may explain briefly, but the last line must be exactly "
    "'VERDICT: Correct' or 'VERDICT: Wrong'."
)

CATEGORY_SYSTEM = """\
You classify a WRONG answer produced by an audio-language model into exactly one
error state. Check the states in the priority order 1 to 4 and choose the first
that applies.

1. W_NO_AUDIO: the model falsely claims that no audio was provided, or asks the
   user to play or upload the sound. If the model acknowledges the audio but
   calls it unclear, noisy or hard to hear, this state does NOT apply.
2. W_REASON: the model cites specific evidence (acoustic properties, measured
   values, concrete cues) to support its wrong answer. Circular reasoning
   ("It is A, so the answer is A") and simple intuition ("It sounds like A")
   are NOT evidence.
3. W_DIRECT: the model asserts a wrong answer without specific evidence. This
   includes short assertions, circular reasoning and simple intuition.
4. W_GUESS: the model says it is not sure, that it is guessing, or refuses to
   answer. This includes responses that attempt some reasoning but conclude by
   refusing to answer because the information is insufficient.

The last line of your reply must be exactly 'STATE: <LABEL>' where <LABEL> is one
of W_NO_AUDIO, W_REASON, W_DIRECT, W_GUESS."""


def _user_block(req: JudgeRequest, status: str | None = None) -> str:
    parts = [
        f"[Question]\n{req.question}",
        f"[Ground Truth]\n{req.ground_truth}",
        f"[Model Response]\n{req.response}",
    ]
    if status is not None:
        parts.append(f"[Correctness Status]\n{status}")
    return "\n\n".join(parts)


def correctness_messages(req: JudgeRequest) -> list[dict]:
    return [
        {"role": "system", "content": CORRECTNESS_SYSTEM},
        {"role": "user", "content": _user_block(req)},
    ]


def category_messages(req: JudgeRequest) -> list[dict]:
    return [
        {"role": "system", "content": CATEGORY_SYSTEM},
        {"role": "user", "content": _user_block(req, "Wrong")},
    ]


def _final_label(text: str, prefix: str, allowed: dict[str, object]):
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise JudgeProtocolError("empty judge reply")
    m = re.fullmatch(rf"{prefix}:\s*([A-Za-z_]+)\.?", lines[-1])
    if not m or m.group(1).upper() not in allowed:
        raise JudgeProtocolError(f"unparseable final line {lines[-1]!r}")
    return allowed[m.group(1).upper()]


def parse_verdict(text: str) -> bool:
    return _final_label(text, "VERDICT", {"CORRECT": True, "WRONG": False})


def parse_state(text: str) -> ResponseState:
    return _final_label(text, "STATE", {s.value: s for s in WRONG_STATES})


# --------------------------------------------------------------------------
# HTTP client
# --------------------------------------------------------------------------


class ChatClient:
    """Minimal chat-completions client with exponential backoff.

    Retries 429, 5xx and transport errors up to ``max_retries`` times,
    sleeping ``backoff * 2**attempt`` seconds in between.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        max_retries: int = 5,
        backoff: float = 0.5,
        timeout: float = 60.0,
        sleep=time.sleep,
    ):
        self.base_url = (base_url or os.environ.get("JUDGE_BASE_URL") or DEFAULT_BASE_URL).rstrip("/")
        self.model = model or os.environ.get("JUDGE_MODEL") or DEFAULT_MODEL
        api_key = api_key if api_key is not None else os.environ.get("JUDGE_API_KEY", "")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(transport=transport, headers=headers, timeout=timeout)
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self.retries = 0
        self.requests = 0
        self._lock = threading.Lock()

    def _count(self, attr):
        with self._lock:
            setattr(self, attr, getattr(self, attr) + 1)

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.model, "messages": messages, "temperature": 0}
        url = f"{self.base_url}/chat/completions"
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._count("retries")
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self._count("requests")
            try:
                resp = self._http.post(url, json=payload)
            except httpx.TransportError as exc:
                log.warning("judge request failed (%s), attempt %d", exc, attempt + 1)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                log.warning("judge endpoint returned %d, attempt %d", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise JudgeError(f"judge endpoint returned {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise JudgeProtocolError(f"malformed completion payload: {exc}") from exc
        raise JudgeUnavailableError(f"judge endpoint unavailable after {self.max_retries} retries")

    def close(self):
        self._http.close()


def _ask(client: ChatClient, messages, parse, parse_attempts: int):
    last = None
    for _ in range(parse_attempts):
        text = client.complete(messages)
        try:
            return parse(text), text
        except JudgeProtocolError as exc:
            log.warning("unparseable judge reply: %s", exc)
            last = exc
    raise JudgeProtocolError(str(last))


def judge_correctness(req: JudgeRequest, client: ChatClient, parse_attempts: int = 6) -> bool:
    return _ask(client, correctness_messages(req), parse_verdict, parse_attempts)[0]


def categorize(req: JudgeRequest, client: ChatClient, parse_attempts: int = 6) -> ResponseState:
    """Return CORRECT for correct responses (no call), else ask for the error state."""
    if req.correct is None:
        raise ValueError("categorize needs the correctness status")
    if req.correct:
        return ResponseState.CORRECT
    return _ask(client, category_messages(req), parse_state, parse_attempts)[0]


# --------------------------------------------------------------------------
# cache
# --------------------------------------------------------------------------


class JudgeCache:
    """Append-only JSON-lines cache of judge replies."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._mem: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        self._mem[rec["key"]] = rec
                    except (ValueError, KeyError, TypeError):
                        log.warning("skipping corrupt cache line %d in %s", lineno, self.path)

    @staticmethod
    def key(model: str, rubric_version: str, kind: str, req: JudgeRequest) -> str:
        blob = json.dumps(
            [model, rubric_version, kind, req.question, req.ground_truth, req.response, req.correct],
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def __len__(self):
        return len(self._mem)

    def get(self, key):
        return self._mem.get(key)

    def put(self, key: str, value, raw: str) -> None:
        rec = {"key": key, "value": value, "raw": raw}
        with self._lock:
            if key in self._mem:
                return
            self._mem[key] = rec
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def cached(self, key: str, call):
        """Return the cached ``(value, raw)`` for ``key`` or compute, store and return it."""
        hit = self.get(key)
        if hit is not None:
            return hit["value"], hit["raw"]
        # one in-flight request per key; concurrent callers wait for its result
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            hit = self.get(key)
            if hit is not None:
                return hit["value"], hit["raw"]
            value, raw = call()
            self.put(key, value, raw)
        return value, raw


class Judge:
    """Correctness + categorisation with caching and bounded concurrency."""

    def __init__(self, client: ChatClient, cache: JudgeCache | None = None,
                 rubric_version: str = RUBRIC_VERSION, concurrency: int = 4, parse_attempts: int = 6):
        self.client = client
        self.cache = cache if cache is not None else JudgeCache()
        self.rubric_version = rubric_version
        self.concurrency = concurrency
        self.parse_attempts = parse_attempts

    @property
    def model(self) -> str:
        return self.client.model

    def judge_correctness(self, req: JudgeRequest) -> tuple[bool, str]:
        key = JudgeCache.key(self.model, self.rubric_version, "correctness", req)
        return self.cache.cached(
            key, lambda: _ask(self.client, correctness_messages(req), parse_verdict, self.parse_attempts)
        )

    def categorize(self, req: JudgeRequest) -> tuple[ResponseState, str]:
        if req.correct is None:
            raise ValueError("categorize needs the correctness status")
        if req.correct:
            return ResponseState.CORRECT, ""
        key = JudgeCache.key(self.model, self.rubric_version, "category", req)

        def call():
            state, raw = _ask(self.client, category_messages(req), parse_state, self.parse_attempts)
            return state.value, raw

        value, raw = self.cache.cached(key, call)
        return ResponseState(value), raw

    def verdict(self, sample_id: str, req: JudgeRequest) -> Verdict:
        correct, raw_c = self.judge_correctness(req)
        req = JudgeRequest(req.question, req.ground_truth, req.response, correct)
        state, raw_s = self.categorize(req)
        raw = raw_c if not raw_s else raw_c + "\n---\n" + raw_s
        return Verdict(sample_id, correct, state, self.model, raw)

    def map(self, items, on_result=None):
        """Judge ``(sample_id, request)`` pairs concurrently.

        ``on_result(sample_id, verdict_or_exception)`` is called from worker
        threads as each finishes. Stops submitting once the endpoint is
        unavailable and re-raises that error at the end.
        """
        unavailable = threading.Event()
        failure = []

        def work(sid, req):
            if unavailable.is_set():
                return
            try:
                v = self.verdict(sid, req)
            except JudgeUnavailableError as exc:
                unavailable.set()
                failure.append(exc)
                return
            except JudgeError as exc:
                v = exc
            if on_result:
                on_result(sid, v)

        with ThreadPoolExecutor(max_workers=max(1, self.concurrency)) as pool:
            for f in [pool.submit(work, sid, req) for sid, req in items]:
                f.result()
        if failure:
            raise failure[0]


# --------------------------------------------------------------------------
# mock endpoint
# --------------------------------------------------------------------------

_NO_AUDIO = re.compile(
    r"\bno (audio|sound|recording)\b.*\b(provided|attached|included|given|received)\b"
    r"|\b(audio|sound|recording) (was|is|has)(n't| not)( been)? (provided|attached|included|given)"
    r"|\bplease (upload|play|provide|share|attach)\b"
    r"|\b(can ?not|can't|unable to) (hear|access|find|detect) any (audio|sound)"
    r"|\bthere (is|was) no (audio|recording)\b"
    r"|\bdid(n't| not) receive any (audio|sound|file)",
    re.I,
)
_AUDIO_ACKNOWLEDGED = re.compile(r"\b(unclear|muffled|noisy|faint|hard to hear|distorted|garbled)\b", re.I)
_UNCERTAIN = re.compile(
    r"\b(not sure|unsure|uncertain|guess|guessing|i don't know|no idea|maybe|perhaps"
    r"|can ?not (determine|tell|answer|say|identify)|can't (determine|tell|answer|say|identify)"
    r"|unable to (determine|tell|answer|identify)|insufficient|not enough information"
    r"|impossible to (determine|tell)|refuse|decline)\b",
    re.I,
)
_EVIDENCE = re.compile(
    r"\b(tempo|bpm|pitch|pitched|frequenc(y|ies)|hz|khz|timbre|rhythm|melod(y|ic)|harmonics?"
    r"|chords?|minor|major|key signature|vibrato|accent|intonation|formants?|loudness|decibels?|db"
    r"|reverb|bark(ing|s)?|chirp(ing|s)?|meow(ing|s)?|croak(ing|s)?|howl(ing|s)?|trill(ing|s)?"
    r"|vowels?|syllables?|prosody|breath(y|iness)?|resonance|spectr(al|um))\b"
    r"|\d+(\.\d+)?\s*(bpm|hz|khz|db|seconds?|ms)\b",
    re.I,
)


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"[.!?;\n]+", text) if s.strip()]


def rule_based_state(response: str) -> ResponseState:
    """Keyword emulation of the categorisation rubric for wrong answers."""
    if _NO_AUDIO.search(response) and not _AUDIO_ACKNOWLEDGED.search(response):
        return ResponseState.W_NO_AUDIO
    sentences = _sentences(response)
    if sentences and _UNCERTAIN.search(sentences[-1]):
        return ResponseState.W_GUESS
    if _EVIDENCE.search(response):
        return ResponseState.W_REASON
    if _UNCERTAIN.search(response):
        return ResponseState.W_GUESS
    return ResponseState.W_DIRECT


def rule_based_correct(ground_truth: str, response: str) -> bool:
    return re.search(rf"\b{re.escape(ground_truth.strip())}\b", response, re.I) is not None


_SECTION = re.compile(r"\[(Question|Ground Truth|Model Response|Correctness Status)\]\n(.*?)(?=\n\n\[|\Z)", re.S)


class MockJudgeEndpoint:
    """In-process chat-completions server backed by keyword rules.

    ``script`` is a list of HTTP status codes (or the string ``"garbage"``)
    consumed one per request before normal behaviour resumes; ``fail_after``
    makes every request past that count return 503, emulating an exhausted
    endpoint.
    """

    def __init__(self, script=None, fail_after: int | None = None, model: str = "mock-judge"):
        self.script = list(script or [])
        self.fail_after = fail_after
        self.model = model
        self.calls = {"correctness": 0, "category": 0}
        self.requests = 0
        self._lock = threading.Lock()

    def handle(self, payload: dict) -> tuple[int, dict]:
        with self._lock:
            self.requests += 1
            if self.fail_after is not None and self.requests > self.fail_after:
                return 503, {"error": {"message": "unavailable"}}
            action = self.script.pop(0) if self.script else None
        if isinstance(action, int):
            return action, {"error": {"message": f"scripted {action}"}}
        messages = payload["messages"]
        system, user = messages[0]["content"], messages[-1]["content"]
        fields = dict(_SECTION.findall(user))
        kind = "category" if system.startswith("You classify") else "correctness"
        with self._lock:
            self.calls[kind] += 1
        if action == "garbage":
            content = "I think this one is tricky."
        elif kind == "correctness":
            ok = rule_based_correct(fields["Ground Truth"], fields["Model Response"])
            content = f"Compared with the ground truth.\nVERDICT: {'Correct' if ok else 'Wrong'}"
        else:
            state = rule_based_state(fields["Model Response"])
            content = f"Checked states in priority order.\nSTATE: {state.value}"
        body = {
            "id": f"mock-{self.requests}",
            "object": "chat.completion",
            "model": payload.get("model", self.model),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        }
        return 200, body

    def _httpx_handler(self, request: httpx.Request) -> httpx.Response:
        if not request.url.path.endswith("/chat/completions"):
            return httpx.Response(404, json={"error": {"message": "not found"}})
        status, body = self.handle(json.loads(request.content))
        return httpx.Response(status, json=body)

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self._httpx_handler)

    def client(self, **kwargs) -> ChatClient:
        kwargs.setdefault("sleep", lambda s: None)
        return ChatClient(base_url="http://mock-judge/v1", api_key="mock", model=self.model,
                          transport=self.transport(), **kwargs)

    def serve(self, host: str = "127.0.0.1", port: int = 0):
        """Start a real HTTP server on a background thread; returns the server."""
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length))
                if not self.path.endswith("/chat/completions"):
                    status, body = 404, {"error": {"message": "not found"}}
                else:
                    status, body = endpoint.handle(payload)
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        server = ThreadingHTTPServer((host, port), Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
