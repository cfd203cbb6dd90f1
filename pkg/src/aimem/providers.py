"""Chat-completion and embedding providers.

A :class:`Provider` couples a :class:`ProviderConfig` with a transport. Two
transports ship: :class:`HttpTransport` speaks the common chat-completions
HTTP shape (``POST {endpoint}/chat/completions`` and ``/embeddings``), and
:class:`MockTransport` answers from a :class:`MockScript` or a Python
callable so every pipeline runs offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import DEFAULT_COUNTER, TokenCounter
from .errors import (
    ContextOverflow,
    CorruptRunLog,
    RateLimited,
    TransientError,
    TransportError,
    UserError,
)

log = logging.getLogger(__name__)

NIAH_SYSTEM_PROMPT = (
    "You are a helpful AI bot that answers questions for a user. "
    "Keep your response short and direct"
)
NIAH_QUESTION_SUFFIX = "Don't give information outside the document or repeat your findings"

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise UserError(f"unknown message role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise UserError(f"{self.role} message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


def build_niah_messages(context: str, question: str) -> list[ChatMessage]:
    if not question:
        raise UserError("question must be non-empty")
    if not context:
        raise UserError("context must be non-empty")
    return [
        ChatMessage("system", NIAH_SYSTEM_PROMPT),
        ChatMessage("user", context),
        ChatMessage("user", f"{question} {NIAH_QUESTION_SUFFIX}"),
    ]


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return self.backoff_base * self.backoff_factor ** (attempt - 1)


@dataclass(frozen=True)
class ProviderConfig:
    name: str
    model: str
    kind: str = "openai"
    endpoint: str = "https://api.openai.com/v1"
    api_key_env: str | None = None
    max_context_tokens: int = 128_000
    temperature: float = 0.0
    max_parallel: int = 4
    retry: RetryPolicy = RetryPolicy()
    timeout: float = 60.0
    cost_per_1k_tokens: float = 0.0
    embedding_dim: int = 8

    def __post_init__(self):
        if self.max_context_tokens <= 0:
            raise UserError(f"{self.name}: max_context_tokens must be positive")
        if not 0.0 <= self.temperature <= 2.0:
            raise UserError(f"{self.name}: temperature must be in [0, 2]")
        if self.max_parallel < 1:
            raise UserError(f"{self.name}: max_parallel must be >= 1")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency: float
    provider: str
    fingerprint: str = ""
    cached: bool = False


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def fingerprint(
    config: ProviderConfig, messages: Sequence[ChatMessage], temperature: float
) -> str:
    payload = {
        "provider": config.name,
        "model": config.model,
        "temperature": temperature,
        "messages": [m.to_dict() for m in messages],
    }
    return hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()


def embed_fingerprint(config: ProviderConfig, texts: Sequence[str]) -> str:
    payload = {"provider": config.name, "model": config.model, "embed": list(texts)}
    return hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()


class Transport:
    def chat(
        self, config: ProviderConfig, messages: Sequence[ChatMessage], temperature: float
    ) -> tuple[str, int | None, int | None]:
        raise NotImplementedError

    def embed(self, config: ProviderConfig, texts: Sequence[str]) -> list[list[float]]:
        raise NotImplementedError


class HttpTransport(Transport):
    def __init__(self, client=None):
        import httpx

        self._httpx = httpx
        self._client = client or httpx.Client()

    def _headers(self, config: ProviderConfig) -> dict:
        headers = {"Content-Type": "application/json"}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env)
            if not key:
                raise TransportError(f"environment variable {config.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, config: ProviderConfig, path: str, body: dict) -> dict:
        url = config.endpoint.rstrip("/") + path
        try:
            resp = self._client.post(
                url, json=body, headers=self._headers(config), timeout=config.timeout
            )
        except self._httpx.TimeoutException as exc:
            raise TransientError(f"timeout calling {url}: {exc}")
        except self._httpx.TransportError as exc:
            raise TransientError(f"transport failure calling {url}: {exc}")
        if resp.status_code == 429:
            raise RateLimited(f"{url} returned 429")
        if resp.status_code >= 500:
            raise TransientError(f"{url} returned {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"{url} returned non-JSON body: {exc}")

    def chat(self, config, messages, temperature):
        data = self._post(
            config,
            "/chat/completions",
            {
                "model": config.model,
                "messages": [m.to_dict() for m in messages],
                "temperature": temperature,
            },
        )
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise TransportError("response has no choices[0].message.content")
        usage = data.get("usage") or {}
        return text, usage.get("prompt_tokens"), usage.get("completion_tokens")

    def embed(self, config, texts):
        data = self._post(config, "/embeddings", {"model": config.model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda d: d.get("index", 0))
            return [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError):
            raise TransportError("response has no data[].embedding")


@dataclass
class MockRule:
    response: str | list[str]
    match: str | None = None
    fingerprint: str | None = None
    _served: int = 0

    def next_response(self) -> str:
        if isinstance(self.response, str):
            return self.response
        # list responses are served in order; the last one repeats
        text = self.response[min(self._served, len(self.response) - 1)]
        self._served += 1
        return text


@dataclass
class MockScript:
    """Ordered rules; the first rule whose matcher hits the prompt wins.

    A rule matches on a substring of the joined message contents or on the
    exact request fingerprint.
    """

    rules: list[MockRule] = field(default_factory=list)
    default: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        rules = []
        for r in data.get("rules", []):
            resp = r.get("responses", r.get("response"))
            if resp is None:
                raise UserError("mock rule needs 'response' or 'responses'")
            rules.append(MockRule(resp, match=r.get("match"), fingerprint=r.get("fingerprint")))
        return cls(rules, data.get("default", ""))

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def respond(self, prompt: str, fp: str) -> str:
        for rule in self.rules:
            if rule.fingerprint is not None and rule.fingerprint == fp:
                return rule.next_response()
            if rule.match is not None and rule.match in prompt:
                return rule.next_response()
        return self.default


def hash_embedding(text: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for ``text``.

    The first 8 bytes of SHA-256(text) seed a PCG64 generator; ``dim`` standard
    normal draws are normalised to unit length, which is a uniform point on the
    sphere.
    """
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


Responder = Callable[[Sequence[ChatMessage]], str]


class MockTransport(Transport):
    """Offline transport.

    ``responder`` (a callable over the message list) takes precedence over
    ``script``. ``failures`` makes the first N calls raise ``failure_error``,
    which exercises the retry path. Every call is recorded in ``calls``.
    """

    def __init__(
        self,
        script: MockScript | None = None,
        responder: Responder | None = None,
        embeddings: dict[str, Sequence[float]] | None = None,
        failures: int = 0,
        failure_error: type[Exception] = TransientError,
        embed_fails: bool = False,
    ):
        self.script = script or MockScript()
        self.responder = responder
        self.embeddings = embeddings or {}
        self.failures = failures
        self.failure_error = failure_error
        self.embed_fails = embed_fails
        self.calls: list[list[ChatMessage]] = []
        self.embed_calls: list[list[str]] = []
        self._lock = threading.Lock()

    def chat(self, config, messages, temperature):
        with self._lock:
            self.calls.append(list(messages))
            if self.failures > 0:
                self.failures -= 1
                raise self.failure_error("scripted failure")
            if self.responder is not None:
                text = self.responder(messages)
            else:
                prompt = "\n".join(m.content for m in messages)
                text = self.script.respond(prompt, fingerprint(config, messages, temperature))
        return text, None, None

    def embed(self, config, texts):
        with self._lock:
            self.embed_calls.append(list(texts))
            if self.embed_fails:
                raise TransportError("scripted embedding failure")
        out = []
        for t in texts:
            if t in self.embeddings:
                out.append([float(x) for x in self.embeddings[t]])
            else:
                out.append(hash_embedding(t, config.embedding_dim).tolist())
        return out


class RunLog:
    """Append-only call log (line-delimited JSON) with a SHA-256 hash chain.

    Each entry stores ``prev`` (hash of the previous entry, "" for the first)
    and ``hash`` = SHA-256 over the canonical JSON of the entry without
    ``hash``. Loading verifies the chain, so edited or truncated-mid-line logs
    are refused.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = []
        self._by_fp: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    @staticmethod
    def _hash(entry: dict) -> str:
        body = {k: v for k, v in entry.items() if k != "hash"}
        return hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()

    def _load(self) -> None:
        prev = ""
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    raise CorruptRunLog("not valid JSON", lineno)
                if not isinstance(entry, dict) or entry.get("prev") != prev:
                    raise CorruptRunLog("hash chain broken", lineno)
                if entry.get("hash") != self._hash(entry):
                    raise CorruptRunLog("entry hash mismatch", lineno)
                prev = entry["hash"]
                self.entries.append(entry)
                self._by_fp.setdefault(entry["fingerprint"], entry)

    def lookup(self, fp: str) -> dict | None:
        with self._lock:
            return self._by_fp.get(fp)

    def append(self, entry: dict) -> dict:
        with self._lock:
            entry = dict(entry)
            entry["seq"] = len(self.entries)
            entry["prev"] = self.entries[-1]["hash"] if self.entries else ""
            entry["hash"] = self._hash(entry)
            self.entries.append(entry)
            self._by_fp.setdefault(entry["fingerprint"], entry)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
            return entry


def _summarize_request(messages: Sequence[ChatMessage]) -> list[dict]:
    return [
        {"role": m.role, "chars": len(m.content), "head": m.content[:160]} for m in messages
    ]


class Provider:
    """A configured provider with retry, context checks and run logging.

    With ``resume=True`` any request whose fingerprint already sits in the run
    log is answered from the log without calling the transport.
    """

    def __init__(
        self,
        config: ProviderConfig,
        transport: Transport | None = None,
        counter: TokenCounter = DEFAULT_COUNTER,
        run_log: RunLog | None = None,
        resume: bool = False,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.transport = transport if transport is not None else HttpTransport()
        self.counter = counter
        self.run_log = run_log
        self.resume = resume
        self.sleep = sleep
        self.network_calls = 0
        self._calls_lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.config.name

    def prompt_tokens(self, messages: Sequence[ChatMessage]) -> int:
        return sum(self.counter(m.content) for m in messages)

    def _with_retry(self, fn):
        policy = self.config.retry
        last: Exception | None = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                with self._calls_lock:
                    self.network_calls += 1
                return fn()
            except (TransientError, RateLimited) as exc:
                last = exc
                if attempt < policy.max_attempts:
                    delay = policy.delay(attempt)
                    log.warning(
                        "%s: %s (attempt %d/%d), retrying in %.1fs",
                        self.name, exc, attempt, policy.max_attempts, delay,
                    )
                    self.sleep(delay)
        if isinstance(last, RateLimited):
            raise RateLimited(f"{self.name}: rate limited after {policy.max_attempts} attempts")
        raise TransportError(f"{self.name}: {last} after {policy.max_attempts} attempts")

    def complete(
        self, messages: Sequence[ChatMessage], temperature: float | None = None
    ) -> CompletionResult:
        messages = list(messages)
        temp = self.config.temperature if temperature is None else temperature
        n_prompt = self.prompt_tokens(messages)
        if n_prompt > self.config.max_context_tokens:
            raise ContextOverflow(
                f"{self.name}: prompt has {n_prompt} tokens, limit is "
                f"{self.config.max_context_tokens}"
            )
        fp = fingerprint(self.config, messages, temp)
        if self.resume and self.run_log is not None:
            hit = self.run_log.lookup(fp)
            if hit is not None:
                return CompletionResult(
                    hit["response"], hit["prompt_tokens"], hit["completion_tokens"],
                    0.0, self.name, fp, cached=True,
                )
        start = time.perf_counter()
        text, p_tok, c_tok = self._with_retry(
            lambda: self.transport.chat(self.config, messages, temp)
        )
        latency = time.perf_counter() - start
        p_tok = n_prompt if p_tok is None else p_tok
        c_tok = self.counter(text) if c_tok is None else c_tok
        if self.run_log is not None:
            self.run_log.append(
                {
                    "op": "chat",
                    "fingerprint": fp,
                    "provider": self.name,
                    "model": self.config.model,
                    "request": _summarize_request(messages),
                    "response": text,
                    "prompt_tokens": p_tok,
                    "completion_tokens": c_tok,
                    "latency": round(latency, 6),
                    "cost_estimate": (p_tok + c_tok) * self.config.cost_per_1k_tokens / 1000,
                }
            )
        return CompletionResult(text, p_tok, c_tok, latency, self.name, fp)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        if not texts:
            raise UserError("embed needs at least one text")
        fp = embed_fingerprint(self.config, texts)
        if self.resume and self.run_log is not None:
            hit = self.run_log.lookup(fp)
            if hit is not None:
                return [np.asarray(v, dtype=float) for v in hit["response"]]
        start = time.perf_counter()
        vectors = self._with_retry(lambda: self.transport.embed(self.config, texts))
        latency = time.perf_counter() - start
        if len(vectors) != len(texts):
            raise TransportError(f"{self.name}: {len(vectors)} vectors for {len(texts)} texts")
        if len({len(v) for v in vectors}) != 1:
            raise TransportError(f"{self.name}: embedding dimensions differ")
        if self.run_log is not None:
            self.run_log.append(
                {
                    "op": "embed",
                    "fingerprint": fp,
                    "provider": self.name,
                    "model": self.config.model,
                    "request": [{"chars": len(t), "head": t[:80]} for t in texts],
                    "response": [list(map(float, v)) for v in vectors],
                    "prompt_tokens": sum(self.counter(t) for t in texts),
                    "completion_tokens": 0,
                    "latency": round(latency, 6),
                    "cost_estimate": 0.0,
                }
            )
        return [np.asarray(v, dtype=float) for v in vectors]


def mock_provider(
    name: str = "mock",
    script: MockScript | dict | None = None,
    responder: Responder | None = None,
    max_context_tokens: int = 1_000_000,
    **kwargs,
) -> Provider:
    """Convenience constructor for an offline provider."""
    if isinstance(script, dict):
        script = MockScript.from_dict(script)
    transport_kw = {
        k: kwargs.pop(k)
        for k in ("embeddings", "failures", "failure_error", "embed_fails")
        if k in kwargs
    }
    provider_kw = {k: kwargs.pop(k) for k in ("counter", "run_log", "resume") if k in kwargs}
    config = ProviderConfig(
        name=name, model="mock", kind="mock", endpoint="", max_context_tokens=max_context_tokens,
        retry=RetryPolicy(backoff_base=0.0), **kwargs,
    )
    transport = MockTransport(script=script, responder=responder, **transport_kw)
    return Provider(config, transport, sleep=lambda s: None, **provider_kw)


def cosine(a: Iterable[float], b: Iterable[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
