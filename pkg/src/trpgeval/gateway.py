"""Chat-completion backends: remote HTTP, scripted playback, and a persistent cache.

Every request is identified by a SHA-256 digest over the model name, the
ordered messages and the sampling parameters. Scripted playback and the
cache are both keyed on that digest, which is what makes a recorded run
replay byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx

log = logging.getLogger(__name__)

API_KEY_ENV = "ANTEVAL_API_KEY"


class GatewayError(RuntimeError):
    """Base class for every failure raised by a backend."""


class TransportError(GatewayError):
    pass


class GatewayTimeout(GatewayError):
    pass


class ScriptMiss(GatewayError):
    def __init__(self, digest: str):
        super().__init__(f"no scripted response left for request digest {digest}")
        self.digest = digest


class MessageRole(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: MessageRole
    content: str

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role.value, "content": self.content}

    @classmethod
    def from_dict(cls, data: dict) -> "ChatMessage":
        return cls(MessageRole(data["role"]), data["content"])


def system(content: str) -> ChatMessage:
    return ChatMessage(MessageRole.SYSTEM, content)


def user(content: str) -> ChatMessage:
    return ChatMessage(MessageRole.USER, content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage(MessageRole.ASSISTANT, content)


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    max_tokens: Optional[int] = None
    seed: Optional[int] = None

    def with_seed(self, seed: Optional[int]) -> "Sampling":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        out: dict = {"temperature": self.temperature}
        if self.max_tokens is not None:
            out["max_tokens"] = self.max_tokens
        if self.seed is not None:
            out["seed"] = self.seed
        return out


# evaluation prompts (summaries, matching, DM prediction) vs. generation prompts
EVAL_SAMPLING = Sampling(temperature=0.0)
GENERATION_SAMPLING = Sampling(temperature=1.0)


class BackendKind(str, Enum):
    REMOTE = "remote"
    SCRIPTED = "scripted"
    CACHED = "cached"


@dataclass(frozen=True)
class BackendSpec:
    kind: BackendKind
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    script_path: Optional[Path] = None
    cache_path: Optional[Path] = None
    max_parallel: int = 4
    timeout: float = 60.0
    retry_limit: int = 3
    backoff: float = 0.5

    def violations(self) -> list[str]:
        out = []
        if self.kind is BackendKind.REMOTE and not (self.endpoint and self.model_name):
            out.append("remote backend needs endpoint and model_name")
        if self.kind is BackendKind.SCRIPTED and not self.script_path:
            out.append("scripted backend needs script_path")
        if self.kind is BackendKind.CACHED:
            if not self.cache_path:
                out.append("cached backend needs cache_path")
            if not (self.script_path or (self.endpoint and self.model_name)):
                out.append("cached backend needs a remote endpoint/model or a script to wrap")
        if self.max_parallel < 1:
            out.append("max_parallel must be >= 1")
        if self.retry_limit < 0:
            out.append("retry_limit must be >= 0")
        return out

    @property
    def label(self) -> str:
        return self.model_name or ""


@dataclass(frozen=True)
class CompletionRecord:
    request_digest: str
    response: str
    latency: float = 0.0
    token_counts: Optional[dict[str, int]] = None


def request_digest(model_name: Optional[str], messages: Sequence[ChatMessage], sampling: Sampling) -> str:
    payload = {
        "model": model_name or "",
        "messages": [m.to_dict() for m in messages],
        "sampling": sampling.to_dict(),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def check_messages(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role not in (MessageRole.SYSTEM, MessageRole.USER):
        raise ValueError("first message must be a system or user message")
    for m in messages:
        if not isinstance(m.role, MessageRole):
            raise ValueError(f"invalid role {m.role!r}")
        if not m.content and m.role is not MessageRole.ASSISTANT:
            raise ValueError(f"empty {m.role.value} message")


class Backend:
    """Common call path: validation, digesting and the in-flight bound."""

    def __init__(self, model_name: Optional[str] = None, max_parallel: int = 4):
        if max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        self.model_name = model_name
        self.max_parallel = max_parallel
        self._slots = threading.BoundedSemaphore(max_parallel)
        self.calls = 0
        self._count_lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], sampling: Sampling = EVAL_SAMPLING) -> str:
        return self.complete_record(messages, sampling).response

    def complete_record(self, messages: Sequence[ChatMessage], sampling: Sampling = EVAL_SAMPLING) -> CompletionRecord:
        check_messages(messages)
        digest = request_digest(self.model_name, messages, sampling)
        with self._slots:
            with self._count_lock:
                self.calls += 1
            start = time.perf_counter()
            text, tokens = self._call(digest, list(messages), sampling)
            latency = time.perf_counter() - start
        return CompletionRecord(digest, text, latency, tokens)

    def _call(self, digest: str, messages: list[ChatMessage], sampling: Sampling) -> tuple[str, Optional[dict]]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class CallableBackend(Backend):
    """Wraps a plain ``fn(messages, sampling) -> str``; useful for local models and stubs."""

    def __init__(self, fn: Callable[[list[ChatMessage], Sampling], str], model_name: Optional[str] = None, max_parallel: int = 4):
        super().__init__(model_name, max_parallel)
        self.fn = fn

    def _call(self, digest, messages, sampling):
        return self.fn(messages, sampling), None


class RemoteBackend(Backend):
    """Chat-completions over HTTP with retry and exponential backoff."""

    RETRY_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        *,
        api_key: Optional[str] = None,
        max_parallel: int = 4,
        timeout: float = 60.0,
        retry_limit: int = 3,
        backoff: float = 0.5,
    ):
        super().__init__(model_name, max_parallel)
        self.endpoint = endpoint
        self.retry_limit = retry_limit
        self.backoff = backoff
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def _call(self, digest, messages, sampling):
        body = {"model": self.model_name, "messages": [m.to_dict() for m in messages]}
        body.update(sampling.to_dict())
        last: Optional[Exception] = None
        for attempt in range(self.retry_limit + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.endpoint, json=body)
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(f"request timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last = TransportError(f"transport failure: {exc}")
                continue
            if resp.status_code in self.RETRY_STATUS:
                last = TransportError(f"HTTP {resp.status_code} from {self.endpoint}")
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
            return _parse_completion(resp)
        assert last is not None
        log.warning("giving up after %d attempts: %s", self.retry_limit + 1, last)
        raise last

    def close(self) -> None:
        self._client.close()


def _parse_completion(resp: httpx.Response) -> tuple[str, Optional[dict]]:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"unexpected response body: {resp.text[:200]}") from exc
    usage = data.get("usage")
    tokens = None
    if isinstance(usage, dict):
        tokens = {k: int(v) for k, v in usage.items() if isinstance(v, int)}
    return content or "", tokens


class ScriptedBackend(Backend):
    """Plays back a recorded script.

    Responses are looked up by request digest; repeated identical requests
    consume the recorded responses for that digest in ordinal order.
    """

    def __init__(self, entries: Sequence[dict], model_name: Optional[str] = None, max_parallel: int = 4):
        super().__init__(model_name, max_parallel)
        self._queues: dict[str, deque[str]] = defaultdict(deque)
        for e in sorted(entries, key=lambda e: e["ordinal"]):
            self._queues[e["digest_hex"]].append(e["response"])
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str, model_name: Optional[str] = None, max_parallel: int = 4) -> "ScriptedBackend":
        return cls(read_script(path), model_name, max_parallel)

    @classmethod
    def from_responses(cls, pairs: Sequence[tuple[str, str]], model_name: Optional[str] = None) -> "ScriptedBackend":
        return cls([{"ordinal": i, "digest_hex": d, "response": r} for i, (d, r) in enumerate(pairs)], model_name)

    def remaining(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def _call(self, digest, messages, sampling):
        with self._lock:
            queue = self._queues.get(digest)
            if not queue:
                raise ScriptMiss(digest)
            return queue.popleft(), None


class CachedBackend(Backend):
    """Consults a JSON-lines cache by digest before delegating to ``inner``."""

    def __init__(self, inner: Backend, cache_path: Path | str, max_parallel: Optional[int] = None):
        super().__init__(inner.model_name, max_parallel or inner.max_parallel)
        self.inner = inner
        self.cache_path = Path(cache_path)
        self._cache: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.cache_path.exists():
            with self.cache_path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._cache[rec["digest_hex"]] = rec["response"]

    def _call(self, digest, messages, sampling):
        with self._lock:
            hit = self._cache.get(digest)
        if hit is not None:
            return hit, None
        rec = self.inner.complete_record(messages, sampling)
        if rec.request_digest != digest:
            raise GatewayError("inner backend computed a different digest; model names differ")
        with self._lock:
            if digest not in self._cache:
                self._cache[digest] = rec.response
                self.cache_path.parent.mkdir(parents=True, exist_ok=True)
                with self.cache_path.open("a", encoding="utf-8") as fh:
                    fh.write(_jsonl({"digest_hex": digest, "response": rec.response}))
        return rec.response, rec.token_counts

    def close(self) -> None:
        self.inner.close()


class RecordingBackend(Backend):
    """Appends every (ordinal, digest, response) triple to a script file."""

    def __init__(self, inner: Backend, out: Path | str):
        super().__init__(inner.model_name, inner.max_parallel)
        self.inner = inner
        self.path = Path(out)
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            existing = read_script(self.path) if self.path.exists() else []
            self.path.touch()
        except OSError as exc:
            raise GatewayError(f"cannot write script file {self.path}: {exc}") from exc
        self._ordinal = max((e["ordinal"] for e in existing), default=-1) + 1

    def _call(self, digest, messages, sampling):
        rec = self.inner.complete_record(messages, sampling)
        with self._lock:
            entry = {"ordinal": self._ordinal, "digest_hex": digest, "response": rec.response}
            self._ordinal += 1
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(_jsonl(entry))
        return rec.response, rec.token_counts

    def close(self) -> None:
        self.inner.close()


def read_script(path: Path | str) -> list[dict]:
    entries = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append({"ordinal": int(rec["ordinal"]), "digest_hex": rec["digest_hex"], "response": rec["response"]})
            except (ValueError, KeyError, TypeError) as exc:
                raise GatewayError(f"{path}:{lineno}: malformed script record") from exc
    return entries


def _jsonl(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"


def open_backend(spec: BackendSpec) -> Backend:
    problems = spec.violations()
    if problems:
        raise ValueError("; ".join(problems))
    if spec.kind is BackendKind.REMOTE:
        return RemoteBackend(
            spec.endpoint, spec.model_name,
            max_parallel=spec.max_parallel, timeout=spec.timeout,
            retry_limit=spec.retry_limit, backoff=spec.backoff,
        )
    if spec.kind is BackendKind.SCRIPTED:
        return ScriptedBackend.from_file(spec.script_path, spec.model_name, spec.max_parallel)
    if spec.script_path:
        inner: Backend = ScriptedBackend.from_file(spec.script_path, spec.model_name, spec.max_parallel)
    else:
        inner = open_backend(replace(spec, kind=BackendKind.REMOTE))
    return CachedBackend(inner, spec.cache_path)


def complete(spec_or_backend: BackendSpec | Backend, messages: Sequence[ChatMessage], sampling: Sampling = EVAL_SAMPLING) -> str:
    if isinstance(spec_or_backend, Backend):
        return spec_or_backend.complete(messages, sampling)
    backend = open_backend(spec_or_backend)
    try:
        return backend.complete(messages, sampling)
    finally:
        backend.close()


def record_script(spec: BackendSpec, out: Path | str) -> RecordingBackend:
    """Open ``spec`` wrapped so that every call is appended to a replayable script."""
    if spec.kind is BackendKind.SCRIPTED:
        raise ValueError("recording requires a remote or cached backend")
    return RecordingBackend(open_backend(spec), out)


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary parts; independent of PYTHONHASHSEED."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") & (2**63 - 1)
