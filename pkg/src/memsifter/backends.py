"""Chat and embedding backends: shared retry/concurrency machinery, an
OpenAI-style HTTP implementation, and the deterministic mocks the test
suite and --mock CLI paths run on.

Environment variables for the HTTP backends:
    MEMSIFTER_API_KEY     bearer token for both endpoints
    MEMSIFTER_API_BASE    chat completions base URL
    MEMSIFTER_EMBED_BASE  embeddings base URL (defaults to MEMSIFTER_API_BASE)
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import BackendError, ContextOverflowError, InvalidArgument
from .store import session_tag_present

logger = logging.getLogger(__name__)

Message = tuple[str, str]  # (role, content)


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call. ``messages`` is (role, content) pairs."""

    messages: tuple[Message, ...]
    max_output_tokens: int = 4096
    temperature: float = 0.0
    model: str = "default"

    def __post_init__(self) -> None:
        if not self.messages:
            raise InvalidArgument("chat request has no messages")
        if self.temperature < 0:
            raise InvalidArgument(f"temperature must be >= 0, got {self.temperature}")

    def cache_key(self) -> str:
        body = json.dumps(
            {
                "messages": list(self.messages),
                "max_output_tokens": self.max_output_tokens,
                "temperature": self.temperature,
            },
            ensure_ascii=False,
        )
        return f"{self.model}:{hashlib.sha256(body.encode('utf-8')).hexdigest()}"


def user_request(content: str, **kwargs) -> ChatRequest:
    return ChatRequest(messages=(("user", content),), **kwargs)


@dataclass(frozen=True)
class BackendPolicy:
    """Retry, backoff, concurrency and timeout limits for one backend."""

    max_retries: int = 3
    backoff_base_ms: int = 250
    max_concurrency: int = 4
    timeout_ms: int = 60_000

    def __post_init__(self) -> None:
        for name in ("max_retries", "backoff_base_ms", "max_concurrency", "timeout_ms"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"policy field {name} must be positive")


class _RetryingBackend:
    """Shared retry loop: exponential backoff with jitter, bounded concurrency.

    Subclasses implement the single-attempt call; this class guarantees at
    most ``policy.max_retries`` retries, non-decreasing delays, and at most
    ``policy.max_concurrency`` attempts in flight per instance.
    """

    def __init__(self, policy: BackendPolicy | None = None, seed: int | None = None):
        self.policy = policy or BackendPolicy()
        self._semaphore = threading.BoundedSemaphore(self.policy.max_concurrency)
        self._rng = random.Random(seed)
        self.retry_log: list[tuple[int, float]] = []  # (attempt, delay_ms)

    def _sleep_ms(self, ms: float) -> None:
        time.sleep(ms / 1000.0)

    def _call_with_retries(self, attempt_fn):
        last_error: BackendError | None = None
        for attempt in range(self.policy.max_retries + 1):
            if attempt > 0:
                # doubling dominates the <=1.5x jitter, so delays never shrink
                delay_ms = self.policy.backoff_base_ms * (2 ** (attempt - 1))
                delay_ms *= 1.0 + self._rng.uniform(0.0, 0.5)
                self.retry_log.append((attempt, delay_ms))
                self._sleep_ms(delay_ms)
            try:
                with self._semaphore:
                    return attempt_fn()
            except BackendError as exc:
                if not exc.retryable:
                    raise
                last_error = exc
                logger.warning("transient backend failure (attempt %d): %s", attempt + 1, exc)
        raise BackendError(
            f"retry budget exhausted after {self.policy.max_retries} retries: {last_error}",
            kind="transient",
            status=last_error.status if last_error else None,
        )


class ChatBackend(_RetryingBackend):
    """Contract for chat-completion providers."""

    def chat_complete(self, req: ChatRequest) -> str:
        """Return the model's text for ``req``, retrying transient failures."""
        return self._call_with_retries(lambda: self._complete(req))

    def _complete(self, req: ChatRequest) -> str:
        raise NotImplementedError


class EmbeddingBackend(_RetryingBackend):
    """Contract for embedding providers. One vector per input text."""

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            raise InvalidArgument("embed() requires at least one text")
        return self._call_with_retries(lambda: self._embed(texts))

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; zero-norm inputs yield 0.0."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# --------------------------------------------------------------------------
# HTTP backends (OpenAI-compatible wire shape)
# --------------------------------------------------------------------------

_CONTEXT_OVERFLOW_MARKERS = ("context_length", "context length", "maximum context", "too many tokens")


def _classify_http_error(status: int, body: str) -> BackendError:
    lowered = body.lower()
    if status == 400 and any(marker in lowered for marker in _CONTEXT_OVERFLOW_MARKERS):
        return ContextOverflowError(f"context window exceeded: {body[:200]}", status=status)
    if status in (408, 429) or status >= 500:
        return BackendError(f"HTTP {status}: {body[:200]}", kind="transient", status=status)
    return BackendError(f"HTTP {status}: {body[:200]}", kind="fatal", status=status)


class HttpChatBackend(ChatBackend):
    """Chat completions over HTTPS: messages array in, choices out."""

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        policy: BackendPolicy | None = None,
    ):
        super().__init__(policy)
        self.model = model
        self.base_url = (base_url or os.environ.get("MEMSIFTER_API_BASE", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("MEMSIFTER_API_KEY", "")
        if not self.base_url:
            raise InvalidArgument("no base URL: pass base_url or set MEMSIFTER_API_BASE")

    def _complete(self, req: ChatRequest) -> str:
        import requests

        payload = {
            "model": self.model if req.model == "default" else req.model,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.policy.timeout_ms / 1000.0,
            )
        except requests.RequestException as exc:
            raise BackendError(f"request failed: {exc}", kind="transient") from exc
        if resp.status_code != 200:
            raise _classify_http_error(resp.status_code, resp.text)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"malformed completion response: {exc}", kind="fatal") from exc


class HttpEmbeddingBackend(EmbeddingBackend):
    """Embeddings over HTTPS; inputs are batched into a single request."""

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        policy: BackendPolicy | None = None,
    ):
        super().__init__(policy)
        self.model = model
        self.base_url = (
            base_url
            or os.environ.get("MEMSIFTER_EMBED_BASE")
            or os.environ.get("MEMSIFTER_API_BASE", "")
        ).rstrip("/")
        self.api_key = api_key or os.environ.get("MEMSIFTER_API_KEY", "")
        if not self.base_url:
            raise InvalidArgument("no base URL: pass base_url or set MEMSIFTER_EMBED_BASE")

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": texts},
                headers=headers,
                timeout=self.policy.timeout_ms / 1000.0,
            )
        except requests.RequestException as exc:
            raise BackendError(f"request failed: {exc}", kind="transient") from exc
        if resp.status_code != 200:
            raise _classify_http_error(resp.status_code, resp.text)
        try:
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            return [np.asarray(d["embedding"], dtype=np.float64) for d in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed embedding response: {exc}", kind="fatal") from exc


class CachedChatBackend(ChatBackend):
    """Response cache over another chat backend.

    Only byte-identical requests (same model, messages and sampling
    parameters) hit the cache, so it is safe for reward evaluation where
    ablation contexts repeat across rollouts of the same task.
    """

    def __init__(self, inner: ChatBackend):
        super().__init__(inner.policy)
        self.inner = inner
        self._cache: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def chat_complete(self, req: ChatRequest) -> str:
        key = req.cache_key()
        with self._lock:
            if key in self._cache:
                self.hits += 1
                return self._cache[key]
        text = self.inner.chat_complete(req)
        with self._lock:
            self.misses += 1
            self._cache[key] = text
        return text


# --------------------------------------------------------------------------
# Deterministic mocks
# --------------------------------------------------------------------------


class ScriptedChatBackend(ChatBackend):
    """Plays back a queue of responses; an item may be an exception to raise.

    With ``loop=True`` the script repeats forever, which models a backend
    that always answers the same way.
    """

    def __init__(
        self,
        script: list[str | Exception],
        loop: bool = False,
        policy: BackendPolicy | None = None,
    ):
        super().__init__(policy)
        self.script = list(script)
        self.loop = loop
        self.calls: list[ChatRequest] = []
        self._cursor = 0
        self._lock = threading.Lock()

    def _complete(self, req: ChatRequest) -> str:
        with self._lock:
            self.calls.append(req)
            if self._cursor >= len(self.script):
                if not self.loop:
                    raise BackendError("scripted backend exhausted", kind="fatal")
                self._cursor = 0
            item = self.script[self._cursor]
            self._cursor += 1
        if isinstance(item, Exception):
            raise item
        return item


class InstrumentedChatBackend(ChatBackend):
    """Constant-response mock that records the peak number of in-flight calls."""

    def __init__(self, response: str = "ok", hold_s: float = 0.01, policy: BackendPolicy | None = None):
        super().__init__(policy)
        self.response = response
        self.hold_s = hold_s
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0

    def _complete(self, req: ChatRequest) -> str:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
        time.sleep(self.hold_s)
        with self._lock:
            self._in_flight -= 1
        return self.response


_TOKEN_RE = re.compile(r"[a-z0-9']+")


def _tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class KeywordEmbeddingBackend(EmbeddingBackend):
    """Bag-of-words embedding over a fixed hashed vocabulary of ``dim`` slots.

    Token counts are L2-normalized, so cosine similarity equals normalized
    keyword overlap (up to hash collisions). Identical texts always map to
    identical vectors; empty text maps to the zero vector.
    """

    def __init__(self, dim: int = 512, policy: BackendPolicy | None = None):
        super().__init__(policy)
        if dim < 1:
            raise InvalidArgument(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim

    def _slot(self, token: str) -> int:
        digest = hashlib.md5(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "big") % self.dim

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            vec = np.zeros(self.dim, dtype=np.float64)
            for tok in _tokens(text):
                vec[self._slot(tok)] += 1.0
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec /= norm
            out.append(vec)
        return out


def oracle_answer(
    context: str,
    gold_session_ids: frozenset[int] | set[int],
    gold_answer: str,
    wrong_answer: str = "I do not know.",
) -> str:
    """Answer correctly iff any gold session's tag appears in ``context``."""
    if any(session_tag_present(context, gid) for gid in gold_session_ids):
        return gold_answer
    return wrong_answer


_QUESTION_LINE_RE = re.compile(r"^Question: (.*)$", re.MULTILINE)

WRONG_ANSWER = "I do not know."


class OracleWorkingLLM(ChatBackend):
    """Working-LLM mock: answers correctly iff a gold session tag is in context.

    Keyed by the literal question text that the answer prompt carries, so a
    single instance can serve a whole dataset.
    """

    def __init__(
        self,
        answer_key: dict[str, tuple[frozenset[int], str]],
        wrong_answer: str = WRONG_ANSWER,
        policy: BackendPolicy | None = None,
    ):
        super().__init__(policy)
        self.answer_key = dict(answer_key)
        self.wrong_answer = wrong_answer

    @classmethod
    def for_question(
        cls, question: str, gold_session_ids: set[int], gold_answer: str, **kwargs
    ) -> "OracleWorkingLLM":
        return cls({question: (frozenset(gold_session_ids), gold_answer)}, **kwargs)

    def _complete(self, req: ChatRequest) -> str:
        content = req.messages[-1][1]
        questions = _QUESTION_LINE_RE.findall(content)
        if not questions:
            raise BackendError("oracle prompt carries no 'Question:' line", kind="fatal")
        question = questions[-1]
        if question not in self.answer_key:
            raise BackendError(f"oracle has no entry for question {question!r}", kind="fatal")
        gold_ids, gold_answer = self.answer_key[question]
        return oracle_answer(content, gold_ids, gold_answer, self.wrong_answer)


_SESSION_BLOCK_RE = re.compile(r"<session ?(\d+)>\n?(.*?)</session>", re.DOTALL)
_CONTEXT_LINE_RE = re.compile(r"^Current Chat Context: (.*)$", re.MULTILINE)


class KeywordProxyBackend(ChatBackend):
    """Proxy mock that ranks sessions by keyword overlap with the query.

    ``order="best"`` ranks by descending overlap (ties to the lower id);
    ``order="worst"`` emits the exact reverse, which buries the
    highest-overlap session at the bottom of the list.
    """

    def __init__(self, order: str = "best", policy: BackendPolicy | None = None):
        super().__init__(policy)
        if order not in ("best", "worst"):
            raise InvalidArgument(f"order must be 'best' or 'worst', got {order!r}")
        self.order = order

    def _complete(self, req: ChatRequest) -> str:
        prompt = req.messages[-1][1]
        blocks = _SESSION_BLOCK_RE.findall(prompt)
        if not blocks:
            raise BackendError("no session blocks found in prompt", kind="fatal")
        context_match = _CONTEXT_LINE_RE.search(prompt)
        query_tokens = set(_tokens(context_match.group(1))) if context_match else set()
        scored = []
        for sid, body in blocks:
            overlap = len(query_tokens & set(_tokens(body)))
            scored.append((-overlap, int(sid)))
        scored.sort()
        ranked = [sid for _, sid in scored]
        if self.order == "worst":
            ranked = ranked[::-1]
        ids = ",".join(str(s) for s in ranked)
        return f"<think>ranked {len(ranked)} sessions by keyword overlap</think><ranking>{ids}</ranking>"
