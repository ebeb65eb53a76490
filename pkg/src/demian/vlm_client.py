"""Chat-completions transport with retries, backoff, and rate limiting.

Two implementations share one retry shell: an HTTP client speaking the
OpenAI-compatible wire format, and a deterministic mock scripted per
(segment_id, aspect). All timing flows through an injectable clock so tests
run entirely on virtual time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "DEMIAN_API_KEY"
DEFAULT_MODEL_ID = "qwen3-vl-30b-a3b-instruct"
MOCK_INPUT_TOKENS = 8200


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock:
    """Clock whose sleep() advances time instantly; thread-safe.

    Sleeps are logged so tests can assert on backoff and rate-limit delays.
    """

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()
        self.sleeps: list[float] = []

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError(f"cannot sleep {seconds}s")
        with self._lock:
            self._now += seconds
            self.sleeps.append(seconds)


class ClientError(Exception):
    """Base for transport-level failures."""


class TransientClientError(ClientError):
    """Retryable: HTTP 429, 5xx, timeouts, connection drops."""


class PermanentClientError(ClientError):
    """Not retryable: 4xx other than 429, contract violations."""


def _env_api_key() -> str | None:
    return os.environ.get(API_KEY_ENV)


@dataclass(frozen=True)
class ClientConfig:
    endpoint_url: str = ""
    model_id: str = DEFAULT_MODEL_ID
    # Secret hygiene: the key comes from the environment only; it is never a
    # CLI flag or config-file entry, and repr never shows it.
    api_key: str | None = field(default_factory=_env_api_key, repr=False)
    max_retries: int = 3
    base_backoff: float = 1.0
    rate_limit: float = 4.0
    timeout: float = 120.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.rate_limit <= 0:
            raise ValueError(f"rate_limit must be > 0, got {self.rate_limit}")
        if self.base_backoff < 0:
            raise ValueError(f"base_backoff must be >= 0, got {self.base_backoff}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")


@dataclass(frozen=True)
class VlmRequest:
    frames: tuple[str, ...]
    system_text: str
    user_text: str
    max_output_tokens: int = 256
    # Carries segment_id/aspect so the mock can key scripted outcomes.
    metadata: Mapping[str, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class VlmResponse:
    raw_text: str
    input_tokens: int
    output_tokens: int
    latency: float


class VlmClient:
    """Retry/backoff/rate-limit shell; subclasses implement _attempt().

    Shareable across worker threads: the rate limiter and per-key retry state
    are internally synchronized.
    """

    def __init__(
        self,
        config: ClientConfig,
        clock: Clock | None = None,
        jitter_rng: random.Random | None = None,
    ):
        self.config = config
        self.clock: Clock = clock if clock is not None else SystemClock()
        self._jitter = jitter_rng if jitter_rng is not None else random.Random()
        self._gate = threading.Lock()
        self._next_start = float("-inf")

    def _acquire_slot(self) -> None:
        # Minimum start-to-start spacing of 1/rate_limit seconds; this keeps
        # every 1-second window at or below ceil(rate_limit) request starts.
        # The part-per-billion surplus keeps that bound intact when 1/rate
        # rounds down (e.g. 7 * (1/7) < 1 in doubles) and under the rounding
        # drift of repeated additions; it is far below any clock resolution.
        spacing = (1.0 / self.config.rate_limit) * (1.0 + 1e-9)
        with self._gate:
            now = self.clock.now()
            wait = self._next_start - now
            self._next_start = max(now, self._next_start) + spacing
        if wait > 0:
            self.clock.sleep(wait)

    def complete(self, req: VlmRequest) -> VlmResponse:
        attempt = 0
        while True:
            self._acquire_slot()
            try:
                return self._attempt(req)
            except TransientClientError as exc:
                if attempt >= self.config.max_retries:
                    raise
                delay = self.config.base_backoff * (2**attempt)
                delay *= self._jitter.uniform(0.8, 1.2)
                logger.debug(
                    "transient failure (%s), retry %d/%d after %.3fs",
                    exc,
                    attempt + 1,
                    self.config.max_retries,
                    delay,
                )
                self.clock.sleep(delay)
                attempt += 1

    def _attempt(self, req: VlmRequest) -> VlmResponse:
        raise NotImplementedError


def _chat_payload(model_id: str, req: VlmRequest) -> dict:
    content: list[dict] = [{"type": "text", "text": req.user_text}]
    for frame in req.frames:
        content.append({"type": "image_url", "image_url": {"url": frame}})
    messages = []
    if req.system_text:
        messages.append({"role": "system", "content": req.system_text})
    messages.append({"role": "user", "content": content})
    return {"model": model_id, "messages": messages, "max_tokens": req.max_output_tokens}


class HttpVlmClient(VlmClient):
    """POSTs to {endpoint_url}/chat/completions in the OpenAI JSON shape."""

    def __init__(
        self,
        config: ClientConfig,
        clock: Clock | None = None,
        jitter_rng: random.Random | None = None,
        session=None,
    ):
        super().__init__(config, clock=clock, jitter_rng=jitter_rng)
        if not config.endpoint_url:
            raise ValueError("endpoint_url is required for the HTTP client")
        self._session = session if session is not None else requests.Session()

    def _attempt(self, req: VlmRequest) -> VlmResponse:
        url = self.config.endpoint_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        started = self.clock.now()
        try:
            resp = self._session.post(
                url,
                json=_chat_payload(self.config.model_id, req),
                headers=headers,
                timeout=self.config.timeout,
            )
        except requests.Timeout as exc:
            raise TransientClientError(f"timeout after {self.config.timeout}s") from exc
        except requests.RequestException as exc:
            raise TransientClientError(str(exc)) from exc
        latency = self.clock.now() - started
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientClientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise PermanentClientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage") or {}
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise PermanentClientError(f"malformed completion body: {exc}") from exc
        return VlmResponse(
            raw_text=text,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            latency=latency,
        )


@dataclass(frozen=True)
class MockOutcome:
    """Scripted behaviour for one (segment_id, aspect) key.

    error_kind:
      transient / timeout  always fail retryably
      permanent            fail non-retryably
      crash                raise RuntimeError (simulates an unexpected fault)
      malformed            return non-JSON text
      wrong_aspect         return the JSON with a swapped aspect name
      over_cap             return a three-sentence caption
    fail_times: that many transient failures before the scripted success.
    """

    caption: str | None = None
    error_kind: str | None = None
    fail_times: int = 0
    latency: float = 0.0
    input_tokens: int | None = None
    output_tokens: int | None = None


def _derived_caption(key: str) -> str:
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:8]
    return f"Deterministic mock caption {digest}. Second sentence closes it."


def estimate_output_tokens(caption: str) -> int:
    # Crude 4-tokens-per-3-words estimate; enough for accounting tests.
    return max(1, math.ceil(len(caption.split()) * 4 / 3))


class MockVlmClient(VlmClient):
    """Deterministic stand-in keyed by (segment_id, aspect) request metadata.

    Lookup misses produce a hash-derived valid two-sentence caption, so any
    corpus can be "annotated" without a script. Defaults to a virtual clock.
    """

    def __init__(
        self,
        config: ClientConfig | None = None,
        script: Mapping[tuple[str, str], MockOutcome] | None = None,
        clock: Clock | None = None,
        jitter_rng: random.Random | None = None,
    ):
        super().__init__(
            config if config is not None else ClientConfig(endpoint_url="mock://"),
            clock=clock if clock is not None else VirtualClock(),
            jitter_rng=jitter_rng if jitter_rng is not None else random.Random(0),
        )
        self._script = dict(script) if script else {}
        self._attempts: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def _attempt(self, req: VlmRequest) -> VlmResponse:
        meta = req.metadata or {}
        segment_id = meta.get("segment_id", "")
        aspect = meta.get("aspect", "")
        key = (segment_id, aspect)
        outcome = self._script.get(key, MockOutcome())
        with self._lock:
            self._attempts[key] = self._attempts.get(key, 0) + 1
            attempt_no = self._attempts[key]

        if outcome.error_kind in ("transient", "timeout"):
            raise TransientClientError(f"scripted {outcome.error_kind} for {key}")
        if outcome.error_kind == "permanent":
            raise PermanentClientError(f"scripted permanent failure for {key}")
        if outcome.error_kind == "crash":
            raise RuntimeError(f"scripted crash for {key}")
        if attempt_no <= outcome.fail_times:
            raise TransientClientError(
                f"scripted transient failure {attempt_no}/{outcome.fail_times} for {key}"
            )

        if outcome.latency > 0:
            self.clock.sleep(outcome.latency)

        caption = outcome.caption
        if caption is None:
            caption = _derived_caption(f"{segment_id}:{aspect}")
        aspect_field = aspect or "unknown"
        if outcome.error_kind == "malformed":
            raw_text = f"Sure! Here is the caption: {caption}"
        elif outcome.error_kind == "wrong_aspect":
            raw_text = json.dumps({"aspect": aspect_field + "_other", "caption": caption})
        elif outcome.error_kind == "over_cap":
            raw_text = json.dumps(
                {"aspect": aspect_field, "caption": "One. Two. Three sentences here."}
            )
        elif outcome.error_kind is None:
            raw_text = json.dumps({"aspect": aspect_field, "caption": caption})
        else:
            raise ValueError(f"unknown scripted error_kind {outcome.error_kind!r}")

        return VlmResponse(
            raw_text=raw_text,
            input_tokens=outcome.input_tokens if outcome.input_tokens is not None else MOCK_INPUT_TOKENS,
            output_tokens=outcome.output_tokens
            if outcome.output_tokens is not None
            else estimate_output_tokens(caption),
            latency=outcome.latency,
        )
