#!/usr/bin/env python3
"""
Chat Completion Gateway

Client for an OpenAI-compatible /chat/completions endpoint with image
content parts. Frames travel as base64 data URLs inside the user message,
each preceded by a one-line caption when captions are enabled.

Retry policy:
- 429 and 5xx: retried, honouring Retry-After when present
- Other 4xx: BadRequest, never retried
- Network errors and timeouts: exponential backoff (1s, 2s, 4s, ...)
- Exhausted retries: ModelUnavailable
"""

import base64
import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timezone
from email.utils import parsedate_to_datetime
from typing import Callable, List, Optional, Protocol, Tuple

logger = logging.getLogger("vtts.gateway")


class GatewayError(Exception):
    """Base class for model and media I/O errors."""


class ModelUnavailable(GatewayError):
    """The endpoint could not be reached within the retry budget."""


class BadRequest(GatewayError):
    """The endpoint rejected the request (4xx other than 429)."""

    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP Error {status}: {message}")
        self.status = status


class DecodeFailed(GatewayError):
    """The frame decoder command failed for one timestamp."""

    def __init__(self, timestamp: Optional[float], diagnostics: str):
        where = f" at {timestamp:.3f}s" if timestamp is not None else ""
        super().__init__(f"Decode failed{where}: {diagnostics}")
        self.timestamp = timestamp
        self.diagnostics = diagnostics


class MediaProbeFailed(GatewayError):
    """Duration or dims of a media file could not be determined."""


@dataclass(frozen=True)
class ModelEndpoint:
    """Where and how to reach the served model."""
    base_url: str
    model: str
    token_env: str = "VTTS_API_TOKEN"
    timeout_ms: int = 60000
    max_retries: int = 3
    max_in_flight: int = 8
    backoff_base: float = 1.0
    temperature: float = 0.0
    max_tokens: Optional[int] = None

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("base_url must be set")
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be > 0, got {self.timeout_ms}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {self.max_in_flight}")

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


@dataclass(frozen=True)
class EncodedImage:
    mime: str
    data: bytes

    @property
    def data_url(self) -> str:
        return f"data:{self.mime};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class ChatRequest:
    """A rendered prompt plus ordered images (and optional per-image captions)."""
    prompt: str
    images: Tuple[EncodedImage, ...] = ()
    image_captions: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.image_captions and len(self.image_captions) != len(self.images):
            raise ValueError("image_captions must match images one-to-one")

    def content_parts(self) -> List[dict]:
        parts = [{"type": "text", "text": self.prompt}]
        for i, image in enumerate(self.images):
            if self.image_captions:
                parts.append({"type": "text", "text": self.image_captions[i]})
            parts.append({"type": "image_url", "image_url": {"url": image.data_url}})
        return parts


class ChatModel(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


def parse_retry_after(value: Optional[str], default: float) -> float:
    """Seconds to wait from a Retry-After header (delta-seconds or HTTP date)."""
    if not value:
        return default
    try:
        return max(0.0, float(int(value)))
    except ValueError:
        pass
    try:
        retry_date = parsedate_to_datetime(value)
        return max(0.0, (retry_date - datetime.now(timezone.utc)).total_seconds())
    except (ValueError, TypeError):
        return default


def extract_message_text(body: dict) -> str:
    """choices[0].message.content as text; list-of-parts content is joined."""
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ModelUnavailable(f"Malformed completion body: {json.dumps(body)[:200]}")
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return content or ""


class ChatCompletionClient:
    """Synchronous client; safe to share between threads."""

    def __init__(self, endpoint: ModelEndpoint, token: Optional[str] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.token = token or os.environ.get(endpoint.token_env)
        self._sleep = sleep

    def build_payload(self, request: ChatRequest) -> bytes:
        body = {
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": request.content_parts()}],
            "temperature": self.endpoint.temperature,
        }
        if self.endpoint.max_tokens is not None:
            body["max_tokens"] = self.endpoint.max_tokens
        return json.dumps(body).encode("utf-8")

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def complete(self, request: ChatRequest) -> str:
        # Serialized once so every retry sends identical bytes
        payload = self.build_payload(request)
        attempts = self.endpoint.max_retries + 1
        timeout = self.endpoint.timeout_ms / 1000.0

        for attempt in range(attempts):
            req = urllib.request.Request(self.endpoint.url, data=payload, headers=self._headers(), method="POST")
            last = attempt == attempts - 1
            try:
                with urllib.request.urlopen(req, timeout=timeout) as resp:
                    return extract_message_text(json.loads(resp.read().decode("utf-8")))
            except urllib.error.HTTPError as e:
                if e.code == 429 or e.code >= 500:
                    if last:
                        raise ModelUnavailable(f"HTTP Error {e.code} after {attempts} attempts")
                    wait_time = parse_retry_after(
                        e.headers.get("Retry-After") if e.headers else None,
                        self.endpoint.backoff_base * 2 ** attempt,
                    )
                    label = "Rate limited" if e.code == 429 else f"Server error {e.code}"
                    logger.warning("%s. Waiting %.1fs before retry %d/%d...",
                                   label, wait_time, attempt + 1, self.endpoint.max_retries)
                    self._sleep(wait_time)
                    continue
                raise BadRequest(e.code, str(e.reason))
            except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as e:
                if last:
                    reason = getattr(e, "reason", e)
                    raise ModelUnavailable(f"Network Error: {reason}")
                wait_time = self.endpoint.backoff_base * 2 ** attempt
                logger.warning("Network error. Retrying in %.1fs... (%d/%d)",
                               wait_time, attempt + 1, self.endpoint.max_retries)
                self._sleep(wait_time)
            except json.JSONDecodeError as e:
                raise ModelUnavailable(f"Endpoint returned invalid JSON: {e}")

        raise ModelUnavailable(f"Failed after {attempts} attempts")


@dataclass
class InFlightLimiter:
    """
    Caps concurrent outstanding requests to a wrapped model and records the
    highest concurrency it ever saw.
    """
    model: ChatModel
    max_in_flight: int = 8
    in_flight: int = 0
    high_water: int = 0
    _semaphore: threading.BoundedSemaphore = field(init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        self._semaphore = threading.BoundedSemaphore(self.max_in_flight)

    def complete(self, request: ChatRequest) -> str:
        with self._semaphore:
            with self._lock:
                self.in_flight += 1
                self.high_water = max(self.high_water, self.in_flight)
            try:
                return self.model.complete(request)
            finally:
                with self._lock:
                    self.in_flight -= 1
