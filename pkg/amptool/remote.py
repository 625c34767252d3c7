"""HTTP plumbing for remote captioners: provider adapters, token bucket, retries."""
from __future__ import annotations

import base64
import logging
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, TypeVar

import requests
from openai import OpenAI

from .errors import BackendError, InvalidArgumentError, RefusalError, TransportError
from .utils import write_jsonl


logger = logging.getLogger(__name__)

T = TypeVar("T")

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})
REFUSAL_CODES = frozenset({"content_filter", "content_policy_violation", "ContentFiltered", "responsible_ai_policy"})
REFUSAL_PREFIXES = ("i'm sorry, but i can't", "i’m sorry, but i can’t", "i cannot help with", "i can't assist with")


class RetryableError(Exception):
    """Transient failure; the caller may try again."""

    def __init__(self, message: str, retry_after: Optional[float] = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class TokenBucket:
    """Thread-safe token bucket shared by every worker calling one captioner."""

    def __init__(self, rate_per_sec: float, capacity: Optional[int] = None,
                 clock: Callable[[], float] = time.monotonic) -> None:
        if rate_per_sec <= 0:
            raise InvalidArgumentError("rate_per_sec must be > 0")
        self.rate = float(rate_per_sec)
        self.capacity = int(capacity if capacity is not None else max(1, round(self.rate)))
        self._clock = clock
        self._tokens = float(self.capacity)
        self._last = clock()
        self._cv = threading.Condition(threading.Lock())

    def _refill_unlocked(self) -> None:
        now = self._clock()
        elapsed = now - self._last
        if elapsed > 0:
            self._tokens = min(self.capacity, self._tokens + elapsed * self.rate)
            self._last = now

    def acquire(self, n: int = 1) -> None:
        if n <= 0:
            return
        with self._cv:
            while True:
                self._refill_unlocked()
                if self._tokens >= n:
                    self._tokens -= n
                    return
                wait_s = (n - self._tokens) / self.rate
                self._cv.wait(timeout=min(wait_s, 0.5))

    def try_acquire(self, n: int = 1) -> bool:
        with self._cv:
            self._refill_unlocked()
            if self._tokens >= n:
                self._tokens -= n
                return True
            return False


@dataclass(frozen=True)
class RetryPolicy:
    base: float = 1.0
    factor: float = 2.0
    attempts: int = 5

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise InvalidArgumentError("retry attempts must be >= 1")
        if self.base < 0 or self.factor < 1:
            raise InvalidArgumentError("retry base must be >= 0 and factor >= 1")

    def delay(self, attempt: int) -> float:
        """Sleep before attempt ``attempt + 1`` (attempts are 1-based)."""
        return self.base * self.factor ** (attempt - 1)


def call_with_retry(
    fn: Callable[[], T],
    policy: RetryPolicy,
    captioner_id: str,
    sleep: Callable[[float], None] = time.sleep,
    on_attempt: Optional[Callable[[int, Optional[BaseException]], None]] = None,
) -> T:
    """Run ``fn`` with exponential backoff on ``RetryableError`` and connection errors.

    Refusals and other errors are not retried.
    """
    last: Optional[BaseException] = None
    for attempt in range(1, policy.attempts + 1):
        try:
            value = fn()
        except (RetryableError, requests.ConnectionError, requests.Timeout) as e:
            last = e
            if on_attempt:
                on_attempt(attempt, e)
            if attempt == policy.attempts:
                break
            delay = policy.delay(attempt)
            retry_after = getattr(e, "retry_after", None)
            if retry_after is not None:
                delay = max(delay, retry_after)
            logger.warning(f"{captioner_id}: attempt {attempt} failed ({e}); retrying in {delay:.1f}s")
            sleep(delay)
            continue
        if on_attempt:
            on_attempt(attempt, None)
        return value
    raise TransportError(captioner_id, policy.attempts, last)


def _retry_after(resp: requests.Response) -> Optional[float]:
    raw = resp.headers.get("Retry-After")
    try:
        return float(raw) if raw is not None else None
    except ValueError:
        return None


def _error_code(payload: object) -> Optional[str]:
    if isinstance(payload, dict):
        err = payload.get("error")
        if isinstance(err, dict):
            return err.get("code") or err.get("innererror", {}).get("code")
        if isinstance(err, str):
            return err
    return None


def looks_like_refusal(text: str) -> bool:
    return text.strip().lower().startswith(REFUSAL_PREFIXES)


def check_response(resp: requests.Response, captioner_id: str) -> dict:
    """Map an HTTP response onto retryable / refusal / backend errors."""
    if resp.status_code in RETRYABLE_STATUSES:
        raise RetryableError(f"HTTP {resp.status_code}", _retry_after(resp))
    try:
        payload = resp.json()
    except ValueError:
        payload = None
    if resp.status_code >= 400:
        code = _error_code(payload)
        if code in REFUSAL_CODES:
            raise RefusalError(captioner_id, f"({code})")
        raise BackendError(captioner_id, f"HTTP {resp.status_code}: {resp.text[:200]}")
    if not isinstance(payload, dict):
        raise BackendError(captioner_id, "response is not a JSON object")
    return payload


class ProviderAdapter(ABC):
    """Turns (PNG bytes, prompt) into one caption string for a provider schema."""

    captioner_id: str = "remote"

    @abstractmethod
    def caption(self, png: bytes, prompt: str) -> str:
        ...


class JsonCaptionAdapter(ProviderAdapter):
    """Generic endpoint: POST ``{"image": <base64 png>, "prompt": ...}`` -> ``{"caption": ...}``."""

    def __init__(self, captioner_id: str, endpoint: str, api_key: str = "", timeout: float = 60.0) -> None:
        self.captioner_id = captioner_id
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def caption(self, png: bytes, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        data = {"image": base64.b64encode(png).decode("ascii"), "prompt": prompt}
        resp = requests.post(self.endpoint, headers=headers, json=data, timeout=self.timeout)
        payload = check_response(resp, self.captioner_id)
        if payload.get("refused"):
            raise RefusalError(self.captioner_id, str(payload.get("reason", "")))
        caption = payload.get("caption")
        if not isinstance(caption, str):
            raise BackendError(self.captioner_id, "response has no 'caption' string")
        return caption


class AzureVisionAdapter(ProviderAdapter):
    """Azure-style image analysis (``features=caption``); the prompt is not sent."""

    api_version = "2023-10-01"

    def __init__(self, captioner_id: str, endpoint: str, api_key: str, timeout: float = 60.0) -> None:
        self.captioner_id = captioner_id
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def caption(self, png: bytes, prompt: str) -> str:
        url = f"{self.endpoint}/computervision/imageanalysis:analyze"
        headers = {
            "Ocp-Apim-Subscription-Key": self.api_key,
            "Content-Type": "application/octet-stream",
        }
        params = {"api-version": self.api_version, "features": "caption"}
        resp = requests.post(url, headers=headers, params=params, data=png, timeout=self.timeout)
        payload = check_response(resp, self.captioner_id)
        text = (payload.get("captionResult") or {}).get("text")
        if not isinstance(text, str):
            raise BackendError(self.captioner_id, "response has no captionResult.text")
        return text


class OpenAIChatAdapter(ProviderAdapter):
    """OpenAI-compatible chat completions with an inline PNG data URL."""

    def __init__(self, captioner_id: str, model: str, api_key: str, base_url: Optional[str] = None,
                 client: Optional[OpenAI] = None) -> None:
        self.captioner_id = captioner_id
        self.model = model
        # Only pass base_url if provided to allow library defaults
        if client is not None:
            self.client = client
        elif base_url:
            self.client = OpenAI(api_key=api_key, base_url=base_url)
        else:
            self.client = OpenAI(api_key=api_key)

    def caption(self, png: bytes, prompt: str) -> str:
        import openai

        url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
        messages = [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": url}},
            ],
        }]
        try:
            completion = self.client.chat.completions.create(model=self.model, messages=messages)
        except (openai.RateLimitError, openai.APIConnectionError, openai.APITimeoutError,
                openai.InternalServerError) as e:
            raise RetryableError(str(e)) from e
        except openai.BadRequestError as e:
            if getattr(e, "code", None) in REFUSAL_CODES:
                raise RefusalError(self.captioner_id, f"({e.code})") from e
            raise BackendError(self.captioner_id, str(e)) from e
        choice = completion.choices[0]
        if choice.finish_reason == "content_filter" or getattr(choice.message, "refusal", None):
            raise RefusalError(self.captioner_id, "(content_filter)")
        return choice.message.content or ""


@dataclass
class LedgerEntry:
    captioner_id: str
    digest: str
    prompt: str
    attempt: int
    outcome: str
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


class RequestLedger:
    """Every outbound request attempt, for rate/cost auditing."""

    def __init__(self) -> None:
        self._entries: List[LedgerEntry] = []
        self._lock = threading.Lock()

    def record(self, captioner_id: str, digest: str, prompt: str, attempt: int, outcome: str) -> None:
        with self._lock:
            self._entries.append(LedgerEntry(captioner_id, digest, prompt, attempt, outcome))

    @property
    def entries(self) -> List[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def total(self, captioner_id: Optional[str] = None) -> int:
        return sum(1 for e in self.entries if captioner_id is None or e.captioner_id == captioner_id)

    def unique_keys(self) -> set[Tuple[str, str, str]]:
        return {(e.captioner_id, e.digest, e.prompt) for e in self.entries}

    def per_captioner(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for e in self.entries:
            counts[e.captioner_id] = counts.get(e.captioner_id, 0) + 1
        return counts

    def save(self, path: str | Path) -> int:
        return write_jsonl(path, (asdict(e) for e in self.entries))
