"""Captioner backends, prompt sets, the caption cache and multi-captioner selection."""
from __future__ import annotations

import io
import json
import logging
import os
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .config import DEFAULT_PROMPT
from .core import ImageTensor, to_pil
from .embeddings import TextImageScorer, similarity
from .errors import (
    AggregateCaptionError,
    BackendError,
    InvalidArgumentError,
    RefusalError,
    TransportError,
)
from .remote import (
    AzureVisionAdapter,
    JsonCaptionAdapter,
    OpenAIChatAdapter,
    ProviderAdapter,
    RequestLedger,
    RetryPolicy,
    TokenBucket,
    call_with_retry,
    looks_like_refusal,
)
from .utils import compute_content_hash, read_jsonl


logger = logging.getLogger(__name__)

PROMPT_VARIANTS = {
    "default": DEFAULT_PROMPT,
    "concise": "Caption this image accurately, with as few words as possible.",
    "detailed": "Provide the most detailed caption.",
    "literal": "Caption this image accurately, without speculation. Just describe what you see.",
    "whats": "What's in this image?",
}

CAPTIONER_KINDS = ("local", "remote", "mock")
PROVIDERS = ("json", "azure", "openai")


class PromptSet:
    """Named prompts, frozen once constructed."""

    def __init__(self, prompts: Optional[Mapping[str, str]] = None, default: str = "default") -> None:
        prompts = dict(prompts if prompts is not None else PROMPT_VARIANTS)
        if not prompts:
            raise InvalidArgumentError("prompt set is empty")
        if default not in prompts:
            raise InvalidArgumentError(f"default prompt {default!r} is not in the set")
        for name, text in prompts.items():
            if not text or not text.strip():
                raise InvalidArgumentError(f"prompt {name!r} is empty")
        self._prompts = MappingProxyType(prompts)
        self._default = default

    @property
    def prompts(self) -> Mapping[str, str]:
        return self._prompts

    @property
    def default(self) -> str:
        return self._prompts[self._default]

    def names(self) -> List[str]:
        return list(self._prompts)

    def get(self, name: Optional[str] = None) -> str:
        if name is None:
            return self.default
        if name not in self._prompts:
            raise InvalidArgumentError(f"unknown prompt {name!r}; known: {', '.join(self._prompts)}")
        return self._prompts[name]

    def to_dict(self) -> Dict[str, Any]:
        return {"default": self._default, "prompts": dict(self._prompts)}


@dataclass(frozen=True)
class CaptionerDescriptor:
    id: str
    kind: str
    endpoint: Optional[str] = None
    credentials_env: Optional[str] = None
    provider: Optional[str] = None
    model: Optional[str] = None
    rate_limit: Optional[float] = None
    retry_base: float = 1.0
    retry_factor: float = 2.0
    retry_attempts: int = 5
    cost_per_1000: float = 0.0
    table: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidArgumentError("captioner id is required")
        if self.kind not in CAPTIONER_KINDS:
            raise InvalidArgumentError(f"{self.id}: kind must be one of {CAPTIONER_KINDS}")
        if self.kind == "remote":
            if self.provider not in PROVIDERS:
                raise InvalidArgumentError(f"{self.id}: remote provider must be one of {PROVIDERS}")
            if self.provider != "openai" and not self.endpoint:
                raise InvalidArgumentError(f"{self.id}: remote captioner needs an endpoint")
            if self.rate_limit is None or self.rate_limit <= 0:
                raise InvalidArgumentError(f"{self.id}: remote captioner must declare a positive rate_limit")
            self.retry_policy  # validates
        if self.kind == "local" and not self.model:
            raise InvalidArgumentError(f"{self.id}: local captioner needs a model id")

    @property
    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(self.retry_base, self.retry_factor, self.retry_attempts)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CaptionerDescriptor":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"unknown captioner fields: {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        # credentials are referenced by variable name only
        return asdict(self)


@dataclass
class CaptionRecord:
    image_id: str
    captioner_id: str
    prompt: str
    caption: str
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    transform: Optional[Dict[str, Any]] = None
    status: str = "ok"
    error_class: Optional[str] = None
    digest: Optional[str] = None
    cached: bool = False
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok" and bool(self.caption.strip())

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CaptionRecord":
        return cls(**dict(data))


def load_caption_records(path: str | Path) -> List[CaptionRecord]:
    return [CaptionRecord.from_dict(row) for row in read_jsonl(path)]


class Captioner(ABC):
    def __init__(self, descriptor: CaptionerDescriptor) -> None:
        self.descriptor = descriptor

    @property
    def id(self) -> str:
        return self.descriptor.id

    @abstractmethod
    def generate(self, image: ImageTensor, prompt: str) -> str:
        ...


class MockCaptioner(Captioner):
    """Lookup-table captioner keyed by image id (or digest).

    A list value is consumed one entry per call for that image; the last entry
    repeats. Unknown images get ``default`` or raise a backend error.
    """

    def __init__(self, descriptor: CaptionerDescriptor,
                 table: Optional[Mapping[str, Union[str, Sequence[str]]]] = None,
                 default: Optional[str] = None,
                 fn: Optional[Callable[[ImageTensor, str], str]] = None) -> None:
        super().__init__(descriptor)
        self.table = dict(table or {})
        self.default = default
        self.fn = fn
        self.calls: Dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, descriptor: CaptionerDescriptor, path: str | Path,
                  default: Optional[str] = None) -> "MockCaptioner":
        """JSON object or jsonl rows ``{"image_id": ..., "caption": ...}``."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".jsonl":
            table = {row["image_id"]: row["caption"] for row in read_jsonl(path)}
        else:
            table = json.loads(text)
        return cls(descriptor, table, default)

    def generate(self, image: ImageTensor, prompt: str) -> str:
        with self._lock:
            n = self.calls.get(image.id, 0)
            self.calls[image.id] = n + 1
        if self.fn is not None:
            return self.fn(image, prompt)
        entry = self.table.get(image.id)
        if entry is None:
            entry = self.table.get(image.digest())
        if entry is None:
            if self.default is None:
                raise BackendError(self.id, f"no mock caption for {image.id}")
            return self.default
        if isinstance(entry, str):
            return entry
        return entry[min(n, len(entry) - 1)]


class LocalCaptioner(Captioner):
    """transformers image-to-text model run in-process."""

    def __init__(self, descriptor: CaptionerDescriptor, device: str = "cpu",
                 prompt_as_prefix: bool = False, max_new_tokens: int = 60) -> None:
        super().__init__(descriptor)
        from transformers import AutoModelForVision2Seq, AutoProcessor

        self.device = device
        self.prompt_as_prefix = prompt_as_prefix
        self.max_new_tokens = max_new_tokens
        try:
            self.processor = AutoProcessor.from_pretrained(descriptor.model)
            self.model = AutoModelForVision2Seq.from_pretrained(descriptor.model).to(device).eval()
        except Exception as e:
            raise BackendError(self.id, f"failed to load {descriptor.model}: {e}") from e
        self._lock = threading.Lock()

    def generate(self, image: ImageTensor, prompt: str) -> str:
        import torch

        pil = to_pil(image)
        kwargs: Dict[str, Any] = {"images": pil, "return_tensors": "pt"}
        if self.prompt_as_prefix:
            kwargs["text"] = prompt
        inputs = self.processor(**kwargs).to(self.device)
        with self._lock, torch.no_grad():
            output_ids = self.model.generate(**inputs, max_new_tokens=self.max_new_tokens)
        return self.processor.decode(output_ids[0], skip_special_tokens=True).strip()


def png_bytes(image: ImageTensor) -> bytes:
    buf = io.BytesIO()
    to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


class RemoteCaptioner(Captioner):
    """Remote API captioner: token-bucket rate limit, retries, request ledger."""

    def __init__(self, descriptor: CaptionerDescriptor, adapter: ProviderAdapter,
                 ledger: Optional[RequestLedger] = None, bucket: Optional[TokenBucket] = None,
                 sleep: Optional[Callable[[float], None]] = None) -> None:
        super().__init__(descriptor)
        self.adapter = adapter
        self.ledger = ledger or RequestLedger()
        self.bucket = bucket or TokenBucket(descriptor.rate_limit or 1.0)
        self.policy = descriptor.retry_policy
        self._sleep = sleep

    def generate(self, image: ImageTensor, prompt: str) -> str:
        png = png_bytes(image)
        digest = image.digest()
        attempt_no = 0

        def attempt() -> str:
            nonlocal attempt_no
            attempt_no += 1
            self.bucket.acquire()
            try:
                text = self.adapter.caption(png, prompt)
            except RefusalError:
                self.ledger.record(self.id, digest, prompt, attempt_no, "refused")
                raise
            except Exception as e:
                self.ledger.record(self.id, digest, prompt, attempt_no, type(e).__name__)
                raise
            self.ledger.record(self.id, digest, prompt, attempt_no, "ok")
            if looks_like_refusal(text):
                raise RefusalError(self.id, "(refusal text)")
            return text

        kwargs = {"sleep": self._sleep} if self._sleep is not None else {}
        return call_with_retry(attempt, self.policy, self.id, **kwargs)


def build_adapter(descriptor: CaptionerDescriptor) -> ProviderAdapter:
    api_key = os.getenv(descriptor.credentials_env, "") if descriptor.credentials_env else ""
    if descriptor.provider == "json":
        return JsonCaptionAdapter(descriptor.id, descriptor.endpoint or "", api_key)
    if descriptor.provider == "azure":
        return AzureVisionAdapter(descriptor.id, descriptor.endpoint or "", api_key)
    if descriptor.provider == "openai":
        return OpenAIChatAdapter(descriptor.id, descriptor.model or "", api_key, base_url=descriptor.endpoint)
    raise InvalidArgumentError(f"{descriptor.id}: unknown provider {descriptor.provider!r}")


def build_captioner(descriptor: CaptionerDescriptor, device: str = "cpu",
                    ledger: Optional[RequestLedger] = None) -> Captioner:
    if descriptor.kind == "mock":
        if descriptor.table:
            return MockCaptioner.from_file(descriptor, descriptor.table)
        return MockCaptioner(descriptor)
    if descriptor.kind == "local":
        return LocalCaptioner(descriptor, device=device)
    return RemoteCaptioner(descriptor, build_adapter(descriptor), ledger=ledger)


class CaptionCache:
    """Newline-delimited JSON cache keyed by (captioner, image digest, prompt)."""

    def __init__(self, path: Optional[str | Path] = None) -> None:
        self.path = Path(path) if path else None
        self._rows: Dict[tuple, Dict[str, Any]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for row in read_jsonl(self.path):
                self._rows[(row["captioner_id"], row["digest"], row["prompt"])] = row

    def get(self, captioner_id: str, digest: str, prompt: str) -> Optional[Dict[str, Any]]:
        return self._rows.get((captioner_id, digest, prompt))

    def put(self, captioner_id: str, digest: str, prompt: str, caption: str, status: str) -> None:
        row = {"captioner_id": captioner_id, "digest": digest, "prompt": prompt, "caption": caption, "status": status}
        with self._lock:
            key = (captioner_id, digest, prompt)
            if key in self._rows:
                return
            self._rows[key] = row
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(row, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._rows)


def caption(captioner: Captioner, image: ImageTensor, prompt: str,
            cache: Optional[CaptionCache] = None,
            transform: Optional[Dict[str, Any]] = None) -> CaptionRecord:
    """Caption one image; raises on transport failure or refusal."""
    if not prompt or not prompt.strip():
        raise InvalidArgumentError("prompt must be nonempty")
    digest = image.digest()
    if cache is not None:
        hit = cache.get(captioner.id, digest, prompt)
        if hit is not None:
            if hit["status"] == "refused":
                raise RefusalError(captioner.id, "(cached)")
            return CaptionRecord(image.id, captioner.id, prompt, hit["caption"], transform=transform,
                                 digest=digest, cached=True)
    try:
        text = captioner.generate(image, prompt)
    except RefusalError:
        if cache is not None:
            cache.put(captioner.id, digest, prompt, "", "refused")
        raise
    if not text or not text.strip():
        raise BackendError(captioner.id, f"empty caption for {image.id}")
    if cache is not None:
        cache.put(captioner.id, digest, prompt, text, "ok")
    return CaptionRecord(image.id, captioner.id, prompt, text, transform=transform, digest=digest)


def caption_or_failure(captioner: Captioner, image: ImageTensor, prompt: str,
                       cache: Optional[CaptionCache] = None,
                       transform: Optional[Dict[str, Any]] = None) -> CaptionRecord:
    """Like ``caption`` but failures become records with a status and error class."""
    try:
        return caption(captioner, image, prompt, cache, transform)
    except RefusalError as e:
        logger.warning(f"{captioner.id} refused {image.id}: {e}")
        status = "refused"
        err: Exception = e
    except (TransportError, BackendError) as e:
        logger.error(f"{captioner.id} failed on {image.id}: {e}")
        status = "error"
        err = e
    return CaptionRecord(image.id, captioner.id, prompt, "", transform=transform, status=status,
                         error_class=type(err).__name__, digest=image.digest())


def caption_many(captioner: Captioner, images: Sequence[ImageTensor], prompt: str,
                 cache: Optional[CaptionCache] = None, workers: int = 1) -> List[CaptionRecord]:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda img: caption_or_failure(captioner, img, prompt, cache), images))


def caption_costs(records: Sequence[CaptionRecord], descriptors: Mapping[str, CaptionerDescriptor]) -> Dict[str, float]:
    """Informational spend per captioner for freshly generated (uncached) captions."""
    costs: Dict[str, float] = {}
    for rec in records:
        desc = descriptors.get(rec.captioner_id)
        if desc is None or rec.cached or not rec.ok:
            continue
        costs[rec.captioner_id] = costs.get(rec.captioner_id, 0.0) + desc.cost_per_1000 / 1000.0
    return costs


def select_caption(similarities: Sequence[float], tau: float, rng: np.random.Generator,
                   t_max: float = 10.0) -> int:
    """Index of the chosen candidate.

    ``tau == 0`` is an exact argmax (lowest index on ties); otherwise sample
    from softmax(s / (tau * t_max)).
    """
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgumentError(f"tau must be in [0, 1], got {tau}")
    if len(similarities) == 0:
        raise InvalidArgumentError("no candidates to select from")
    if tau == 0.0:
        return max(range(len(similarities)), key=lambda i: (similarities[i], -i))
    logits = np.asarray(similarities, dtype=np.float64) / (tau * t_max)
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


def _image_rng(seed: int, image: ImageTensor) -> np.random.Generator:
    return np.random.default_rng([seed, int(compute_content_hash(image.id)[:8], 16)])


def multi_vlm_caption(
    captioners: Sequence[Captioner],
    image: ImageTensor,
    prompt: str,
    scorer: TextImageScorer,
    tau: float,
    seed: int = 0,
    cache: Optional[CaptionCache] = None,
    t_max: float = 10.0,
    rng: Optional[np.random.Generator] = None,
    shown: Optional[ImageTensor] = None,
    transform: Optional[Dict[str, Any]] = None,
) -> CaptionRecord:
    """One caption per captioner, then similarity-weighted selection.

    Captioners see ``shown`` (a defended view) when given; records are paired
    back to ``image`` and similarity is scored against ``image``.
    """
    if len(captioners) < 2:
        raise InvalidArgumentError("multi-captioner selection needs at least two captioners")
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgumentError(f"tau must be in [0, 1], got {tau}")
    candidates: List[CaptionRecord] = []
    failures: Dict[str, str] = {}
    for captioner in captioners:
        rec = caption_or_failure(captioner, shown if shown is not None else image, prompt, cache, transform)
        if shown is not None:
            rec = replace(rec, image_id=image.id, digest=image.digest())
        if rec.ok:
            candidates.append(rec)
        else:
            failures[captioner.id] = rec.error_class or rec.status
    if not candidates:
        raise AggregateCaptionError(failures)
    sims = [similarity(scorer, image, rec.caption) for rec in candidates]
    rng = rng if rng is not None else _image_rng(seed, image)
    index = select_caption(sims, tau, rng, t_max)
    chosen = candidates[index]
    selector_id = "multi[" + ",".join(c.id for c in captioners) + "]"
    return replace(
        chosen,
        captioner_id=selector_id,
        extras={
            "selected_captioner": chosen.captioner_id,
            "candidates": [{"captioner_id": c.captioner_id, "caption": c.caption} for c in candidates],
            "similarities": sims,
            "similarity_scale": scorer.scale,
            "tau": tau,
            "t_max": t_max,
            "failures": failures,
        },
    )


@dataclass
class TransferReport:
    queries: Dict[str, int] = field(default_factory=dict)
    succeeded: List[str] = field(default_factory=list)
    failed_transfer: List[str] = field(default_factory=list)
    budget_per_image: int = 1
    cost: float = 0.0

    @property
    def total_queries(self) -> int:
        return sum(self.queries.values())

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["total_queries"] = self.total_queries
        return data


def probe_budgeted_query(
    captioner: Captioner,
    images: Sequence[ImageTensor],
    prompt: str,
    budget_per_image: int,
    success_fn: Callable[[ImageTensor, CaptionRecord], bool],
) -> TransferReport:
    """Query each image until ``success_fn`` accepts a caption or the budget runs out.

    The cache is bypassed: every query is a fresh request.
    """
    if budget_per_image < 1:
        raise InvalidArgumentError("budget_per_image must be >= 1")
    report = TransferReport(budget_per_image=budget_per_image)
    for image in images:
        used = 0
        success = False
        while used < budget_per_image and not success:
            used += 1
            rec = caption_or_failure(captioner, image, prompt, cache=None)
            success = rec.ok and success_fn(image, rec)
        report.queries[image.id] = used
        (report.succeeded if success else report.failed_transfer).append(image.id)
    report.cost = report.total_queries * captioner.descriptor.cost_per_1000 / 1000.0
    logger.info(
        f"{captioner.id}: {len(report.succeeded)}/{len(images)} transferred in {report.total_queries} queries"
    )
    return report
