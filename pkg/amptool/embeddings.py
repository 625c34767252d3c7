from __future__ import annotations

import json
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageTensor
from .errors import BackendError, CapabilityError, InvalidArgumentError
from .utils import slug


logger = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
DEFAULT_TEMPLATE = "a photo of a {label}"


@dataclass(frozen=True)
class Preprocessing:
    resize: Optional[int] = 224
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD

    def apply(self, batch: torch.Tensor) -> torch.Tensor:
        x = batch
        if self.resize is not None and tuple(x.shape[-2:]) != (self.resize, self.resize):
            x = F.interpolate(x, size=(self.resize, self.resize), mode="bicubic", align_corners=False)
        mean = torch.tensor(self.mean, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        return (x - mean) / std


class FeatureExtractor(ABC):
    """Image encoder phi: (B, 3, H, W) in [0, 1] -> (B, embed_dim)."""

    id: str
    embed_dim: int
    preprocessing: Preprocessing
    supports_grad: bool = True
    # Backends that cannot run forward/backward concurrently set this.
    serialize_calls: bool = False

    @abstractmethod
    def _encode(self, pixel_values: torch.Tensor) -> torch.Tensor:
        ...

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        return self._encode(self.preprocessing.apply(batch))

    def embed(self, image: ImageTensor) -> torch.Tensor:
        try:
            with torch.no_grad():
                return self.features(image.batch().to(self.dtype))[0].detach().cpu().float()
        except CapabilityError:
            raise
        except Exception as e:
            raise BackendError(self.id, str(e)) from e

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32

    def descriptor(self) -> dict:
        return {
            "id": self.id,
            "embed_dim": self.embed_dim,
            "resize": self.preprocessing.resize,
            "mean": list(self.preprocessing.mean),
            "std": list(self.preprocessing.std),
            "serialize_calls": self.serialize_calls,
        }


class TorchFeatureExtractor(FeatureExtractor):
    """Wraps any ``nn.Module`` mapping preprocessed pixels to vectors."""

    def __init__(self, extractor_id: str, module: nn.Module, embed_dim: int,
                 preprocessing: Preprocessing | None = None, supports_grad: bool = True) -> None:
        self.id = extractor_id
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.embed_dim = embed_dim
        self.preprocessing = preprocessing or Preprocessing(resize=None, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        self.supports_grad = supports_grad

    def _encode(self, pixel_values: torch.Tensor) -> torch.Tensor:
        return self.module(pixel_values)

    @property
    def dtype(self) -> torch.dtype:
        for p in self.module.parameters():
            return p.dtype
        return torch.float32


class RandomProjectionExtractor(TorchFeatureExtractor):
    """Small seeded encoder for desk-scale runs: pool, fixed conv, tanh, linear.

    Weights depend only on ``seed`` so two processes agree bit-for-bit.
    """

    def __init__(self, seed: int = 0, embed_dim: int = 64, pool: int = 16,
                 channels: int = 16, dtype: torch.dtype = torch.float32) -> None:
        gen = torch.Generator().manual_seed(seed)
        conv = nn.Conv2d(3, channels, kernel_size=3, padding=1)
        linear = nn.Linear(channels * pool * pool, embed_dim)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / 3.0)
            conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            linear.weight.copy_(torch.randn(linear.weight.shape, generator=gen) / (channels * pool * pool) ** 0.5)
            linear.bias.zero_()
        module = nn.Sequential(
            nn.AdaptiveAvgPool2d(pool),
            conv,
            nn.Tanh(),
            nn.Flatten(),
            linear,
        ).to(dtype)
        super().__init__(f"random:{seed}:{embed_dim}", module, embed_dim)


class ClipVisionExtractor(FeatureExtractor):
    def __init__(self, model_id: str, device: str = "cpu") -> None:
        from transformers import CLIPModel

        self.id = f"clip:{model_id}"
        self.device = device
        try:
            self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
        except Exception as e:
            raise BackendError(self.id, f"failed to load weights: {e}") from e
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.embed_dim = int(self.model.config.projection_dim)
        self.preprocessing = Preprocessing(resize=int(self.model.config.vision_config.image_size))

    def _encode(self, pixel_values: torch.Tensor) -> torch.Tensor:
        return self.model.get_image_features(pixel_values=pixel_values.to(self.device))


class OpenClipVisionExtractor(FeatureExtractor):
    """Image tower of an open_clip model; resize, mean and std come from its visual config."""

    def __init__(self, arch: str, pretrained: str, device: str = "cpu") -> None:
        import open_clip

        self.id = f"open_clip:{arch}:{pretrained}"
        self.device = device
        try:
            model, _, _ = open_clip.create_model_and_transforms(arch, pretrained=pretrained, device=device)
        except Exception as e:
            raise BackendError(self.id, f"failed to load weights: {e}") from e
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        visual = self.model.visual
        size = getattr(visual, "image_size", 224)
        if isinstance(size, (tuple, list)):
            size = size[0]
        self.preprocessing = Preprocessing(
            resize=int(size),
            mean=tuple(getattr(visual, "image_mean", None) or CLIP_MEAN),
            std=tuple(getattr(visual, "image_std", None) or CLIP_STD),
        )
        dim = getattr(visual, "output_dim", None)
        if dim is None:
            with torch.no_grad():
                dim = self.model.encode_image(torch.zeros(1, 3, int(size), int(size), device=device)).shape[-1]
        self.embed_dim = int(dim)

    def _encode(self, pixel_values: torch.Tensor) -> torch.Tensor:
        return self.model.encode_image(pixel_values.to(self.device))


class TextImageScorer(ABC):
    """Image-text similarity on a documented scale (``scale`` x cosine)."""

    id: str
    scale: float = 100.0
    supports_grad: bool = True
    quality_head: Optional[nn.Module] = None
    embedding_cache: Optional["EmbeddingCache"] = None

    @abstractmethod
    def image_features(self, batch: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def text_features(self, texts: Sequence[str]) -> torch.Tensor:
        ...

    def cosine(self, batch: torch.Tensor, texts: Sequence[str]) -> torch.Tensor:
        """(B, T) raw cosine similarities; differentiable in ``batch``."""
        img = F.normalize(self.image_features(batch), dim=-1)
        txt = F.normalize(self.text_features(texts), dim=-1).to(img.dtype)
        return img @ txt.T

    def image_embedding(self, image: ImageTensor) -> torch.Tensor:
        """(D,) float32 image features, read through ``embedding_cache`` when one is attached."""
        cache = self.embedding_cache
        digest = image.digest() if cache is not None else ""
        if cache is not None:
            hit = cache.get(self.id, digest)
            if hit is not None:
                return hit
        with torch.no_grad():
            vec = self.image_features(image.batch())[0].detach().cpu().float()
        if cache is not None:
            cache.put(self.id, digest, vec)
        return vec

    def text_cosine(self, image: ImageTensor, texts: Sequence[str]) -> torch.Tensor:
        """(T,) raw cosine similarities of one image against ``texts``; no gradient."""
        img = F.normalize(self.image_embedding(image), dim=-1)
        with torch.no_grad():
            txt = F.normalize(self.text_features(texts).detach().cpu().float(), dim=-1)
        return txt @ img


class ClipScorer(TextImageScorer):
    def __init__(self, model_id: str, device: str = "cpu", scale: float = 100.0) -> None:
        from transformers import CLIPModel, CLIPTokenizer

        self.id = f"clip:{model_id}"
        self.device = device
        self.scale = scale
        try:
            self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self.tokenizer = CLIPTokenizer.from_pretrained(model_id)
        except Exception as e:
            raise BackendError(self.id, f"failed to load weights: {e}") from e
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.preprocessing = Preprocessing(resize=int(self.model.config.vision_config.image_size))
        self._text_cache: dict[str, torch.Tensor] = {}
        self._lock = threading.Lock()

    def image_features(self, batch: torch.Tensor) -> torch.Tensor:
        return self.model.get_image_features(pixel_values=self.preprocessing.apply(batch).to(self.device))

    def text_features(self, texts: Sequence[str]) -> torch.Tensor:
        missing = [t for t in dict.fromkeys(texts) if t not in self._text_cache]
        if missing:
            inputs = self.tokenizer(missing, padding=True, truncation=True, return_tensors="pt").to(self.device)
            with torch.no_grad():
                feats = self.model.get_text_features(**inputs)
            with self._lock:
                for t, f in zip(missing, feats):
                    self._text_cache[t] = f
        return torch.stack([self._text_cache[t] for t in texts])


class AestheticHead(nn.Module):
    """Linear quality head over normalized image embeddings."""

    def __init__(self, embed_dim: int) -> None:
        super().__init__()
        self.linear = nn.Linear(embed_dim, 1)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.linear(F.normalize(embedding, dim=-1)).squeeze(-1)

    @classmethod
    def from_file(cls, path: str | Path) -> "AestheticHead":
        state = torch.load(path, map_location="cpu")
        weight = state.get("weight", state.get("linear.weight"))
        bias = state.get("bias", state.get("linear.bias"))
        head = cls(int(weight.shape[-1]))
        with torch.no_grad():
            head.linear.weight.copy_(weight.view(1, -1))
            head.linear.bias.copy_(bias.view(1))
        return head.eval()


class EmbeddingCache:
    """Content-addressed vector store: ``vectors/<extractor>/<digest>.npy`` plus
    a newline-delimited JSON index ``index.jsonl``.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.index_path = self.root / "index.jsonl"
        self._write_lock = threading.Lock()
        self._known: dict[tuple[str, str], Path] = {}
        if self.index_path.exists():
            with open(self.index_path, "r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        row = json.loads(line)
                        self._known[(row["extractor_id"], row["digest"])] = self.root / row["path"]

    def get(self, extractor_id: str, digest: str) -> Optional[torch.Tensor]:
        path = self._known.get((extractor_id, digest))
        if path is None or not path.exists():
            return None
        return torch.from_numpy(np.load(path))

    def put(self, extractor_id: str, digest: str, vector: torch.Tensor) -> None:
        rel = Path("vectors") / slug(extractor_id) / f"{digest}.npy"
        with self._write_lock:
            if (extractor_id, digest) in self._known:
                return
            path = self.root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, vector.detach().cpu().numpy())
            with open(self.index_path, "a", encoding="utf-8") as f:
                f.write(json.dumps({
                    "extractor_id": extractor_id,
                    "digest": digest,
                    "dim": int(vector.numel()),
                    "path": rel.as_posix(),
                }) + "\n")
            self._known[(extractor_id, digest)] = path


def embed(extractor: FeatureExtractor, image: ImageTensor, cache: Optional[EmbeddingCache] = None) -> torch.Tensor:
    if cache is not None:
        digest = image.digest()
        hit = cache.get(extractor.id, digest)
        if hit is not None:
            return hit
        vec = extractor.embed(image)
        cache.put(extractor.id, digest, vec)
        return vec
    return extractor.embed(image)


def feature_distance(a: torch.Tensor, b: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    """Dist(.) of the attack objectives, reduced over the last dimension."""
    if kind == "l2":
        return ((a - b) ** 2).sum(dim=-1)
    if kind == "cosine":
        return 1.0 - F.cosine_similarity(a, b, dim=-1)
    raise InvalidArgumentError(f"unknown distance {kind!r}")


def similarity(scorer: TextImageScorer, image: ImageTensor, text: str) -> float:
    """Scaled cosine similarity (``scorer.scale`` x cosine)."""
    return scorer.scale * raw_similarity(scorer, image, text)


def raw_similarity(scorer: TextImageScorer, image: ImageTensor, text: str) -> float:
    if not text or not text.strip():
        raise InvalidArgumentError("similarity requires nonempty text")
    return float(scorer.text_cosine(image, [text])[0])


@dataclass
class ZeroShotResult:
    label: str
    index: int
    scores: List[float] = field(default_factory=list)
    template: str = DEFAULT_TEMPLATE


def zero_shot_classify(scorer: TextImageScorer, image: ImageTensor, labels: Sequence[str],
                       template: str = DEFAULT_TEMPLATE) -> ZeroShotResult:
    if not labels:
        raise InvalidArgumentError("zero-shot classification needs at least one label")
    if len(set(labels)) != len(labels):
        raise InvalidArgumentError("zero-shot labels must be unique")
    prompts = [template.format(label=label) for label in labels]
    scores = (scorer.scale * scorer.text_cosine(image, prompts)).tolist()
    # first maximum wins
    best = max(range(len(labels)), key=lambda i: (scores[i], -i))
    return ZeroShotResult(label=labels[best], index=best, scores=scores, template=template)


def build_extractor(spec: str, device: str = "cpu") -> FeatureExtractor:
    """``clip:<hf-model-id>``, ``open_clip:<arch>:<pretrained>`` or ``random:<seed>[:<dim>]``."""
    kind, _, rest = spec.partition(":")
    if kind == "clip" and rest:
        return ClipVisionExtractor(rest, device=device)
    if kind == "open_clip":
        arch, _, pretrained = rest.partition(":")
        if not arch or not pretrained:
            raise InvalidArgumentError(f"open_clip extractor spec must be open_clip:<arch>:<pretrained>, got {spec!r}")
        return OpenClipVisionExtractor(arch, pretrained, device=device)
    if kind == "random":
        parts = [p for p in rest.split(":") if p]
        seed = int(parts[0]) if parts else 0
        dim = int(parts[1]) if len(parts) > 1 else 64
        return RandomProjectionExtractor(seed=seed, embed_dim=dim)
    raise InvalidArgumentError(f"unknown extractor spec {spec!r}")


def build_scorer(spec: str, device: str = "cpu", scale: float = 100.0,
                 aesthetic_head: Optional[str] = None) -> TextImageScorer:
    kind, _, rest = spec.partition(":")
    if kind != "clip" or not rest:
        raise InvalidArgumentError(f"unknown scorer spec {spec!r}")
    scorer = ClipScorer(rest, device=device, scale=scale)
    if aesthetic_head:
        scorer.quality_head = AestheticHead.from_file(aesthetic_head)
        logger.info("Loaded aesthetic head from %s", aesthetic_head)
    return scorer
