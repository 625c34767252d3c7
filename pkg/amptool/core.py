"""Domain types, image arithmetic and the L-infinity budget projection.

Pixel values live in [0, 1] as float32 tensors of shape (3, H, W). Budgets are
fractions of that range (16/255 is the default operating point).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
import torchvision.transforms.functional as TF
from PIL import Image

from .errors import InvalidArgumentError
from .utils import compute_tensor_hash


CANONICAL_SIZE = 1024
DEFAULT_EPSILON = 16 / 255


@dataclass(frozen=True)
class ImageTensor:
    pixels: torch.Tensor
    id: str

    def __post_init__(self) -> None:
        px = self.pixels
        if px.dim() != 3 or px.shape[0] != 3:
            raise InvalidArgumentError(f"{self.id}: expected a (3, H, W) raster, got {tuple(px.shape)}")
        if px.shape[1] <= 0 or px.shape[2] <= 0:
            raise InvalidArgumentError(f"{self.id}: empty raster")
        if px.numel() and (float(px.min()) < 0.0 or float(px.max()) > 1.0):
            raise InvalidArgumentError(f"{self.id}: pixel values outside [0, 1]")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)  # type: ignore[return-value]

    def batch(self) -> torch.Tensor:
        return self.pixels.unsqueeze(0)

    def digest(self) -> str:
        return compute_tensor_hash(self.pixels)

    def with_id(self, image_id: str) -> "ImageTensor":
        return ImageTensor(self.pixels, image_id)


class AttackMode(str, Enum):
    WHITE_BOX = "white_box"
    ADAPTIVE = "adaptive"
    ENSEMBLE = "ensemble"


@dataclass(frozen=True)
class AttackConfig:
    budget: float = DEFAULT_EPSILON
    steps: int = 500
    step_size: float = DEFAULT_EPSILON / 10
    alpha: float = 0.05
    jpeg_quality: int = 75
    mode: AttackMode = AttackMode.WHITE_BOX
    seed: int = 0
    random_init: bool = False
    distance: str = "l2"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", AttackMode(self.mode))
        if not 0 < self.budget <= 1:
            raise InvalidArgumentError(f"budget must be in (0, 1], got {self.budget}")
        if self.steps < 1:
            raise InvalidArgumentError("steps must be positive")
        if self.step_size <= 0:
            raise InvalidArgumentError("step_size must be positive")
        # allow float round-off, e.g. 10 * (eps / 10)
        if self.step_size * self.steps < self.budget * (1 - 1e-9):
            raise InvalidArgumentError(
                f"step_size * steps ({self.step_size * self.steps:.6f}) cannot reach budget {self.budget:.6f}"
            )
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be nonnegative")
        if not 1 <= self.jpeg_quality <= 100:
            raise InvalidArgumentError("jpeg_quality must be in [1, 100]")
        if self.distance not in {"l2", "cosine"}:
            raise InvalidArgumentError(f"unknown distance {self.distance!r}")

    @classmethod
    def from_settings(cls, settings: Any, mode: AttackMode | str, **overrides: Any) -> "AttackConfig":
        mode = AttackMode(mode)
        budget = overrides.pop("budget", None) or settings.epsilon
        steps = overrides.pop("steps", None) or (
            settings.ensemble_steps if mode is AttackMode.ENSEMBLE else settings.steps
        )
        step_size = overrides.pop("step_size", None) or settings.step_size or budget / 10
        params = dict(
            budget=budget,
            steps=steps,
            step_size=step_size,
            alpha=settings.alpha,
            jpeg_quality=settings.adaptive_jpeg_quality,
            mode=mode,
            seed=settings.seed,
            random_init=settings.random_init,
            distance=settings.distance,
        )
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data


@dataclass
class PerturbationResult:
    perturbed: ImageTensor
    final_loss: float
    loss_trace: List[float]
    config: AttackConfig
    target_id: str
    reference_id: str
    initial_loss: float = math.nan
    converged: bool = True
    component_traces: Dict[str, List[float]] = field(default_factory=dict)
    budget_trace: List[float] = field(default_factory=list)
    extractor_ids: List[str] = field(default_factory=list)
    delta: Optional[torch.Tensor] = None

    def metadata(self) -> Dict[str, Any]:
        return {
            "perturbed_id": self.perturbed.id,
            "reference_id": self.reference_id,
            "target_id": self.target_id,
            "final_loss": self.final_loss,
            "initial_loss": self.initial_loss,
            "converged": self.converged,
            "loss_trace": self.loss_trace,
            "component_traces": self.component_traces,
            "max_abs_delta": max(self.budget_trace) if self.budget_trace else 0.0,
            "extractor_ids": self.extractor_ids,
            "config": self.config.to_dict(),
            "digest": self.perturbed.digest(),
        }


def project_linf(delta: torch.Tensor, budget: float) -> torch.Tensor:
    if budget <= 0:
        raise InvalidArgumentError(f"budget must be positive, got {budget}")
    return delta.clamp(-budget, budget)


def apply_perturbation(image: ImageTensor, delta: torch.Tensor) -> ImageTensor:
    if tuple(delta.shape) != image.shape:
        raise InvalidArgumentError(f"delta shape {tuple(delta.shape)} does not match image {image.shape}")
    return ImageTensor((image.pixels + delta.to(image.pixels.dtype)).clamp(0.0, 1.0), image.id)


def load_image(path: str | Path, size: Optional[int] = CANONICAL_SIZE, image_id: Optional[str] = None) -> ImageTensor:
    """Read an image file as RGB, bicubic-resized to ``size`` x ``size``."""
    path = Path(path)
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        if size is not None and rgb.size != (size, size):
            rgb = rgb.resize((size, size), Image.BICUBIC)
        pixels = TF.to_tensor(rgb)
    return ImageTensor(pixels, image_id or path.stem)


def to_pil(image: ImageTensor) -> Image.Image:
    return TF.to_pil_image(quantize(image.pixels))


def quantize(pixels: torch.Tensor) -> torch.Tensor:
    """8-bit representation of a [0, 1] raster."""
    return (pixels.detach().cpu().clamp(0, 1) * 255).round().to(torch.uint8)


def save_png(image: ImageTensor, path: str | Path) -> Path:
    """Write losslessly; any lossy re-encoding would destroy the perturbation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_pil(image).save(path, format="PNG")
    return path


def write_sidecar(result: PerturbationResult, path: str | Path, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    meta = result.metadata()
    if extra:
        meta.update(extra)
    path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return path
