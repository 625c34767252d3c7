import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, List, Optional

import yaml
from dotenv import load_dotenv

from .errors import InvalidArgumentError


DEFAULT_PROMPT = "Describe the image in twenty words or less."

DEFAULT_ENSEMBLE = (
    "open_clip:ViT-B-32:openai",
    "open_clip:ViT-B-16:openai",
    "open_clip:ViT-L-14:openai",
    "open_clip:ViT-L-14-336:openai",
    "open_clip:ViT-H-14-378-quickgelu:dfn5b",
    "open_clip:EVA02-E-14-plus:laion2b_s9b_b144k",
    "open_clip:ViT-SO400M-14-SigLIP-384:webli",
    "open_clip:ViT-bigG-14-CLIPA-336:datacomp1b",
)


def load_env() -> None:
    # Load from .env if exists
    load_dotenv(override=False)


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() in {"1", "true", "yes", "y"}


def _env_list(name: str, default: tuple[str, ...]) -> List[str]:
    raw = os.getenv(name)
    if raw is None:
        return list(default)
    return [item.strip() for item in raw.split(",") if item.strip()]


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    workers: int = 1
    cache_dir: str = ".amp_cache"
    device: str = "cpu"
    log_level: str = "INFO"

    # Canonical pipeline resolution
    image_size: int = 1024

    # Attack defaults
    epsilon: float = 16 / 255
    steps: int = 500
    ensemble_steps: int = 300
    step_size: Optional[float] = None
    alpha: float = 0.05
    adaptive_jpeg_quality: int = 75
    random_init: bool = False
    distance: str = "l2"
    attack_extractor: str = DEFAULT_ENSEMBLE[0]
    ensemble_extractors: List[str] = field(default_factory=lambda: list(DEFAULT_ENSEMBLE))

    # Ensemble stabilizer (momentum + spectrum augmentation)
    ssa_copies: int = 4
    ssa_momentum: float = 0.9
    ssa_rho: float = 0.5
    ssa_sigma: float = 16 / 255

    # Scoring
    metric_scorer: str = "clip:openai/clip-vit-large-patch14"
    similarity_scale: float = 100.0
    zero_shot_template: str = "a photo of a {label}"
    aesthetic_head: Optional[str] = None

    # Dataset
    min_confidence: float = 0.99
    top_k_concepts: int = 100

    # Captioning
    default_prompt: str = DEFAULT_PROMPT
    tau_t_max: float = 10.0
    retry_base: float = 1.0
    retry_factor: float = 2.0
    retry_attempts: int = 5

    # Defenses
    defense_jpeg_quality: int = 75
    defense_blur_sigma: float = 1.0
    defense_noise_std: float = 0.05
    fpr_target: float = 0.05
    delta_threshold: float = 0.0

    # Free-form sections from the config document (captioner descriptors)
    captioners: List[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_confidence <= 1.0:
            raise InvalidArgumentError(f"min_confidence must be in [0, 1], got {self.min_confidence}")

    @staticmethod
    def from_env() -> "Settings":
        load_env()
        step_size = os.getenv("AMP_STEP_SIZE")
        return Settings(
            seed=int(os.getenv("AMP_SEED", "0")),
            workers=int(os.getenv("AMP_WORKERS", "1")),
            cache_dir=os.getenv("AMP_CACHE_DIR", ".amp_cache"),
            device=os.getenv("AMP_DEVICE", "cpu"),
            log_level=os.getenv("LOG_LEVEL", "INFO"),
            image_size=int(os.getenv("AMP_IMAGE_SIZE", "1024")),
            epsilon=float(os.getenv("AMP_EPSILON", str(16 / 255))),
            steps=int(os.getenv("AMP_STEPS", "500")),
            ensemble_steps=int(os.getenv("AMP_ENSEMBLE_STEPS", "300")),
            step_size=float(step_size) if step_size else None,
            alpha=float(os.getenv("AMP_ALPHA", "0.05")),
            adaptive_jpeg_quality=int(os.getenv("AMP_ADAPTIVE_JPEG_QUALITY", "75")),
            random_init=_env_bool("AMP_RANDOM_INIT", "false"),
            distance=os.getenv("AMP_DISTANCE", "l2"),
            attack_extractor=os.getenv("AMP_ATTACK_EXTRACTOR", DEFAULT_ENSEMBLE[0]),
            ensemble_extractors=_env_list("AMP_ENSEMBLE_EXTRACTORS", DEFAULT_ENSEMBLE),
            ssa_copies=int(os.getenv("AMP_SSA_COPIES", "4")),
            ssa_momentum=float(os.getenv("AMP_SSA_MOMENTUM", "0.9")),
            ssa_rho=float(os.getenv("AMP_SSA_RHO", "0.5")),
            ssa_sigma=float(os.getenv("AMP_SSA_SIGMA", str(16 / 255))),
            metric_scorer=os.getenv("AMP_METRIC_SCORER", "clip:openai/clip-vit-large-patch14"),
            similarity_scale=float(os.getenv("AMP_SIMILARITY_SCALE", "100.0")),
            zero_shot_template=os.getenv("AMP_ZERO_SHOT_TEMPLATE", "a photo of a {label}"),
            aesthetic_head=os.getenv("AMP_AESTHETIC_HEAD") or None,
            min_confidence=float(os.getenv("AMP_MIN_CONFIDENCE", "0.99")),
            top_k_concepts=int(os.getenv("AMP_TOP_K_CONCEPTS", "100")),
            default_prompt=os.getenv("AMP_DEFAULT_PROMPT", DEFAULT_PROMPT),
            tau_t_max=float(os.getenv("AMP_TAU_T_MAX", "10.0")),
            retry_base=float(os.getenv("AMP_RETRY_BASE", "1.0")),
            retry_factor=float(os.getenv("AMP_RETRY_FACTOR", "2.0")),
            retry_attempts=int(os.getenv("AMP_RETRY_ATTEMPTS", "5")),
            defense_jpeg_quality=int(os.getenv("AMP_DEFENSE_JPEG_QUALITY", "75")),
            defense_blur_sigma=float(os.getenv("AMP_DEFENSE_BLUR_SIGMA", "1.0")),
            defense_noise_std=float(os.getenv("AMP_DEFENSE_NOISE_STD", "0.05")),
            fpr_target=float(os.getenv("AMP_FPR_TARGET", "0.05")),
            delta_threshold=float(os.getenv("AMP_DELTA_THRESHOLD", "0.0")),
        )

    @staticmethod
    def from_file(path: str | Path, base: Optional["Settings"] = None) -> "Settings":
        """Layer a YAML config document over environment settings.

        Nested sections (``attack:``, ``defenses:``...) are flattened; a key is
        accepted either at top level or inside any section.
        """
        base = base or Settings.from_env()
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = yaml.safe_load(f) or {}
        except OSError as e:
            raise InvalidArgumentError(f"Failed to read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise InvalidArgumentError(f"Config {path} must be a mapping")
        flat: dict[str, Any] = {}
        for key, value in doc.items():
            if isinstance(value, dict) and key not in _FIELD_NAMES:
                flat.update(value)
            else:
                flat[key] = value
        return base.with_overrides(**flat)

    def with_overrides(self, **overrides: Any) -> "Settings":
        clean = {k: v for k, v in overrides.items() if v is not None}
        unknown = sorted(set(clean) - _FIELD_NAMES)
        if unknown:
            raise InvalidArgumentError(f"Unknown config keys: {', '.join(unknown)}")
        return replace(self, **clean)

    def resolved(self) -> dict[str, Any]:
        return asdict(self)


_FIELD_NAMES = {f.name for f in fields(Settings)}
