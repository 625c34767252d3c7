"""Pre-caption image transforms, FPR-calibrated data filters and the purifier hook."""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torchvision.transforms.functional as TF

from .captioning import Captioner, CaptionCache, CaptionRecord, caption_or_failure, multi_vlm_caption
from .concepts import tokenize
from .core import ImageTensor
from .embeddings import TextImageScorer, similarity
from .errors import CapabilityError, InvalidArgumentError, OracleError
from .jpeg import jpeg_roundtrip


logger = logging.getLogger(__name__)

TRANSFORM_KINDS = ("jpeg", "gaussian_blur", "gaussian_noise")
FILTER_KINDS = ("image_quality", "caption_quality", "model_loss", "alignment")
FILTER_DIRECTIONS = {
    "image_quality": "reject_below",
    "caption_quality": "reject_below",
    "model_loss": "reject_above",
    "alignment": "reject_below",
}
MIN_CALIBRATION_SCORES = 20
MAX_BLUR_SIGMA = 10.0

LossOracle = Callable[[ImageTensor, str], float]


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    quality: int = 75
    sigma: float = 1.0
    std: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TRANSFORM_KINDS:
            raise InvalidArgumentError(f"unknown transform {self.kind!r}; expected one of {TRANSFORM_KINDS}")
        if self.kind == "jpeg" and not (isinstance(self.quality, int) and 1 <= self.quality <= 100):
            raise InvalidArgumentError(f"jpeg quality must be an int in [1, 100], got {self.quality!r}")
        if self.kind == "gaussian_blur" and not 0.0 <= self.sigma <= MAX_BLUR_SIGMA:
            raise InvalidArgumentError(f"blur sigma must be in [0, {MAX_BLUR_SIGMA}], got {self.sigma}")
        if self.kind == "gaussian_noise" and not 0.0 <= self.std <= 1.0:
            raise InvalidArgumentError(f"noise std must be in [0, 1], got {self.std}")

    @classmethod
    def from_settings(cls, settings: Any, kind: str, seed: Optional[int] = None) -> "TransformSpec":
        return cls(
            kind=kind,
            quality=settings.defense_jpeg_quality,
            sigma=settings.defense_blur_sigma,
            std=settings.defense_noise_std,
            seed=settings.seed if seed is None else seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        params: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "jpeg":
            params["quality"] = self.quality
        elif self.kind == "gaussian_blur":
            params["sigma"] = self.sigma
        else:
            params.update(std=self.std, seed=self.seed)
        return params


def blur_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(3 * sigma) + 1


def apply_transform(image: ImageTensor, spec: TransformSpec) -> ImageTensor:
    """Transformed copy of ``image``; the image id is kept."""
    if spec.kind == "jpeg":
        return jpeg_roundtrip(image, spec.quality)
    if spec.kind == "gaussian_blur":
        if spec.sigma == 0.0:
            return ImageTensor(image.pixels.clone(), image.id)
        k = blur_kernel_size(spec.sigma)
        blurred = TF.gaussian_blur(image.pixels, kernel_size=[k, k], sigma=[spec.sigma, spec.sigma])
        return ImageTensor(blurred.clamp(0.0, 1.0), image.id)
    gen = torch.Generator().manual_seed(spec.seed)
    noise = torch.randn(image.pixels.shape, generator=gen, dtype=image.pixels.dtype) * spec.std
    return ImageTensor((image.pixels + noise).clamp(0.0, 1.0), image.id)


class Purifier(ABC):
    """Image-to-image purification applied before captioning."""

    id: str = "purifier"

    @abstractmethod
    def purify(self, image: ImageTensor) -> ImageTensor:
        ...


class PassThroughPurifier(Purifier):
    id = "identity"

    def purify(self, image: ImageTensor) -> ImageTensor:
        return image


def _defended_view(image: ImageTensor, spec: Optional[TransformSpec],
                   purifier: Optional[Purifier]) -> Tuple[ImageTensor, Optional[Dict[str, Any]]]:
    shown = apply_transform(image, spec) if spec is not None else image
    if purifier is not None:
        shown = purifier.purify(shown)
    params = spec.to_dict() if spec is not None else {}
    if purifier is not None:
        params["purifier"] = purifier.id
    return shown, params or None


def defended_caption(captioner: Captioner, image: ImageTensor, spec: Optional[TransformSpec], prompt: str,
                     cache: Optional[CaptionCache] = None,
                     purifier: Optional[Purifier] = None) -> CaptionRecord:
    """Caption the transformed image, then pair the caption with the original one."""
    shown, params = _defended_view(image, spec, purifier)
    rec = caption_or_failure(captioner, shown, prompt, cache, transform=params)
    paired = replace(rec, image_id=image.id, digest=image.digest())
    assert paired.image_id == image.id and paired.digest == image.digest()
    return paired


def defended_multi_caption(captioners: Sequence[Captioner], image: ImageTensor, spec: Optional[TransformSpec],
                           prompt: str, scorer: TextImageScorer, tau: float, seed: int = 0,
                           cache: Optional[CaptionCache] = None, t_max: float = 10.0,
                           purifier: Optional[Purifier] = None) -> CaptionRecord:
    """Multi-captioner selection over the defended view, paired with the original image."""
    shown, params = _defended_view(image, spec, purifier)
    return multi_vlm_caption(captioners, image, prompt, scorer, tau, seed=seed, cache=cache, t_max=t_max,
                             shown=shown, transform=params)


def min_calibration_scores(fpr_target: float) -> int:
    """Holdout size below which an FPR target cannot be resolved: max(20, ceil(1 / fpr))."""
    return max(MIN_CALIBRATION_SCORES, math.ceil(1.0 / fpr_target - 1e-9))


def calibrate_threshold(benign_scores: Sequence[float], fpr_target: float, direction: str) -> float:
    """Empirical-quantile threshold rejecting at most ``fpr_target`` of the benign scores.

    ``reject_below`` rejects scores strictly below the threshold and
    ``reject_above`` rejects scores strictly above it.
    """
    if not 0.0 < fpr_target < 1.0:
        raise InvalidArgumentError(f"fpr_target must be in (0, 1), got {fpr_target}")
    needed = min_calibration_scores(fpr_target)
    if len(benign_scores) < needed:
        raise InvalidArgumentError(
            f"calibration at fpr {fpr_target} needs at least {needed} benign scores, got {len(benign_scores)}"
        )
    if direction not in ("reject_below", "reject_above"):
        raise InvalidArgumentError(f"unknown direction {direction!r}")
    allowed = math.floor(fpr_target * len(benign_scores) + 1e-9)
    ordered = sorted(float(s) for s in benign_scores)
    if direction == "reject_above":
        ordered.reverse()
    return ordered[allowed]


def is_rejected(score: float, threshold: float, direction: str) -> bool:
    return score < threshold if direction == "reject_below" else score > threshold


def score_image_quality(image: ImageTensor, scorer: TextImageScorer) -> float:
    head = getattr(scorer, "quality_head", None)
    if head is None:
        raise CapabilityError(scorer.id, "quality_head")
    with torch.no_grad():
        return float(head(scorer.image_embedding(image).unsqueeze(0))[0])


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def score_caption_quality(caption: str, reference_corpus: Sequence[str], max_order: int = 4) -> float:
    """BLEU of ``caption`` against every reference caption in the corpus.

    Clipped n-gram precisions up to ``min(max_order, len(caption))``, uniform
    weights, brevity penalty against the closest reference length.
    """
    refs = [tokenize(r) for r in reference_corpus if r and r.strip()]
    if not refs:
        raise InvalidArgumentError("reference corpus must contain at least one caption")
    hyp = tokenize(caption or "")
    if not hyp:
        return 0.0
    order = min(max_order, len(hyp))
    log_precision = 0.0
    for n in range(1, order + 1):
        counts = _ngrams(hyp, n)
        max_ref: Counter = Counter()
        for ref in refs:
            max_ref |= _ngrams(ref, n)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_precision += math.log(clipped / sum(counts.values())) / order
    ref_len = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
    bp = 1.0 if len(hyp) > ref_len else math.exp(1.0 - ref_len / len(hyp))
    return bp * math.exp(log_precision)


def score_model_loss(image: ImageTensor, caption: str, loss_oracle: LossOracle,
                     item_id: Optional[str] = None) -> float:
    try:
        return float(loss_oracle(image, caption))
    except Exception as e:
        raise OracleError(item_id or image.id, e) from e


def score_alignment(image: ImageTensor, caption: str, scorer: TextImageScorer) -> float:
    return similarity(scorer, image, caption)


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    threshold: Optional[float] = None
    calibration: str = "fpr_target"
    fpr_target: float = 0.05

    def __post_init__(self) -> None:
        if self.kind not in FILTER_KINDS:
            raise InvalidArgumentError(f"unknown filter {self.kind!r}; expected one of {FILTER_KINDS}")
        if self.calibration not in ("fixed", "fpr_target"):
            raise InvalidArgumentError(f"unknown calibration {self.calibration!r}")
        if self.calibration == "fpr_target" and not 0.0 < self.fpr_target < 1.0:
            raise InvalidArgumentError(f"fpr_target must be in (0, 1), got {self.fpr_target}")
        if self.calibration == "fixed" and self.threshold is None:
            raise InvalidArgumentError("fixed calibration needs a threshold")

    @property
    def direction(self) -> str:
        return FILTER_DIRECTIONS[self.kind]


@dataclass
class FilterItem:
    item_id: str
    score: float
    poison: bool = False


@dataclass
class FilterReport:
    kind: str
    direction: str
    threshold: float
    fpr_target: Optional[float]
    filtering_rate: float
    achieved_fpr: float
    calibration_fpr: float
    n_poison: int
    n_benign: int
    rejected: List[str] = field(default_factory=list)
    scores: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def summary_row(self) -> Dict[str, Any]:
        return {"filter": self.kind, "filtering_rate": self.filtering_rate, "fpr": self.achieved_fpr}


def _rate(hits: int, total: int) -> float:
    return hits / total if total else 0.0


def run_filter(items: Sequence[FilterItem], spec: FilterSpec, benign_holdout: Sequence[FilterItem]) -> FilterReport:
    """Calibrate on the holdout, then report poison removal and benign FPR on ``items``."""
    overlap = {i.item_id for i in items} & {h.item_id for h in benign_holdout}
    if overlap:
        raise InvalidArgumentError(f"holdout overlaps evaluated items: {sorted(overlap)[:5]}")
    holdout_scores = [h.score for h in benign_holdout]
    if spec.calibration == "fpr_target":
        threshold = calibrate_threshold(holdout_scores, spec.fpr_target, spec.direction)
    else:
        threshold = float(spec.threshold)

    rejected = [i for i in items if is_rejected(i.score, threshold, spec.direction)]
    n_poison = sum(1 for i in items if i.poison)
    n_benign = len(items) - n_poison
    if n_poison == 0:
        logger.warning(f"Filter {spec.kind}: no poison items to measure the filtering rate on")
    report = FilterReport(
        kind=spec.kind,
        direction=spec.direction,
        threshold=threshold,
        fpr_target=spec.fpr_target if spec.calibration == "fpr_target" else None,
        filtering_rate=_rate(sum(1 for i in rejected if i.poison), n_poison),
        achieved_fpr=_rate(sum(1 for i in rejected if not i.poison), n_benign),
        calibration_fpr=_rate(sum(1 for s in holdout_scores if is_rejected(s, threshold, spec.direction)),
                              len(holdout_scores)),
        n_poison=n_poison,
        n_benign=n_benign,
        rejected=[i.item_id for i in rejected],
        scores={i.item_id: i.score for i in items},
    )
    logger.info(
        f"Filter {spec.kind}: threshold={threshold:.4f} filtering_rate={report.filtering_rate:.3f} "
        f"fpr={report.achieved_fpr:.3f}"
    )
    return report


def filter_table(reports: Sequence[FilterReport]) -> List[Dict[str, Any]]:
    """Rows of (filter, filtering rate, FPR), most effective first."""
    return sorted((r.summary_row() for r in reports), key=lambda row: -row["filtering_rate"])
