"""Mislabel judgments and the MSR / AAR / BAR / PSR harness."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .captioning import CaptionRecord
from .concepts import caption_nouns, lemmatize_noun
from .core import ImageTensor
from .dataset import ConceptPair
from .embeddings import DEFAULT_TEMPLATE, TextImageScorer, similarity, zero_shot_classify
from .errors import InvalidArgumentError, ScaleMismatchError
from .utils import compute_content_hash, read_jsonl, write_jsonl


logger = logging.getLogger(__name__)


@dataclass
class MislabelJudgment:
    image_id: str
    target_concept: str
    reference_concept: str
    condition_no_reference: bool
    condition_has_target: bool
    delta: Optional[float]
    condition_delta: bool
    captioner_id: str = ""
    prompt: str = ""
    sim_target: Optional[float] = None
    sim_reference: Optional[float] = None
    scale: float = 100.0
    status: str = "ok"
    caption: str = ""

    @property
    def success(self) -> bool:
        return self.condition_no_reference and self.condition_has_target and self.condition_delta

    @property
    def pair_key(self) -> str:
        return f"{self.target_concept}<-{self.reference_concept}"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["success"] = self.success
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MislabelJudgment":
        row = dict(data)
        row.pop("success", None)
        return cls(**row)


def judge_mislabel(record: CaptionRecord, pair: ConceptPair, target_img: ImageTensor,
                   reference_img: ImageTensor, scorer: TextImageScorer,
                   delta_threshold: float = 0.0) -> MislabelJudgment:
    """Success iff the caption drops the reference concept, names the target and delta > threshold."""
    base = dict(
        image_id=record.image_id,
        target_concept=pair.target_concept,
        reference_concept=pair.reference_concept,
        captioner_id=record.captioner_id,
        prompt=record.prompt,
        caption=record.caption,
        scale=scorer.scale,
    )
    if not record.ok:
        return MislabelJudgment(
            condition_no_reference=False, condition_has_target=False, delta=None,
            condition_delta=False, status=record.status if record.status != "ok" else "empty", **base,
        )
    nouns = set(caption_nouns(record.caption))
    sim_t = similarity(scorer, target_img, record.caption)
    sim_r = similarity(scorer, reference_img, record.caption)
    delta = sim_t - sim_r
    return MislabelJudgment(
        condition_no_reference=lemmatize_noun(pair.reference_concept) not in nouns,
        condition_has_target=lemmatize_noun(pair.target_concept) in nouns,
        delta=delta,
        condition_delta=delta > delta_threshold,
        sim_target=sim_t,
        sim_reference=sim_r,
        **base,
    )


def compute_msr(judgments: Sequence[MislabelJudgment]) -> float:
    if not judgments:
        raise InvalidArgumentError("MSR needs at least one judgment")
    return sum(1 for j in judgments if j.success) / len(judgments)


@dataclass
class AlignmentStats:
    value: float
    used: int
    skipped_zero_denominator: int
    clipped: int
    ratios: List[float] = field(default_factory=list)


def alignment_stats(perturbed_records: Sequence[CaptionRecord], images: Sequence[ImageTensor],
                    self_records: Sequence[CaptionRecord], scorer: TextImageScorer) -> AlignmentStats:
    """Mean of sim(x, caption(x_adv)) / sim(x, caption(x)), each ratio clipped to [0, 1].

    A failed perturbed caption contributes a zero numerator. Items whose
    denominator is unavailable or non-positive are skipped and counted.
    """
    if not (len(perturbed_records) == len(images) == len(self_records)):
        raise InvalidArgumentError("alignment inputs must be aligned triples")
    ratios: List[float] = []
    skipped = clipped = 0
    for rec, image, self_rec in zip(perturbed_records, images, self_records):
        if not self_rec.ok:
            skipped += 1
            continue
        den = similarity(scorer, image, self_rec.caption)
        if den <= 0.0:
            skipped += 1
            continue
        num = similarity(scorer, image, rec.caption) if rec.ok else 0.0
        ratio = num / den
        if ratio > 1.0 or ratio < 0.0:
            clipped += 1
            ratio = min(1.0, max(0.0, ratio))
        ratios.append(ratio)
    if skipped:
        logger.warning(f"Alignment: skipped {skipped} items with zero or unavailable denominators")
    value = float(np.mean(ratios)) if ratios else 0.0
    return AlignmentStats(value, len(ratios), skipped, clipped, ratios)


def compute_aar(perturbed_records: Sequence[CaptionRecord], target_images: Sequence[ImageTensor],
                target_self_records: Sequence[CaptionRecord], scorer: TextImageScorer) -> float:
    return alignment_stats(perturbed_records, target_images, target_self_records, scorer).value


def compute_bar(perturbed_records: Sequence[CaptionRecord], reference_images: Sequence[ImageTensor],
                reference_self_records: Sequence[CaptionRecord], scorer: TextImageScorer) -> float:
    return alignment_stats(perturbed_records, reference_images, reference_self_records, scorer).value


@dataclass
class PSRResult:
    psr: float
    concept: str
    n: int
    predictions: List[str] = field(default_factory=list)


def psr_details(generated_images: Sequence[ImageTensor], concept: str, label_set: Sequence[str],
                scorer: TextImageScorer, template: str = DEFAULT_TEMPLATE) -> PSRResult:
    if concept not in label_set:
        raise InvalidArgumentError(f"concept {concept!r} is not in the label set")
    if not generated_images:
        raise InvalidArgumentError("PSR needs at least one generated image")
    labels = list(label_set)
    predictions = [zero_shot_classify(scorer, img, labels, template).label for img in generated_images]
    hits = sum(1 for p in predictions if p == concept)
    return PSRResult(1.0 - hits / len(predictions), concept, len(predictions), predictions)


def compute_psr(generated_images: Sequence[ImageTensor], concept: str, label_set: Sequence[str],
                scorer: TextImageScorer, template: str = DEFAULT_TEMPLATE) -> float:
    return psr_details(generated_images, concept, label_set, scorer, template).psr


def psr_dose_response(images_by_dose: Mapping[int, Sequence[ImageTensor]], concept: str,
                      label_set: Sequence[str], scorer: TextImageScorer,
                      template: str = DEFAULT_TEMPLATE) -> Dict[int, float]:
    """PSR per number of injected poison samples."""
    return {
        dose: compute_psr(images_by_dose[dose], concept, label_set, scorer, template)
        for dose in sorted(images_by_dose)
    }


@dataclass
class LengthStats:
    count: int
    mean: float
    quantiles: Dict[str, float]
    bin_edges: List[int]
    histogram: List[int]


def caption_length_stats(records: Iterable[CaptionRecord | str], bin_width: int = 20) -> LengthStats:
    """Character-count distribution of successful captions."""
    lengths = []
    for rec in records:
        if isinstance(rec, str):
            lengths.append(len(rec))
        elif rec.ok:
            lengths.append(len(rec.caption))
    if not lengths:
        raise InvalidArgumentError("caption length stats need at least one caption")
    arr = np.asarray(lengths, dtype=np.int64)
    edges = np.arange(0, (int(arr.max()) // bin_width + 2) * bin_width, bin_width)
    counts, _ = np.histogram(arr, bins=edges)
    qs = {f"p{q}": float(np.quantile(arr, q / 100)) for q in (10, 25, 50, 75, 90)}
    return LengthStats(len(lengths), float(arr.mean()), qs, edges.tolist(), counts.tolist())


def delta_summary(judgments: Sequence[MislabelJudgment]) -> Dict[str, Any]:
    deltas = np.asarray([j.delta for j in judgments if j.delta is not None], dtype=np.float64)
    if deltas.size == 0:
        return {"n": 0}
    return {
        "n": int(deltas.size),
        "mean": float(deltas.mean()),
        "min": float(deltas.min()),
        "max": float(deltas.max()),
        "share_abs_le_5": float((np.abs(deltas) <= 5).mean()),
        "share_gt_15": float((deltas > 15).mean()),
        "share_gt_20": float((deltas > 20).mean()),
    }


@dataclass
class EvaluationItem:
    pair: ConceptPair
    record: CaptionRecord
    target_image: ImageTensor
    reference_image: ImageTensor
    target_self: CaptionRecord
    reference_self: CaptionRecord


@dataclass
class MetricsReport:
    msr: float
    aar: float
    bar: float
    psr: Optional[float] = None
    counts: Dict[str, int] = field(default_factory=dict)
    per_pair: Dict[str, Dict[str, float]] = field(default_factory=dict)
    per_prompt: Dict[str, Dict[str, float]] = field(default_factory=dict)
    per_captioner: Dict[str, Dict[str, float]] = field(default_factory=dict)
    similarity_scale: float = 100.0
    scorer_id: str = ""
    template: str = DEFAULT_TEMPLATE
    delta_threshold: float = 0.0
    config_digest: str = ""
    delta_summary: Dict[str, Any] = field(default_factory=dict)
    caption_lengths: Optional[Dict[str, Any]] = None
    psr_by_concept: Dict[str, float] = field(default_factory=dict)
    psr_dose_response: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("msr", "aar", "bar", "psr"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name}={value} outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        return cls(**dict(data))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def config_digest(config: Mapping[str, Any]) -> str:
    return compute_content_hash(json.dumps(config, sort_keys=True, default=str))


def _group_summary(items: Sequence[EvaluationItem], judgments: Sequence[MislabelJudgment],
                   scorer: TextImageScorer, key: Callable[[EvaluationItem], str]) -> Dict[str, Dict[str, float]]:
    groups: Dict[str, List[int]] = defaultdict(list)
    for i, item in enumerate(items):
        groups[key(item)].append(i)
    out = {}
    for name, idx in sorted(groups.items()):
        sub = [items[i] for i in idx]
        aar = alignment_stats([s.record for s in sub], [s.target_image for s in sub], [s.target_self for s in sub], scorer)
        bar = alignment_stats([s.record for s in sub], [s.reference_image for s in sub], [s.reference_self for s in sub], scorer)
        out[name] = {
            "n": len(idx),
            "msr": compute_msr([judgments[i] for i in idx]),
            "aar": aar.value,
            "bar": bar.value,
        }
    return out


def evaluate_items(items: Sequence[EvaluationItem], scorer: TextImageScorer, delta_threshold: float = 0.0,
                   config: Optional[Mapping[str, Any]] = None,
                   template: str = DEFAULT_TEMPLATE) -> tuple[MetricsReport, List[MislabelJudgment]]:
    if not items:
        raise InvalidArgumentError("nothing to evaluate")
    judgments = [
        judge_mislabel(it.record, it.pair, it.target_image, it.reference_image, scorer, delta_threshold)
        for it in items
    ]
    records = [it.record for it in items]
    aar = alignment_stats(records, [it.target_image for it in items], [it.target_self for it in items], scorer)
    bar = alignment_stats(records, [it.reference_image for it in items], [it.reference_self for it in items], scorer)
    successes = sum(1 for j in judgments if j.success)
    counts = {
        "judgments": len(judgments),
        "successes": successes,
        "refusals": sum(1 for r in records if r.status == "refused"),
        "caption_failures": sum(1 for r in records if r.status == "error"),
        "aar_used": aar.used,
        "aar_skipped": aar.skipped_zero_denominator,
        "aar_clipped": aar.clipped,
        "bar_used": bar.used,
        "bar_skipped": bar.skipped_zero_denominator,
        "bar_clipped": bar.clipped,
    }
    lengths = None
    if any(r.ok for r in records):
        lengths = asdict(caption_length_stats(records))
    report = MetricsReport(
        msr=successes / len(judgments),
        aar=aar.value,
        bar=bar.value,
        counts=counts,
        per_pair=_group_summary(items, judgments, scorer, lambda it: it.pair.key()),
        per_prompt=_group_summary(items, judgments, scorer, lambda it: it.record.prompt),
        per_captioner=_group_summary(items, judgments, scorer, lambda it: it.record.captioner_id),
        similarity_scale=scorer.scale,
        scorer_id=scorer.id,
        template=template,
        delta_threshold=delta_threshold,
        config_digest=config_digest(config or {}),
        delta_summary=delta_summary(judgments),
        caption_lengths=lengths,
    )
    logger.info(f"MSR={report.msr:.3f} AAR={report.aar:.3f} BAR={report.bar:.3f} over {len(judgments)} items")
    return report, judgments


def merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Combine shards evaluated with the same scorer scale; rates are count-weighted means."""
    if not reports:
        raise InvalidArgumentError("no reports to merge")
    scales = {r.similarity_scale for r in reports}
    if len(scales) > 1:
        raise ScaleMismatchError(f"cannot merge reports with similarity scales {sorted(scales)}")

    def weighted(attr: str, weight_key: str) -> float:
        total = sum(r.counts.get(weight_key, 0) for r in reports)
        if total == 0:
            return 0.0
        return sum(getattr(r, attr) * r.counts.get(weight_key, 0) for r in reports) / total

    counts: Dict[str, int] = defaultdict(int)
    for r in reports:
        for k, v in r.counts.items():
            counts[k] += v
    per_pair: Dict[str, Dict[str, float]] = {}
    for r in reports:
        for key, row in r.per_pair.items():
            if key in per_pair:
                prev = per_pair[key]
                n = prev["n"] + row["n"]
                per_pair[key] = {
                    "n": n,
                    **{m: (prev[m] * prev["n"] + row[m] * row["n"]) / n for m in ("msr", "aar", "bar")},
                }
            else:
                per_pair[key] = dict(row)
    first = reports[0]
    return MetricsReport(
        msr=counts["successes"] / counts["judgments"] if counts["judgments"] else 0.0,
        aar=weighted("aar", "aar_used"),
        bar=weighted("bar", "bar_used"),
        counts=dict(counts),
        per_pair=per_pair,
        similarity_scale=first.similarity_scale,
        scorer_id=first.scorer_id,
        template=first.template,
        delta_threshold=first.delta_threshold,
        config_digest=first.config_digest,
    )


def write_judgments(path: str | Path, judgments: Iterable[MislabelJudgment]) -> int:
    return write_jsonl(path, (j.to_dict() for j in judgments))


def load_judgments(path: str | Path) -> List[MislabelJudgment]:
    return [MislabelJudgment.from_dict(row) for row in read_jsonl(path)]
