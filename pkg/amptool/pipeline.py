from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from rich.progress import track

from .attacks import (
    SWEEP_BUDGETS,
    AdaptiveLossTerms,
    AttackJob,
    EnsembleSpec,
    ResultsWriter,
    adaptive_perturb,
    budget_sweep,
    ensemble_perturb,
    load_results,
    perturbed_id,
    white_box_perturb,
)
from .captioning import (
    CaptionCache,
    Captioner,
    CaptionerDescriptor,
    CaptionRecord,
    MockCaptioner,
    build_captioner,
    caption_or_failure,
)
from .config import Settings
from .core import AttackMode, ImageTensor, PerturbationResult, load_image
from .dataset import (
    IMAGE_SUFFIXES,
    ConceptPair,
    CorpusManifest,
    CorpusRecord,
    GroupingOutcome,
    group_corpus,
    resolve_path,
    scan_corpus,
    select_attack_images,
    top_concepts,
)
from .defenses import (
    FilterItem,
    FilterReport,
    FilterSpec,
    TransformSpec,
    defended_caption,
    defended_multi_caption,
    run_filter,
    score_alignment,
    score_caption_quality,
    score_image_quality,
    score_model_loss,
)
from .embeddings import EmbeddingCache, FeatureExtractor, TextImageScorer, build_extractor, build_scorer
from .errors import AggregateCaptionError, AmpError, DependencyError, InvalidArgumentError
from .export import PoisonSetExport, export_poison_set
from .metrics import EvaluationItem, MetricsReport, MislabelJudgment, evaluate_items, psr_details
from .remote import RequestLedger
from .utils import seed_everything


logger = logging.getLogger(__name__)


@dataclass
class AttackRunSummary:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)
    jobs: int = 0

    @property
    def succeeded(self) -> int:
        return self.jobs - len(self.failures)


class AmpPipeline:
    """Stage orchestration: group, attack, caption, evaluate, defend, export.

    Encoders and scorers are built on first use so stages that do not need
    model weights (export) never load them.
    """

    def __init__(self, settings: Settings, scorer: Optional[TextImageScorer] = None,
                 extractor: Optional[FeatureExtractor] = None,
                 ensemble_extractors: Optional[List[FeatureExtractor]] = None,
                 ledger: Optional[RequestLedger] = None) -> None:
        self.settings = settings
        self._scorer = scorer
        self._extractor = extractor
        self._ensemble_extractors = ensemble_extractors
        self.ledger = ledger or RequestLedger()

    @classmethod
    def from_settings(cls, settings: Settings) -> "AmpPipeline":
        seed_everything(settings.seed)
        return cls(settings)

    @property
    def scorer(self) -> TextImageScorer:
        if self._scorer is None:
            s = self.settings
            self._scorer = build_scorer(s.metric_scorer, device=s.device, scale=s.similarity_scale,
                                        aesthetic_head=s.aesthetic_head)
        if self._scorer.embedding_cache is None:
            self._scorer.embedding_cache = self.embedding_cache()
        return self._scorer

    @property
    def extractor(self) -> FeatureExtractor:
        if self._extractor is None:
            self._extractor = build_extractor(self.settings.attack_extractor, device=self.settings.device)
        return self._extractor

    @property
    def ensemble(self) -> EnsembleSpec:
        if self._ensemble_extractors is None:
            self._ensemble_extractors = [
                build_extractor(spec, device=self.settings.device) for spec in self.settings.ensemble_extractors
            ]
        return EnsembleSpec.from_settings(self.settings, self._ensemble_extractors)

    def caption_cache(self) -> CaptionCache:
        return CaptionCache(Path(self.settings.cache_dir) / "captions.jsonl")

    def embedding_cache(self) -> EmbeddingCache:
        return EmbeddingCache(Path(self.settings.cache_dir) / "embeddings")

    def captioners(self, ids: Optional[Sequence[str]] = None, mock_table: Optional[str] = None) -> List[Captioner]:
        if mock_table:
            return [MockCaptioner.from_file(CaptionerDescriptor(id="mock", kind="mock", table=mock_table), mock_table)]
        descriptors = [CaptionerDescriptor.from_dict(d) for d in self.settings.captioners]
        if ids:
            known = {d.id: d for d in descriptors}
            missing = [i for i in ids if i not in known]
            if missing:
                raise InvalidArgumentError(f"unknown captioner(s): {', '.join(missing)}")
            descriptors = [known[i] for i in ids]
        if not descriptors:
            raise InvalidArgumentError("no captioners configured; add a 'captioners' section or pass --mock-table")
        return [build_captioner(d, device=self.settings.device, ledger=self.ledger) for d in descriptors]

    def _map(self, fn: Callable[[Any], Any], items: Sequence[Any], description: str = "Working") -> List[Any]:
        with ThreadPoolExecutor(max_workers=max(1, self.settings.workers)) as pool:
            return list(track(pool.map(fn, items), description=description, total=len(items), transient=True))

    # -- grouping -----------------------------------------------------------

    def group(self, corpus_dir: str | Path, base_dir: Optional[Path] = None,
              caption_fn: Optional[Callable[[ImageTensor], str]] = None) -> GroupingOutcome:
        entries = scan_corpus(corpus_dir)
        if not entries:
            raise InvalidArgumentError(f"no images found in {corpus_dir}")
        return group_corpus(
            entries,
            self.scorer,
            caption_fn=caption_fn,
            image_size=self.settings.image_size,
            template=self.settings.zero_shot_template,
            workers=self.settings.workers,
            base_dir=base_dir,
        )

    def load_record_image(self, record: CorpusRecord, base: Path) -> ImageTensor:
        return load_image(resolve_path(record.path, base), size=self.settings.image_size, image_id=record.id)

    # -- attacks ------------------------------------------------------------

    def plan_attacks(self, manifest: CorpusManifest, pairs: Sequence[ConceptPair], per_pair: int,
                     mode: AttackMode | str, min_confidence: Optional[float] = None,
                     **overrides: Any) -> List[AttackJob]:
        mode = AttackMode(mode)
        threshold = self.settings.min_confidence if min_confidence is None else min_confidence
        jobs = []
        for pair in pairs:
            selection = select_attack_images(manifest, pair, per_pair, threshold,
                                             seed=self.settings.seed)
            for ref, tgt in zip(selection.references, selection.targets):
                jobs.append(AttackJob(
                    reference_id=ref.id,
                    target_id=tgt.id,
                    mode=mode.value,
                    target_concept=pair.target_concept,
                    reference_concept=pair.reference_concept,
                    **overrides,
                ))
        return jobs

    def run_job(self, job: AttackJob, reference: ImageTensor, target: ImageTensor, sweep: bool = False,
                target_caption: Optional[str] = None) -> List[PerturbationResult]:
        config = job.config(self.settings)
        if config.mode is AttackMode.WHITE_BOX:
            attack, kwargs = white_box_perturb, {"extractor": self.extractor}
        elif config.mode is AttackMode.ADAPTIVE:
            caption = target_caption or self.settings.zero_shot_template.format(label=job.target_concept or "")
            scorer = self.scorer if config.alpha > 0 else None
            kwargs = {"extractor": self.extractor, "scorer": scorer,
                      "terms": AdaptiveLossTerms.from_config(config, caption)}
            attack = adaptive_perturb
        else:
            attack, kwargs = ensemble_perturb, {"ensemble": self.ensemble}
        if sweep:
            return budget_sweep(attack, reference, target, config, SWEEP_BUDGETS, **kwargs)
        return [attack(reference, target, config=config, **kwargs)]

    def run_attacks(self, jobs: Sequence[AttackJob], manifest: CorpusManifest, base: Path,
                    writer: ResultsWriter, sweep: bool = False,
                    target_caption: Optional[str] = None) -> AttackRunSummary:
        records = manifest.by_id()
        summary = AttackRunSummary(jobs=len(jobs))

        def work(job: AttackJob) -> Tuple[AttackJob, Optional[List[Dict[str, Any]]], Optional[str]]:
            key = perturbed_id(job.reference_id, job.target_id)
            try:
                if job.reference_id not in records or job.target_id not in records:
                    raise DependencyError("group", f"{key}: image missing from the corpus manifest")
                reference = self.load_record_image(records[job.reference_id], base)
                target = self.load_record_image(records[job.target_id], base)
                results = self.run_job(job, reference, target, sweep=sweep, target_caption=target_caption)
            except (AmpError, OSError, RuntimeError) as e:
                logger.error(f"Attack {key} failed: {e}")
                return job, None, f"{type(e).__name__}: {e}"
            extra = {"target_concept": job.target_concept, "reference_concept": job.reference_concept}
            rows = []
            for result in results:
                tag = f"eps{round(result.config.budget * 255)}" if sweep else None
                rows.append(writer.add(result, extra=extra, tag=tag))
            return job, rows, None

        for job, rows, error in self._map(work, jobs, "Attacking"):
            if rows is None:
                summary.failures[perturbed_id(job.reference_id, job.target_id)] = error or "unknown error"
            else:
                summary.rows.extend(rows)
        writer.flush()
        return summary

    # -- captioning ---------------------------------------------------------

    def collect_images(self, manifest: CorpusManifest, base: Path, results_root: Path,
                       include_sources: bool = True) -> List[ImageTensor]:
        """Perturbed images from the results directory plus their source images."""
        rows = load_results(results_root)
        records = manifest.by_id()
        images = [
            load_image(results_root / row["image"], size=None, image_id=row["perturbed_id"]) for row in rows
        ]
        if include_sources:
            source_ids = sorted({row["reference_id"] for row in rows} | {row["target_id"] for row in rows})
            for image_id in source_ids:
                if image_id not in records:
                    raise DependencyError("group", f"{image_id} is not in the corpus manifest")
                images.append(self.load_record_image(records[image_id], base))
        return images

    def caption_images(self, images: Sequence[ImageTensor], captioners: Sequence[Captioner], prompt: str,
                       tau: Optional[float] = None, transform: Optional[TransformSpec] = None,
                       cache: Optional[CaptionCache] = None) -> List[CaptionRecord]:
        if tau is not None and len(captioners) >= 2:
            def work(image: ImageTensor) -> List[CaptionRecord]:
                try:
                    rec = defended_multi_caption(captioners, image, transform, prompt, self.scorer, tau,
                                                 seed=self.settings.seed, cache=cache,
                                                 t_max=self.settings.tau_t_max)
                except AggregateCaptionError as e:
                    logger.error(f"All captioners failed on {image.id}: {e}")
                    selector = "multi[" + ",".join(c.id for c in captioners) + "]"
                    rec = CaptionRecord(image.id, selector, prompt, "", status="error",
                                        error_class=type(e).__name__, extras={"failures": e.failures})
                return [rec]
        else:
            def work(image: ImageTensor) -> List[CaptionRecord]:
                if transform is not None:
                    return [defended_caption(c, image, transform, prompt, cache) for c in captioners]
                return [caption_or_failure(c, image, prompt, cache) for c in captioners]

        out: List[CaptionRecord] = []
        for batch in self._map(work, images, "Captioning"):
            out.extend(batch)
        return out

    # -- evaluation ---------------------------------------------------------

    def _evaluation_items(self, manifest: CorpusManifest, base: Path, results_root: Path,
                          caption_records: Sequence[CaptionRecord]) -> List[EvaluationItem]:
        rows = {row["perturbed_id"]: row for row in load_results(results_root)}
        records = manifest.by_id()
        by_key = {(r.image_id, r.captioner_id, r.prompt): r for r in caption_records}
        images: Dict[str, ImageTensor] = {}

        def source(image_id: str) -> ImageTensor:
            if image_id not in images:
                if image_id not in records:
                    raise DependencyError("group", f"{image_id} is not in the corpus manifest")
                images[image_id] = self.load_record_image(records[image_id], base)
            return images[image_id]

        def self_record(image_id: str, rec: CaptionRecord) -> CaptionRecord:
            found = by_key.get((image_id, rec.captioner_id, rec.prompt))
            return found or CaptionRecord(image_id, rec.captioner_id, rec.prompt, "", status="missing")

        items = []
        for rec in caption_records:
            row = rows.get(rec.image_id)
            if row is None:
                continue
            target_concept = row.get("target_concept") or records[row["target_id"]].concept
            reference_concept = row.get("reference_concept") or records[row["reference_id"]].concept
            if not target_concept or not reference_concept:
                logger.warning(f"{rec.image_id}: no concept pair recorded; skipped")
                continue
            items.append(EvaluationItem(
                pair=ConceptPair(target_concept, reference_concept),
                record=rec,
                target_image=source(row["target_id"]),
                reference_image=source(row["reference_id"]),
                target_self=self_record(row["target_id"], rec),
                reference_self=self_record(row["reference_id"], rec),
            ))
        return items

    def evaluate(self, manifest: CorpusManifest, base: Path, results_root: Path,
                 caption_records: Sequence[CaptionRecord], delta_threshold: Optional[float] = None,
                 psr_dirs: Optional[Mapping[str, Path]] = None,
                 config: Optional[Mapping[str, Any]] = None) -> Tuple[MetricsReport, List[MislabelJudgment]]:
        if not caption_records:
            raise DependencyError("caption", "no caption records")
        items = self._evaluation_items(manifest, base, Path(results_root), caption_records)
        if not items:
            raise DependencyError("caption", "no captions of attack results to evaluate")
        threshold = self.settings.delta_threshold if delta_threshold is None else delta_threshold
        report, judgments = evaluate_items(items, self.scorer, threshold, config or self.settings.resolved(),
                                           template=self.settings.zero_shot_template)
        if psr_dirs:
            for concept, directory in sorted(psr_dirs.items()):
                labels = self.psr_labels(manifest, concept)
                doses = self._dose_dirs(Path(directory))
                if doses:
                    curve = {
                        str(dose): psr_details(self._load_dir(d), concept, labels, self.scorer,
                                               self.settings.zero_shot_template).psr
                        for dose, d in doses
                    }
                    report.psr_dose_response[concept] = curve
                    report.psr_by_concept[concept] = curve[str(doses[-1][0])]
                else:
                    report.psr_by_concept[concept] = psr_details(
                        self._load_dir(Path(directory)), concept, labels, self.scorer,
                        self.settings.zero_shot_template,
                    ).psr
            report.psr = sum(report.psr_by_concept.values()) / len(report.psr_by_concept)
        return report, judgments

    def psr_labels(self, manifest: CorpusManifest, concept: str) -> List[str]:
        """Zero-shot label set for PSR: the top-k concepts, plus ``concept`` if it is not among them."""
        labels = top_concepts(manifest, self.settings.top_k_concepts)
        if concept not in labels:
            logger.warning(f"{concept} is not a top-{self.settings.top_k_concepts} concept; added to the PSR labels")
            labels.append(concept)
        return labels

    @staticmethod
    def _dose_dirs(directory: Path) -> List[Tuple[int, Path]]:
        """Integer-named subdirectories (poison counts), ascending."""
        if not directory.is_dir():
            raise DependencyError("generate", f"{directory} is not a directory of generated images")
        doses = [(int(p.name), p) for p in directory.iterdir() if p.is_dir() and p.name.isdigit()]
        return sorted(doses)

    def _load_dir(self, directory: Path) -> List[ImageTensor]:
        paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise DependencyError("generate", f"no generated images in {directory}")
        return [load_image(p, size=None) for p in paths]

    # -- defenses -----------------------------------------------------------

    def defend_transform(self, manifest: CorpusManifest, base: Path, results_root: Path,
                         clean_records: Sequence[CaptionRecord], captioners: Sequence[Captioner],
                         spec: TransformSpec, prompt: str,
                         cache: Optional[CaptionCache] = None) -> Tuple[MetricsReport, List[MislabelJudgment]]:
        """Re-caption transformed perturbed images and score them against the clean self-captions."""
        results_root = Path(results_root)
        perturbed = self.collect_images(manifest, base, results_root, include_sources=False)
        defended = self.caption_images(perturbed, captioners, prompt, transform=spec, cache=cache)
        perturbed_ids = {img.id for img in perturbed}
        sources = [r for r in clean_records if r.image_id not in perturbed_ids]
        config = dict(self.settings.resolved(), transform=spec.to_dict())
        return self.evaluate(manifest, base, results_root, sources + defended, config=config)

    def defend_filter(self, manifest: CorpusManifest, base: Path, results_root: Path,
                      caption_records: Sequence[CaptionRecord], spec: FilterSpec,
                      loss_scores: Optional[Mapping[str, float]] = None) -> FilterReport:
        """Score poison and benign (image, caption) pairs, calibrate on a benign holdout, filter."""
        results_root = Path(results_root)
        rows = {row["perturbed_id"]: row for row in load_results(results_root)}
        poison: Dict[str, Tuple[Path, str]] = {}
        for rec in caption_records:
            if rec.image_id in rows and rec.ok and rec.image_id not in poison:
                poison[rec.image_id] = (results_root / rows[rec.image_id]["image"], rec.caption)
        if not poison:
            raise DependencyError("caption", "no successful captions of attack results")
        used = {row["reference_id"] for row in rows.values()} | {row["target_id"] for row in rows.values()}
        benign = [r for r in manifest.records if r.caption and r.id not in used]
        random.Random(self.settings.seed).shuffle(benign)
        half = len(benign) // 2
        holdout, evaluated = benign[:half], benign[half:]

        holdout_captions = {r.id: r.caption for r in holdout}

        def score(item_id: str, image: ImageTensor, caption: str) -> float:
            if spec.kind == "image_quality":
                return score_image_quality(image, self.scorer)
            if spec.kind == "caption_quality":
                refs = [c for i, c in holdout_captions.items() if i != item_id]
                return score_caption_quality(caption, refs)
            if spec.kind == "model_loss":
                if loss_scores is None:
                    raise InvalidArgumentError("model_loss filtering needs precomputed loss scores")
                return score_model_loss(image, caption, lambda img, cap: loss_scores[item_id], item_id)
            return score_alignment(image, caption, self.scorer)

        def benign_item(rec: CorpusRecord) -> FilterItem:
            return FilterItem(rec.id, score(rec.id, self.load_record_image(rec, base), rec.caption or ""))

        def poison_item(item_id: str) -> FilterItem:
            path, caption = poison[item_id]
            image = load_image(path, size=None, image_id=item_id)
            return FilterItem(item_id, score(item_id, image, caption), poison=True)

        holdout_items = self._map(benign_item, holdout, "Scoring holdout")
        items = self._map(poison_item, sorted(poison), "Scoring poison")
        items += self._map(benign_item, evaluated, "Scoring benign")
        return run_filter(items, spec, holdout_items)

    # -- export -------------------------------------------------------------

    def export(self, results_root: Path, judgments: Sequence[MislabelJudgment], out_dir: Path,
               per_pair_count: int = 125, include_failures: bool = False) -> PoisonSetExport:
        return export_poison_set(results_root, judgments, out_dir, per_pair_count, include_failures)
