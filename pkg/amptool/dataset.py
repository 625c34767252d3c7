from __future__ import annotations

import itertools
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import torch

from .concepts import extract_candidate_concepts
from .core import CANONICAL_SIZE, ImageTensor, load_image
from .embeddings import DEFAULT_TEMPLATE, TextImageScorer, zero_shot_classify
from .errors import InvalidArgumentError
from .utils import read_jsonl, write_jsonl


logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".webp", ".bmp"}


@dataclass(frozen=True)
class ConceptAssignment:
    image_id: str
    concept: Optional[str]
    confidence: float
    candidates: Tuple[str, ...] = ()

    @property
    def assigned(self) -> bool:
        return self.concept is not None


@dataclass(frozen=True)
class ConceptPair:
    target_concept: str
    reference_concept: str

    def __post_init__(self) -> None:
        if not self.target_concept or not self.reference_concept:
            raise InvalidArgumentError("concept pair needs two nonempty concepts")
        if self.target_concept == self.reference_concept:
            raise InvalidArgumentError(f"target and reference are both {self.target_concept!r}")

    def key(self) -> str:
        return f"{self.target_concept}<-{self.reference_concept}"


@dataclass
class CorpusRecord:
    id: str
    path: str
    caption: Optional[str] = None
    concept: Optional[str] = None
    confidence: float = 0.0

    @property
    def assignment(self) -> ConceptAssignment:
        return ConceptAssignment(self.id, self.concept, self.confidence)


@dataclass
class CorpusManifest:
    records: List[CorpusRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise InvalidArgumentError(f"duplicate image id {rec.id!r} in manifest")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> Dict[str, CorpusRecord]:
        return {r.id: r for r in self.records}

    def save(self, path: str | Path) -> Path:
        write_jsonl(path, (asdict(r) for r in self.records))
        return Path(path)

    @classmethod
    def load(cls, path: str | Path, check_paths: bool = True) -> "CorpusManifest":
        path = Path(path)
        records = []
        for row in read_jsonl(path):
            rec = CorpusRecord(
                id=row["id"],
                path=row["path"],
                caption=row.get("caption"),
                concept=row.get("concept"),
                confidence=float(row.get("confidence") or 0.0),
            )
            if check_paths and not resolve_path(rec.path, path.parent).exists():
                raise InvalidArgumentError(f"{rec.id}: image path {rec.path} does not resolve")
            records.append(rec)
        return cls(records)


def resolve_path(p: str, base: Path) -> Path:
    candidate = Path(p)
    return candidate if candidate.is_absolute() else base / candidate


@dataclass
class CorpusEntry:
    id: str
    path: Path
    caption: Optional[str] = None


def scan_corpus(corpus_dir: str | Path) -> List[CorpusEntry]:
    """Images under ``corpus_dir`` with their captions, when available.

    Captions come from ``captions.jsonl`` (``{"file", "caption"}`` rows) or a
    ``<stem>.txt`` sidecar; the jsonl wins when both exist.
    """
    root = Path(corpus_dir)
    if not root.is_dir():
        raise InvalidArgumentError(f"{root} is not a directory")
    captions: Dict[str, str] = {}
    index = root / "captions.jsonl"
    if index.exists():
        for row in read_jsonl(index):
            captions[Path(row["file"]).name] = row["caption"]
    entries = []
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()):
        caption = captions.get(path.name)
        sidecar = path.with_suffix(".txt")
        if caption is None and sidecar.exists():
            caption = sidecar.read_text(encoding="utf-8").strip() or None
        image_id = path.relative_to(root).with_suffix("").as_posix().replace("/", "__")
        entries.append(CorpusEntry(image_id, path, caption))
    return entries


def assign_concept(image: ImageTensor, candidates: Sequence[str], scorer: TextImageScorer,
                   template: str = DEFAULT_TEMPLATE) -> ConceptAssignment:
    """Pick the candidate the scorer is most confident about.

    Confidence is a softmax over the candidates' scaled similarities only.
    """
    if not candidates:
        raise InvalidArgumentError("assign_concept needs at least one candidate")
    result = zero_shot_classify(scorer, image, list(candidates), template)
    probs = torch.softmax(torch.tensor(result.scores, dtype=torch.float64), dim=0)
    return ConceptAssignment(image.id, result.label, float(probs[result.index]), tuple(candidates))


def group_image(image: ImageTensor, caption: Optional[str], scorer: TextImageScorer,
                template: str = DEFAULT_TEMPLATE) -> ConceptAssignment:
    candidates = extract_candidate_concepts(caption) if caption and caption.strip() else []
    if not candidates:
        return ConceptAssignment(image.id, None, 0.0, ())
    return assign_concept(image, candidates, scorer, template)


@dataclass
class GroupingOutcome:
    manifest: CorpusManifest
    failures: Dict[str, str] = field(default_factory=dict)


def group_corpus(
    entries: Sequence[CorpusEntry],
    scorer: TextImageScorer,
    caption_fn: Optional[Callable[[ImageTensor], str]] = None,
    image_size: Optional[int] = CANONICAL_SIZE,
    template: str = DEFAULT_TEMPLATE,
    workers: int = 1,
    base_dir: Optional[Path] = None,
) -> GroupingOutcome:
    """Assign one concept per image; unreadable files are reported, not fatal."""

    def work(entry: CorpusEntry) -> Tuple[CorpusEntry, Optional[CorpusRecord], Optional[str]]:
        try:
            image = load_image(entry.path, size=image_size, image_id=entry.id)
        except Exception as e:
            logger.warning(f"Skipping unreadable image {entry.path}: {e}")
            return entry, None, f"{type(e).__name__}: {e}"
        caption = entry.caption
        if caption is None and caption_fn is not None:
            caption = caption_fn(image)
        assignment = group_image(image, caption, scorer, template)
        path = entry.path
        if base_dir is not None:
            try:
                path = Path(entry.path).resolve().relative_to(base_dir.resolve())
            except ValueError:
                path = Path(entry.path).resolve()
        record = CorpusRecord(
            id=entry.id,
            path=Path(path).as_posix(),
            caption=caption,
            concept=assignment.concept,
            confidence=assignment.confidence,
        )
        return entry, record, None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(pool.map(work, entries))

    records: List[CorpusRecord] = []
    failures: Dict[str, str] = {}
    for entry, record, error in outcomes:
        if record is None:
            failures[str(entry.path)] = error or "unknown error"
        else:
            records.append(record)
    records.sort(key=lambda r: r.id)
    assigned = sum(1 for r in records if r.concept)
    logger.info(f"Grouped {len(records)} images ({assigned} assigned, {len(failures)} unreadable)")
    return GroupingOutcome(CorpusManifest(records), failures)


def concept_counts(manifest: CorpusManifest) -> Counter:
    return Counter(r.concept for r in manifest.records if r.concept)


def top_concepts(manifest: CorpusManifest, k: int) -> List[str]:
    """Concepts by image count descending, ties lexicographic."""
    if k < 1:
        raise InvalidArgumentError("k must be at least 1")
    counts = concept_counts(manifest)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [concept for concept, _ in ranked[:k]]


@dataclass
class AttackSelection:
    targets: List[CorpusRecord]
    references: List[CorpusRecord]
    requested: int
    short: bool = False


def _eligible(manifest: CorpusManifest, concept: str, min_confidence: float) -> List[CorpusRecord]:
    return sorted(
        (r for r in manifest.records if r.concept == concept and r.confidence > min_confidence),
        key=lambda r: r.id,
    )


def select_attack_images(manifest: CorpusManifest, pair: ConceptPair, n: int,
                         min_confidence: float, seed: int = 0) -> AttackSelection:
    """Up to ``n`` confidently-grouped images per side, seeded order."""
    if n < 1:
        raise InvalidArgumentError("n must be at least 1")
    if not 0.0 <= min_confidence <= 1.0:
        raise InvalidArgumentError("min_confidence must be in [0, 1]")
    sides = []
    for offset, concept in enumerate((pair.target_concept, pair.reference_concept)):
        pool = _eligible(manifest, concept, min_confidence)
        random.Random(seed * 2 + offset).shuffle(pool)
        sides.append(pool[:n])
    targets, references = sides
    short = len(targets) < n or len(references) < n
    if short:
        logger.warning(
            f"Pair {pair.key()}: only {len(targets)} target / {len(references)} reference images "
            f"eligible of {n} requested"
        )
    return AttackSelection(targets, references, n, short)


def sample_pairs(concepts: Sequence[str], num_pairs: int, seed: int = 0) -> List[ConceptPair]:
    """Distinct ordered (target, reference) pairs drawn uniformly from ``concepts``."""
    unique = list(dict.fromkeys(concepts))
    universe = list(itertools.permutations(unique, 2))
    if num_pairs < 1 or num_pairs > len(universe):
        raise InvalidArgumentError(f"cannot draw {num_pairs} pairs from {len(unique)} concepts")
    chosen = random.Random(seed).sample(universe, num_pairs)
    return [ConceptPair(t, r) for t, r in chosen]


def load_pairs(path: str | Path, allowed: Optional[Iterable[str]] = None) -> List[ConceptPair]:
    """``target,reference`` per line; blank lines and ``#`` comments ignored."""
    allowed_set = set(allowed) if allowed is not None else None
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise InvalidArgumentError(f"{path}:{lineno}: expected 'target,reference'")
        pair = ConceptPair(parts[0], parts[1])
        if allowed_set is not None:
            missing = [c for c in parts if c not in allowed_set]
            if missing:
                raise InvalidArgumentError(f"{path}:{lineno}: {', '.join(missing)} not among the top concepts")
        pairs.append(pair)
    return pairs


def write_pairs(path: str | Path, pairs: Iterable[ConceptPair]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{p.target_concept},{p.reference_concept}\n" for p in pairs), encoding="utf-8")
    return path

