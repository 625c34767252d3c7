"""Poison-set export and benign training mixes."""
from __future__ import annotations

import logging
import random
import shutil
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .attacks import load_results
from .dataset import CorpusManifest, resolve_path
from .errors import EmptyExportError, InvalidArgumentError
from .metrics import MislabelJudgment
from .utils import compute_file_hash, slug, write_jsonl


logger = logging.getLogger(__name__)

POISON_INDEX = "poison.jsonl"


@dataclass
class PoisonSetExport:
    root: Path
    records: List[Dict[str, Any]] = field(default_factory=list)
    per_pair: Dict[str, int] = field(default_factory=dict)
    requested_per_pair: int = 125
    short_pairs: List[str] = field(default_factory=list)

    @property
    def index_path(self) -> Path:
        return self.root / POISON_INDEX


def export_poison_set(
    results_root: str | Path,
    judgments: Sequence[MislabelJudgment],
    out_dir: str | Path,
    per_pair_count: int = 125,
    include_failures: bool = False,
) -> PoisonSetExport:
    """Copy up to ``per_pair_count`` judged images per pair with their captions.

    Only successful judgments are exported unless ``include_failures``.
    Records are taken in image-id order so repeated exports agree.
    """
    if per_pair_count < 1:
        raise InvalidArgumentError("per_pair_count must be >= 1")
    results_root = Path(results_root)
    rows = {row["perturbed_id"]: row for row in load_results(results_root)}

    by_pair: Dict[str, List[MislabelJudgment]] = defaultdict(list)
    for j in judgments:
        if not (j.success or include_failures):
            continue
        if j.image_id not in rows:
            logger.warning(f"Judgment for {j.image_id} has no attack result; skipped")
            continue
        by_pair[j.pair_key].append(j)
    if not by_pair:
        raise EmptyExportError("no successfully mislabeled samples to export")

    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    export = PoisonSetExport(root=out, requested_per_pair=per_pair_count)
    for key in sorted(by_pair):
        chosen = sorted(by_pair[key], key=lambda j: j.image_id)[:per_pair_count]
        if len(chosen) < per_pair_count:
            export.short_pairs.append(key)
            logger.warning(f"Pair {key}: exporting {len(chosen)} of {per_pair_count} requested")
        for j in chosen:
            row = rows[j.image_id]
            src = results_root / row["image"]
            dst = images_dir / f"{slug(j.image_id)}.png"
            shutil.copyfile(src, dst)
            digest = compute_file_hash(dst)
            if row.get("png_sha256") and digest != row["png_sha256"]:
                logger.warning(f"{j.image_id}: exported PNG differs from the attack result")
            export.records.append({
                "image": dst.relative_to(out).as_posix(),
                "caption": j.caption,
                "target_concept": j.target_concept,
                "reference_concept": j.reference_concept,
                "mode": row.get("mode"),
                "epsilon": row.get("epsilon"),
                "perturbed_id": j.image_id,
                "reference_id": row.get("reference_id"),
                "target_id": row.get("target_id"),
                "png_sha256": digest,
                "judgment": j.to_dict(),
            })
        export.per_pair[key] = len(chosen)
    write_jsonl(export.index_path, export.records)
    logger.info(f"Exported {len(export.records)} poison samples over {len(export.per_pair)} pairs to {out}")
    return export


def build_training_mix(poison_records: Sequence[Dict[str, Any]], benign: CorpusManifest, mix_size: int,
                       seed: int = 0, poison_root: Optional[Path] = None,
                       benign_root: Optional[Path] = None) -> List[Dict[str, Any]]:
    """All poison records plus seeded benign samples up to ``mix_size``, shuffled."""
    if mix_size < len(poison_records):
        raise InvalidArgumentError(f"mix_size {mix_size} is smaller than the {len(poison_records)} poison records")
    rng = random.Random(seed)
    captioned = [r for r in benign.records if r.caption]
    want = mix_size - len(poison_records)
    if want > len(captioned):
        logger.warning(f"Only {len(captioned)} captioned benign records for {want} requested")
        want = len(captioned)
    mix = []
    for rec in poison_records:
        image = Path(rec["image"])
        if poison_root is not None:
            image = resolve_path(rec["image"], poison_root)
        mix.append({"image": image.as_posix(), "caption": rec["caption"], "poison": True,
                    "pair": f"{rec['target_concept']}<-{rec['reference_concept']}"})
    for rec in rng.sample(captioned, want):
        image = resolve_path(rec.path, benign_root) if benign_root is not None else Path(rec.path)
        mix.append({"image": image.as_posix(), "caption": rec.caption, "poison": False, "pair": None})
    rng.shuffle(mix)
    return mix
