from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from .attacks import ResultsWriter, read_jobs, write_jobs
from .captioning import PROMPT_VARIANTS, PromptSet, caption, caption_costs, load_caption_records
from .config import Settings
from .core import AttackMode
from .dataset import CorpusManifest, concept_counts, load_pairs, sample_pairs, top_concepts, write_pairs
from .defenses import FILTER_KINDS, TRANSFORM_KINDS, FilterSpec, TransformSpec, filter_table
from .errors import AmpError, CapabilityError, DependencyError, EmptyExportError, InvalidArgumentError
from .export import build_training_mix
from .manifest import RunManifest
from .metrics import MetricsReport, load_judgments, write_judgments
from .pipeline import AmpPipeline
from .utils import read_jsonl, seed_everything, write_jsonl


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_TOTAL = 3
EXIT_DEPENDENCY = 4

console = Console()
err_console = Console(stderr=True)


def _budget(text: str) -> float:
    """``0.0627`` or ``16/255``."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"bad budget {text!r}") from e


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key or not value:
        raise argparse.ArgumentTypeError(f"expected CONCEPT=DIR, got {text!r}")
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amptool", description="Adversarial mislabeling poison toolkit")
    parser.add_argument("--config", help="YAML config document layered over the environment")
    parser.add_argument("--seed", type=int, help="Global seed")
    parser.add_argument("--workers", type=int, help="Worker threads for per-image jobs")
    parser.add_argument("--cache-dir", help="Caption cache directory")
    parser.add_argument("--device", help="Torch device (cpu, cuda, ...)")
    sub = parser.add_subparsers(dest="cmd", required=True)

    group = sub.add_parser("group", help="Assign one concept per corpus image")
    group.add_argument("corpus_dir", help="Directory of images (captions.jsonl or .txt sidecars)")
    group.add_argument("--out", required=True, help="Corpus manifest (jsonl)")
    group.add_argument("--min-confidence", type=float, help="Grouping confidence an image needs to be attack-eligible")
    group.add_argument("--top-k", type=int, help="Number of top concepts to list")
    group.add_argument("--captioner", action="append", help="Caption images that have no caption")
    group.add_argument("--mock-table", help="Mock captioner table (json / jsonl)")

    attack = sub.add_parser("attack", help="Generate perturbed images for concept pairs")
    attack.add_argument("--corpus", required=True, help="Corpus manifest from 'group'")
    attack.add_argument("--out", required=True, help="Results directory")
    pairs = attack.add_mutually_exclusive_group()
    pairs.add_argument("--pairs", help="File of 'target,reference' lines")
    pairs.add_argument("--num-pairs", type=int, default=25, help="Random pairs from the top concepts (default: 25)")
    attack.add_argument("--jobs", help="Explicit attack jobs (jsonl); overrides pair planning")
    attack.add_argument("--per-pair", type=int, default=125, help="Images per pair (default: 125)")
    attack.add_argument("--min-confidence", type=float, help="Grouping confidence an image needs to be attacked")
    attack.add_argument("--mode", choices=[m.value for m in AttackMode], default=AttackMode.WHITE_BOX.value)
    attack.add_argument("--epsilon", type=_budget, help="L-inf budget, e.g. 16/255")
    attack.add_argument("--steps", type=int)
    attack.add_argument("--alpha", type=float, help="Alignment weight of the adaptive attack")
    attack.add_argument("--jpeg-quality", type=int, help="Differentiable JPEG quality of the adaptive attack")
    attack.add_argument("--target-caption", help="Caption C_t for the adaptive alignment term")
    attack.add_argument("--budget-sweep", action="store_true", help="Run at 2, 4, 8, 16 and 32 / 255")

    cap = sub.add_parser("caption", help="Caption perturbed and source images")
    cap.add_argument("--corpus", required=True)
    cap.add_argument("--results", required=True)
    cap.add_argument("--out", required=True, help="Caption records (jsonl)")
    cap.add_argument("--captioner", action="append", help="Captioner id from the config (repeatable)")
    cap.add_argument("--mock-table", help="Mock captioner table (json / jsonl)")
    cap.add_argument("--prompt", action="append", help=f"Prompt name ({', '.join(PROMPT_VARIANTS)}); repeatable")
    cap.add_argument("--tau", type=float, help="Multi-captioner selection randomness in [0, 1]")
    cap.add_argument("--transform", choices=TRANSFORM_KINDS, help="Transform images before captioning")

    ev = sub.add_parser("evaluate", help="MSR / AAR / BAR (and PSR) report")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--results", required=True)
    ev.add_argument("--captions", required=True)
    ev.add_argument("--out", required=True, help="Metrics report (json)")
    ev.add_argument("--judgments", help="Judgments output (default: judgments.jsonl next to the report)")
    ev.add_argument("--delta-threshold", type=float)
    ev.add_argument("--psr", action="append", type=_key_value, default=[], help="CONCEPT=DIR of generated images")

    defend = sub.add_parser("defend", help="Transform or filter defenses")
    defend.add_argument("--corpus", required=True)
    defend.add_argument("--results", required=True)
    defend.add_argument("--captions", required=True)
    defend.add_argument("--out", required=True)
    how = defend.add_mutually_exclusive_group(required=True)
    how.add_argument("--transform", choices=TRANSFORM_KINDS)
    how.add_argument("--filter", choices=FILTER_KINDS + ("all",))
    defend.add_argument("--fpr", type=float, help="Benign false positive rate target")
    defend.add_argument("--loss-scores", help="jsonl of {id, loss} from an external model-loss oracle")
    defend.add_argument("--captioner", action="append")
    defend.add_argument("--mock-table")
    defend.add_argument("--prompt", help="Prompt name for re-captioning")

    export = sub.add_parser("export", help="Export successfully mislabeled samples")
    export.add_argument("--results", required=True)
    export.add_argument("--judgments", required=True)
    export.add_argument("--out", required=True, help="Export directory")
    export.add_argument("--per-pair-count", type=int, default=125)
    export.add_argument("--include-failures", action="store_true")
    export.add_argument("--benign-manifest", help="Corpus manifest to mix benign pairs from")
    export.add_argument("--mix-size", type=int, help="Total training-set size of the mix")
    return parser


def load_settings(args: argparse.Namespace) -> Settings:
    settings = Settings.from_file(args.config) if args.config else Settings.from_env()
    return settings.with_overrides(seed=args.seed, workers=args.workers, cache_dir=args.cache_dir, device=args.device,
                                   min_confidence=getattr(args, "min_confidence", None))


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, rich_tracebacks=False, show_path=False)],
        force=True,
    )


def _require(path: str, stage: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DependencyError(stage, f"{p} not found")
    return p


def _load_corpus(path: str) -> tuple[CorpusManifest, Path]:
    p = _require(path, "group")
    return CorpusManifest.load(p), p.parent


def _prompt_set(settings: Settings) -> PromptSet:
    return PromptSet(dict(PROMPT_VARIANTS, default=settings.default_prompt))


def cmd_group(args: argparse.Namespace, pipeline: AmpPipeline, run: RunManifest) -> int:
    settings = pipeline.settings
    out = Path(args.out)
    caption_fn = None
    if args.captioner or args.mock_table:
        captioner = pipeline.captioners(args.captioner, args.mock_table)[0]
        cache = pipeline.caption_cache()

        def caption_fn(image):
            return caption(captioner, image, settings.default_prompt, cache).caption
    run.add_input(args.corpus_dir)
    with run.stage("group"):
        outcome = pipeline.group(args.corpus_dir, base_dir=out.parent, caption_fn=caption_fn)
    outcome.manifest.save(out)
    run.add_output(out)

    k = args.top_k or settings.top_k_concepts
    min_conf = settings.min_confidence
    counts = concept_counts(outcome.manifest)
    table = Table(title=f"Top concepts ({len(outcome.manifest)} images)")
    table.add_column("#", justify="right")
    table.add_column("concept")
    table.add_column("images", justify="right")
    table.add_column(f"conf > {min_conf}", justify="right")
    top = top_concepts(outcome.manifest, k) if counts else []
    for i, concept in enumerate(top, 1):
        eligible = sum(1 for r in outcome.manifest.records if r.concept == concept and r.confidence > min_conf)
        table.add_row(str(i), concept, str(counts[concept]), str(eligible))
    console.print(table)
    for path, error in outcome.failures.items():
        err_console.print(f"[yellow]Unreadable:[/yellow] {path}: {error}")
    run.summary.update(records=len(outcome.manifest), unreadable=len(outcome.failures), top_concepts=top,
                       min_confidence=min_conf)
    if not outcome.manifest.records:
        return EXIT_TOTAL
    return EXIT_PARTIAL if outcome.failures else EXIT_OK


def cmd_attack(args: argparse.Namespace, pipeline: AmpPipeline, run: RunManifest) -> int:
    settings = pipeline.settings
    manifest, base = _load_corpus(args.corpus)
    out = Path(args.out)
    run.add_input(args.corpus)
    overrides = dict(epsilon=args.epsilon, steps=args.steps, alpha=args.alpha, jpeg_quality=args.jpeg_quality)
    if args.jobs:
        run.add_input(args.jobs)
        jobs = read_jobs(_require(args.jobs, "plan"))
    else:
        allowed = top_concepts(manifest, settings.top_k_concepts)
        if args.pairs:
            run.add_input(args.pairs)
            pairs = load_pairs(args.pairs, allowed=allowed)
        else:
            pairs = sample_pairs(allowed, args.num_pairs, seed=settings.seed)
        write_pairs(out / "pairs.txt", pairs)
        jobs = pipeline.plan_attacks(manifest, pairs, args.per_pair, args.mode, **overrides)
    if not jobs:
        err_console.print("[red]No eligible images for the requested pairs[/red]")
        return EXIT_TOTAL
    write_jobs(out / "jobs.jsonl", jobs)
    writer = ResultsWriter(out)
    with run.stage("attack"):
        summary = pipeline.run_attacks(jobs, manifest, base, writer, sweep=args.budget_sweep,
                                       target_caption=args.target_caption)
    run.add_output(writer.index_path)
    run.summary.update(jobs=summary.jobs, succeeded=summary.succeeded, failures=summary.failures)

    finals = [row["final_loss"] for row in summary.rows]
    mean_final = sum(finals) / len(finals) if finals else float("nan")
    console.print(Panel(
        f"jobs: {summary.jobs}\nsucceeded: {summary.succeeded}\nfailed: {len(summary.failures)}\n"
        f"mean final loss: {mean_final:.4f}",
        title=f"[bold]{args.mode} attack[/bold]",
        border_style="green" if not summary.failures else "yellow",
    ))
    if summary.succeeded == 0:
        return EXIT_TOTAL
    return EXIT_PARTIAL if summary.failures else EXIT_OK


def cmd_caption(args: argparse.Namespace, pipeline: AmpPipeline, run: RunManifest) -> int:
    settings = pipeline.settings
    manifest, base = _load_corpus(args.corpus)
    results = _require(args.results, "attack")
    run.add_input(args.corpus)
    run.add_input(results / "results.jsonl")
    captioners = pipeline.captioners(args.captioner, args.mock_table)
    prompts = _prompt_set(settings)
    transform = TransformSpec.from_settings(settings, args.transform) if args.transform else None
    images = pipeline.collect_images(manifest, base, results)
    cache = pipeline.caption_cache()
    records = []
    with run.stage("caption"):
        for name in args.prompt or ["default"]:
            records += pipeline.caption_images(images, captioners, prompts.get(name), tau=args.tau,
                                               transform=transform, cache=cache)
    out = Path(args.out)
    write_jsonl(out, (r.to_dict() for r in records))
    run.add_output(out)
    if pipeline.ledger.entries:
        ledger_path = out.with_name(f"{out.stem}.ledger.jsonl")
        pipeline.ledger.save(ledger_path)
        run.add_output(ledger_path)

    ok = sum(1 for r in records if r.ok)
    refused = sum(1 for r in records if r.status == "refused")
    costs = caption_costs(records, {c.id: c.descriptor for c in captioners})
    run.summary.update(records=len(records), ok=ok, refused=refused, costs=costs,
                       transform=transform.to_dict() if transform else None, prompts=prompts.to_dict())
    console.print(f"Captioned {ok}/{len(records)} ({refused} refused) -> {out}")
    if ok == 0:
        return EXIT_TOTAL
    return EXIT_PARTIAL if ok < len(records) else EXIT_OK


def _metrics_table(report: MetricsReport) -> Table:
    table = Table(title="Mislabeling metrics")
    table.add_column("scope")
    table.add_column("n", justify="right")
    for name in ("MSR", "AAR", "BAR"):
        table.add_column(name, justify="right")
    table.add_row("all", str(report.counts.get("judgments", 0)),
                  f"{report.msr:.3f}", f"{report.aar:.3f}", f"{report.bar:.3f}")
    for key, row in report.per_pair.items():
        table.add_row(key, str(row["n"]), f"{row['msr']:.3f}", f"{row['aar']:.3f}", f"{row['bar']:.3f}")
    return table


def _caption_records(path: str):
    records = load_caption_records(_require(path, "caption"))
    if not records:
        raise DependencyError("caption", f"{path} has no caption records")
    return records


def cmd_evaluate(args: argparse.Namespace, pipeline: AmpPipeline, run: RunManifest) -> int:
    manifest, base = _load_corpus(args.corpus)
    results = _require(args.results, "attack")
    records = _caption_records(args.captions)
    for p in (args.corpus, results / "results.jsonl", args.captions):
        run.add_input(p)
    psr_dirs = {concept: Path(d) for concept, d in args.psr}
    with run.stage("evaluate"):
        report, judgments = pipeline.evaluate(manifest, base, results, records, args.delta_threshold, psr_dirs)
    out = Path(args.out)
    report.save(out)
    judgments_path = Path(args.judgments) if args.judgments else out.with_name("judgments.jsonl")
    write_judgments(judgments_path, judgments)
    run.add_output(out)
    run.add_output(judgments_path)
    run.summary.update(msr=report.msr, aar=report.aar, bar=report.bar, psr=report.psr)
    console.print(_metrics_table(report))
    if report.psr is not None:
        console.print(f"PSR: {report.psr:.3f} {report.psr_by_concept}")
    return EXIT_OK


def _loss_scores(path: Optional[str]) -> Optional[Dict[str, float]]:
    if not path:
        return None
    return {row["id"]: float(row["loss"]) for row in read_jsonl(_require(path, "model-loss oracle"))}


def cmd_defend(args: argparse.Namespace, pipeline: AmpPipeline, run: RunManifest) -> int:
    settings = pipeline.settings
    manifest, base = _load_corpus(args.corpus)
    results = _require(args.results, "attack")
    records = _caption_records(args.captions)
    for p in (args.corpus, results / "results.jsonl", args.captions):
        run.add_input(p)
    out = Path(args.out)

    if args.transform:
        spec = TransformSpec.from_settings(settings, args.transform)
        captioners = pipeline.captioners(args.captioner, args.mock_table)
        prompt = _prompt_set(settings).get(args.prompt or "default")
        with run.stage("defend"):
            report, judgments = pipeline.defend_transform(manifest, base, results, records, captioners, spec,
                                                          prompt, cache=pipeline.caption_cache())
        report.save(out)
        write_judgments(out.with_name(f"{out.stem}.judgments.jsonl"), judgments)
        run.add_output(out)
        run.summary.update(transform=spec.to_dict(), msr=report.msr)
        console.print(Panel(f"MSR under {args.transform}: {report.msr:.3f}", title="Transform defense"))
        return EXIT_OK

    fpr = args.fpr if args.fpr is not None else settings.fpr_target
    kinds = FILTER_KINDS if args.filter == "all" else (args.filter,)
    loss_scores = _loss_scores(args.loss_scores)
    reports = []
    for kind in kinds:
        if kind == "model_loss" and loss_scores is None and args.filter == "all":
            logger.warning("Skipping model_loss filter: no --loss-scores given")
            continue
        try:
            with run.stage(f"filter:{kind}"):
                reports.append(pipeline.defend_filter(manifest, base, results, records,
                                                      FilterSpec(kind, fpr_target=fpr), loss_scores))
        except CapabilityError as e:
            if args.filter != "all":
                raise
            logger.warning(f"Skipping {kind} filter: {e}")
    rows = filter_table(reports)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"fpr_target": fpr, "table": rows, "reports": [r.to_dict() for r in reports]},
                              indent=2), encoding="utf-8")
    run.add_output(out)
    run.summary.update(fpr_target=fpr, table=rows)

    table = Table(title=f"Filtering poison at {fpr:.0%} FPR")
    table.add_column("filter")
    table.add_column("filtering rate", justify="right")
    table.add_column("FPR", justify="right")
    for row in rows:
        table.add_row(row["filter"], f"{row['filtering_rate']:.2f}", f"{row['fpr']:.2f}")
    console.print(table)
    return EXIT_OK if reports else EXIT_TOTAL


def cmd_export(args: argparse.Namespace, pipeline: AmpPipeline, run: RunManifest) -> int:
    results = _require(args.results, "attack")
    judgments = load_judgments(_require(args.judgments, "evaluate"))
    run.add_input(results / "results.jsonl")
    run.add_input(args.judgments)
    out = Path(args.out)
    with run.stage("export"):
        export = pipeline.export(results, judgments, out, args.per_pair_count, args.include_failures)
    run.add_output(export.index_path)
    if args.benign_manifest:
        if args.mix_size is None:
            raise InvalidArgumentError("--benign-manifest needs --mix-size")
        benign_path = _require(args.benign_manifest, "group")
        run.add_input(benign_path)
        mix = build_training_mix(export.records, CorpusManifest.load(benign_path), args.mix_size,
                                 seed=pipeline.settings.seed, poison_root=out, benign_root=benign_path.parent)
        write_jsonl(out / "mix.jsonl", mix)
        run.add_output(out / "mix.jsonl")
    run.summary.update(per_pair=export.per_pair, short_pairs=export.short_pairs,
                       include_failures=args.include_failures)

    table = Table(title=f"Exported {len(export.records)} poison samples")
    table.add_column("pair")
    table.add_column("samples", justify="right")
    for key, n in export.per_pair.items():
        style = "yellow" if key in export.short_pairs else None
        table.add_row(key, f"{n}/{args.per_pair_count}", style=style)
    console.print(table)
    return EXIT_OK


COMMANDS = {
    "group": cmd_group,
    "attack": cmd_attack,
    "caption": cmd_caption,
    "evaluate": cmd_evaluate,
    "defend": cmd_defend,
    "export": cmd_export,
}


def run(argv: Optional[List[str]] = None, pipeline: Optional[AmpPipeline] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args)
    except AmpError as e:
        err_console.print(f"[red]Invalid configuration:[/red] {e}")
        return EXIT_TOTAL
    setup_logging(settings.log_level)
    seed_everything(settings.seed)
    if pipeline is None:
        pipeline = AmpPipeline.from_settings(settings)
    else:
        pipeline.settings = settings
    manifest = RunManifest(command=" ".join(["amptool", *(argv if argv is not None else sys.argv[1:])]),
                           config=settings.resolved())
    try:
        code = COMMANDS[args.cmd](args, pipeline, manifest)
    except DependencyError as e:
        err_console.print(f"[red]Missing upstream artifact:[/red] {e}")
        return EXIT_DEPENDENCY
    except EmptyExportError as e:
        err_console.print(f"[red]Nothing to export:[/red] {e}")
        return EXIT_TOTAL
    except AmpError as e:
        err_console.print(f"[red]{args.cmd} failed:[/red] {e}")
        return EXIT_TOTAL
    manifest.summary["exit_code"] = code
    path = manifest.write(args.out)
    logger.info(f"Run manifest written to {path}")
    return code


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
