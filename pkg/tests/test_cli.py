import json

import pytest

from amptool.cli import EXIT_DEPENDENCY, EXIT_OK, EXIT_PARTIAL, EXIT_TOTAL, build_parser, run
from amptool.config import Settings
from amptool.embeddings import RandomProjectionExtractor
from amptool.metrics import MetricsReport
from amptool.pipeline import AmpPipeline
from amptool.utils import read_jsonl

from conftest import ToyScorer, write_png

RED, GREEN, BLUE = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)


@pytest.fixture
def workspace(tmp_path):
    corpus = tmp_path / "corpus"
    rows = []
    for prefix, color, text, count in (("dog", RED, "a dog", 3), ("cat", BLUE, "a cat", 3), ("car", GREEN, "a car", 40)):
        for i in range(count):
            name = f"{prefix}{i:02d}.png"
            write_png(corpus / name, color, size=(8, 8))
            rows.append({"file": name, "caption": text})
    (corpus / "captions.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    config = tmp_path / "amp.yaml"
    config.write_text(
        "image_size: 8\n"
        "workers: 1\n"
        f"cache_dir: {(tmp_path / 'cache').as_posix()}\n"
        "attack:\n"
        "  steps: 5\n"
        "  step_size: 0.02\n"
        "dataset:\n"
        "  top_k_concepts: 10\n",
        encoding="utf-8",
    )
    (tmp_path / "pairs.txt").write_text("cat,dog\ndog,cat\n", encoding="utf-8")
    return tmp_path


def _run(ws, *argv):
    pipeline = AmpPipeline(
        Settings(),
        scorer=ToyScorer(),
        extractor=RandomProjectionExtractor(seed=0, embed_dim=8, pool=4, channels=4),
    )
    return run(["--config", str(ws / "amp.yaml"), *argv], pipeline=pipeline)


def _mock_table(ws):
    """Perturbed images are captioned with their target concept; sources with their own."""
    concept = {"dog": "a dog", "cat": "a cat", "car": "a car"}
    table = {}
    for row in read_jsonl(ws / "results" / "results.jsonl"):
        table[row["perturbed_id"]] = f"a {row['target_concept']}"
        for key in ("reference_id", "target_id"):
            table[row[key]] = concept[row[key][:3]]
    path = ws / "table.json"
    path.write_text(json.dumps(table), encoding="utf-8")
    return path


def _through_evaluate(ws):
    assert _run(ws, "group", str(ws / "corpus"), "--out", str(ws / "corpus.jsonl")) == EXIT_OK
    assert _run(ws, "attack", "--corpus", str(ws / "corpus.jsonl"), "--out", str(ws / "results"),
                "--pairs", str(ws / "pairs.txt"), "--per-pair", "2") == EXIT_OK
    table = _mock_table(ws)
    assert _run(ws, "caption", "--corpus", str(ws / "corpus.jsonl"), "--results", str(ws / "results"),
                "--out", str(ws / "captions.jsonl"), "--mock-table", str(table)) == EXIT_OK
    assert _run(ws, "evaluate", "--corpus", str(ws / "corpus.jsonl"), "--results", str(ws / "results"),
                "--captions", str(ws / "captions.jsonl"), "--out", str(ws / "report.json")) == EXIT_OK
    return table


def test_end_to_end_pipeline(workspace):
    ws = workspace
    _through_evaluate(ws)

    manifest_rows = list(read_jsonl(ws / "corpus.jsonl"))
    assert len(manifest_rows) == 46
    assert {r["concept"] for r in manifest_rows} == {"dog", "cat", "car"}
    assert (ws / "corpus.manifest.json").exists()

    results = list(read_jsonl(ws / "results" / "results.jsonl"))
    assert len(results) == 4
    assert {f"{r['target_concept']}<-{r['reference_concept']}" for r in results} == {"cat<-dog", "dog<-cat"}
    for row in results:
        assert (ws / "results" / row["image"]).exists()
    assert json.loads((ws / "results" / "manifest.json").read_text(encoding="utf-8"))["summary"]["succeeded"] == 4

    captions = list(read_jsonl(ws / "captions.jsonl"))
    assert all(c["status"] == "ok" for c in captions)
    assert len(captions) > len(results)

    report = MetricsReport.load(ws / "report.json")
    assert report.msr == pytest.approx(1.0)
    assert report.aar == pytest.approx(1.0)
    assert report.bar < 0.5
    assert set(report.per_pair) == {"cat<-dog", "dog<-cat"}
    assert len(list(read_jsonl(ws / "judgments.jsonl"))) == 4
    assert (ws / "report.manifest.json").exists()
    assert (ws / "cache" / "embeddings" / "index.jsonl").exists()

    assert _run(ws, "export", "--results", str(ws / "results"), "--judgments", str(ws / "judgments.jsonl"),
                "--out", str(ws / "poison"), "--per-pair-count", "1",
                "--benign-manifest", str(ws / "corpus.jsonl"), "--mix-size", "10") == EXIT_OK
    exported = list(read_jsonl(ws / "poison" / "poison.jsonl"))
    assert len(exported) == 2
    assert all((ws / "poison" / r["image"]).exists() for r in exported)
    mix = list(read_jsonl(ws / "poison" / "mix.jsonl"))
    assert len(mix) == 10
    assert sum(1 for r in mix if r["poison"]) == 2
    export_manifest = json.loads((ws / "poison" / "manifest.json").read_text(encoding="utf-8"))
    assert export_manifest["summary"]["exit_code"] == EXIT_OK


def test_defenses_from_the_command_line(workspace):
    ws = workspace
    table = _through_evaluate(ws)
    common = ["--corpus", str(ws / "corpus.jsonl"), "--results", str(ws / "results"),
              "--captions", str(ws / "captions.jsonl")]

    assert _run(ws, "defend", *common, "--out", str(ws / "blur.json"), "--transform", "gaussian_blur",
                "--mock-table", str(table)) == EXIT_OK
    blurred = MetricsReport.load(ws / "blur.json")
    assert blurred.msr == pytest.approx(1.0)
    defended = list(read_jsonl(ws / "blur.judgments.jsonl"))
    assert len(defended) == 4

    assert _run(ws, "defend", *common, "--out", str(ws / "filter.json"), "--filter", "alignment") == EXIT_OK
    out = json.loads((ws / "filter.json").read_text(encoding="utf-8"))
    assert out["fpr_target"] == 0.05
    assert out["table"][0]["filter"] == "alignment"
    assert out["table"][0]["filtering_rate"] == pytest.approx(1.0)
    assert out["reports"][0]["n_poison"] == 4

    # no aesthetic head and no loss scores: only the scorable filters run
    assert _run(ws, "defend", *common, "--out", str(ws / "all.json"), "--filter", "all") == EXIT_OK
    kinds = {r["kind"] for r in json.loads((ws / "all.json").read_text(encoding="utf-8"))["reports"]}
    assert kinds == {"caption_quality", "alignment"}


def test_unreadable_images_make_grouping_partial(workspace):
    ws = workspace
    (ws / "corpus" / "broken.png").write_bytes(b"not a png")
    assert _run(ws, "group", str(ws / "corpus"), "--out", str(ws / "corpus.jsonl")) == EXIT_PARTIAL
    assert len(list(read_jsonl(ws / "corpus.jsonl"))) == 46


def test_missing_upstream_artifacts(workspace):
    ws = workspace
    assert _run(ws, "attack", "--corpus", str(ws / "nope.jsonl"), "--out", str(ws / "results")) == EXIT_DEPENDENCY
    assert _run(ws, "group", str(ws / "corpus"), "--out", str(ws / "corpus.jsonl")) == EXIT_OK
    assert _run(ws, "caption", "--corpus", str(ws / "corpus.jsonl"), "--results", str(ws / "results"),
                "--out", str(ws / "captions.jsonl"), "--mock-table", str(ws / "t.json")) == EXIT_DEPENDENCY
    assert _run(ws, "export", "--results", str(ws / "results"), "--judgments", str(ws / "j.jsonl"),
                "--out", str(ws / "poison")) == EXIT_DEPENDENCY


def test_export_without_successes_and_bad_mix(workspace):
    ws = workspace
    _through_evaluate(ws)
    failing = ws / "failed.jsonl"
    rows = []
    for row in read_jsonl(ws / "judgments.jsonl"):
        row.update(condition_has_target=False, success=False)
        rows.append(json.dumps(row) + "\n")
    failing.write_text("".join(rows), encoding="utf-8")
    assert _run(ws, "export", "--results", str(ws / "results"), "--judgments", str(failing),
                "--out", str(ws / "none")) == EXIT_TOTAL
    assert _run(ws, "export", "--results", str(ws / "results"), "--judgments", str(ws / "judgments.jsonl"),
                "--out", str(ws / "poison"), "--benign-manifest", str(ws / "corpus.jsonl")) == EXIT_TOTAL


def test_parser_flags():
    parser = build_parser()
    args = parser.parse_args(["attack", "--corpus", "c.jsonl", "--out", "r", "--epsilon", "16/255"])
    assert args.epsilon == pytest.approx(16 / 255)
    assert args.num_pairs == 25
    assert args.per_pair == 125
    assert args.mode == "white_box"
    with pytest.raises(SystemExit):
        parser.parse_args(["attack", "--corpus", "c", "--out", "r", "--epsilon", "lots"])
    with pytest.raises(SystemExit):
        parser.parse_args(["defend", "--corpus", "c", "--results", "r", "--captions", "k", "--out", "o"])
    ev = parser.parse_args(["evaluate", "--corpus", "c", "--results", "r", "--captions", "k", "--out", "o",
                            "--psr", "cat=gen/cat"])
    assert ev.psr == [("cat", "gen/cat")]


def test_attack_min_confidence_flag(workspace):
    ws = workspace
    args = build_parser().parse_args(["attack", "--corpus", "c.jsonl", "--out", "r", "--min-confidence", "0.5"])
    assert args.min_confidence == pytest.approx(0.5)
    assert _run(ws, "group", str(ws / "corpus"), "--out", str(ws / "corpus.jsonl")) == EXIT_OK
    # eligibility is a strict inequality, so a threshold of 1 admits nothing
    assert _run(ws, "attack", "--corpus", str(ws / "corpus.jsonl"), "--out", str(ws / "results"),
                "--pairs", str(ws / "pairs.txt"), "--per-pair", "2", "--min-confidence", "1.0") == EXIT_TOTAL
    assert _run(ws, "attack", "--corpus", str(ws / "corpus.jsonl"), "--out", str(ws / "results"),
                "--pairs", str(ws / "pairs.txt"), "--min-confidence", "1.5") == EXIT_TOTAL


def test_run_seeds_before_dispatch(workspace, mocker):
    ws = workspace
    seeded = mocker.patch("amptool.cli.seed_everything")
    assert _run(ws, "--seed", "11", "group", str(ws / "corpus"), "--out", str(ws / "corpus.jsonl")) == EXIT_OK
    seeded.assert_called_once_with(11)
