import pytest

from amptool.captioning import CaptionRecord
from amptool.dataset import ConceptPair
from amptool.errors import InvalidArgumentError, ScaleMismatchError
from amptool.metrics import (
    EvaluationItem,
    MetricsReport,
    MislabelJudgment,
    alignment_stats,
    caption_length_stats,
    compute_aar,
    compute_bar,
    compute_msr,
    compute_psr,
    delta_summary,
    evaluate_items,
    judge_mislabel,
    load_judgments,
    merge_reports,
    psr_dose_response,
    write_judgments,
)

from conftest import ToyScorer, solid

PAIR = ConceptPair("cat", "dog")
PROMPT = "Describe the image."
BLUE = solid((0.0, 0.0, 1.0), image_id="cat_img")
RED = solid((1.0, 0.0, 0.0), image_id="dog_img")


def _rec(text, status="ok", image_id="dog_img~cat_img", captioner="mock", prompt=PROMPT):
    return CaptionRecord(image_id, captioner, prompt, text, status=status)


def _judgment(delta):
    return MislabelJudgment("x", "cat", "dog", True, True, delta, delta is not None and delta > 0)


def test_judge_mislabel_success_and_failures(toy_scorer):
    hit = judge_mislabel(_rec("A cat on a couch"), PAIR, BLUE, RED, toy_scorer)
    assert hit.condition_no_reference and hit.condition_has_target
    assert hit.delta == pytest.approx(hit.sim_target - hit.sim_reference)
    assert hit.delta > 90
    assert hit.success
    assert hit.pair_key == "cat<-dog"

    both = judge_mislabel(_rec("Two dogs and a cat"), PAIR, BLUE, RED, toy_scorer)
    assert not both.condition_no_reference
    assert not both.success

    strict = judge_mislabel(_rec("A cat on a couch"), PAIR, BLUE, RED, toy_scorer, delta_threshold=200.0)
    assert not strict.condition_delta

    failed = judge_mislabel(_rec("", status="refused"), PAIR, BLUE, RED, toy_scorer)
    assert failed.delta is None
    assert failed.status == "refused"
    assert not (failed.condition_no_reference or failed.condition_has_target or failed.condition_delta)


def test_msr_is_the_success_share(toy_scorer):
    judgments = [
        judge_mislabel(_rec(text), PAIR, BLUE, RED, toy_scorer)
        for text in ("A cat on a couch", "A dog on a couch", "A blue cat")
    ]
    assert compute_msr(judgments) == pytest.approx(2 / 3)
    with pytest.raises(InvalidArgumentError):
        compute_msr([])


def test_alignment_ratios_skip_and_clip(toy_scorer):
    black = solid((0.0, 0.0, 0.0), image_id="black")
    perturbed = [_rec("A cat on a couch"), _rec("", status="error"), _rec("A blue cat"), _rec("A cat")]
    images = [BLUE, BLUE, BLUE, black]
    selfs = [_rec("A blue cat"), _rec("A blue cat"), _rec("A dog and a cat"), _rec("A cat")]
    stats = alignment_stats(perturbed, images, selfs, toy_scorer)
    assert stats.used == 3
    assert stats.skipped_zero_denominator == 1
    assert stats.clipped == 1
    assert stats.ratios == pytest.approx([1.0, 0.0, 1.0])
    assert stats.value == pytest.approx(2 / 3)
    with pytest.raises(InvalidArgumentError):
        alignment_stats(perturbed[:2], images, selfs, toy_scorer)


def test_aar_and_bar_point_opposite_ways(toy_scorer):
    records = [_rec("A blue cat on a couch")]
    aar = compute_aar(records, [BLUE], [_rec("A blue cat")], toy_scorer)
    bar = compute_bar(records, [RED], [_rec("A red dog")], toy_scorer)
    assert aar > 0.9
    assert bar < 0.1


def test_nothing_usable_gives_zero(toy_scorer):
    stats = alignment_stats([_rec("A cat")], [BLUE], [_rec("", status="error")], toy_scorer)
    assert stats.value == 0.0
    assert stats.used == 0


def test_psr_counts_misclassified_generations(toy_scorer):
    generated = [BLUE, BLUE, BLUE, RED]
    labels = ["dog", "cat", "car"]
    assert compute_psr(generated, "cat", labels, toy_scorer) == pytest.approx(0.25)
    with pytest.raises(InvalidArgumentError):
        compute_psr(generated, "zebra", labels, toy_scorer)
    with pytest.raises(InvalidArgumentError):
        compute_psr([], "cat", labels, toy_scorer)
    dose = psr_dose_response({50: [RED, RED], 0: [BLUE, BLUE]}, "cat", labels, toy_scorer)
    assert list(dose) == [0, 50]
    assert dose == {0: 0.0, 50: 1.0}


def test_caption_length_histogram():
    stats = caption_length_stats(["a" * 5, "a" * 25, "a" * 45, _rec("", status="error")])
    assert stats.count == 3
    assert stats.mean == pytest.approx(25.0)
    assert stats.bin_edges == [0, 20, 40, 60]
    assert stats.histogram == [1, 1, 1]
    assert stats.quantiles["p50"] == pytest.approx(25.0)
    with pytest.raises(InvalidArgumentError):
        caption_length_stats([])


def test_delta_summary_shares():
    summary = delta_summary([_judgment(d) for d in (-3.0, 4.0, 16.0, 25.0)] + [_judgment(None)])
    assert summary["n"] == 4
    assert summary["share_abs_le_5"] == pytest.approx(0.5)
    assert summary["share_gt_15"] == pytest.approx(0.5)
    assert summary["share_gt_20"] == pytest.approx(0.25)
    assert delta_summary([_judgment(None)]) == {"n": 0}


def _items():
    target_self = _rec("A blue cat", image_id="cat_img")
    reference_self = _rec("A red dog", image_id="dog_img")
    texts = [("A cat on a couch", "ok"), ("A dog and a cat", "ok"), ("", "error")]
    return [
        EvaluationItem(PAIR, _rec(text, status=status, prompt=prompt), BLUE, RED, target_self, reference_self)
        for (text, status), prompt in zip(texts, [PROMPT, PROMPT, "What's in this image?"])
    ]


def test_evaluate_items_builds_a_consistent_report(tmp_path, toy_scorer):
    report, judgments = evaluate_items(_items(), toy_scorer, config={"seed": 0})
    assert report.msr == pytest.approx(1 / 3)
    assert 0.0 <= report.bar <= report.aar <= 1.0
    assert report.counts["caption_failures"] == 1
    assert report.counts["judgments"] == 3
    assert report.per_pair["cat<-dog"]["n"] == 3
    assert set(report.per_prompt) == {PROMPT, "What's in this image?"}
    assert report.per_prompt["What's in this image?"]["msr"] == 0.0
    assert report.similarity_scale == toy_scorer.scale
    assert report.caption_lengths["count"] == 2
    assert report.delta_summary["n"] == 2

    path = report.save(tmp_path / "report.json")
    assert MetricsReport.load(path) == report
    write_judgments(tmp_path / "judgments.jsonl", judgments)
    loaded = load_judgments(tmp_path / "judgments.jsonl")
    assert [j.success for j in loaded] == [True, False, False]
    assert loaded[0].caption == "A cat on a couch"

    with pytest.raises(InvalidArgumentError):
        evaluate_items([], toy_scorer)


def test_report_rejects_rates_outside_unit_interval():
    with pytest.raises(InvalidArgumentError):
        MetricsReport(msr=1.5, aar=0.0, bar=0.0)


def test_merge_weights_by_counts_and_checks_scale():
    a = MetricsReport(
        msr=0.5, aar=0.4, bar=0.2,
        counts={"judgments": 2, "successes": 1, "aar_used": 2, "bar_used": 2},
        per_pair={"cat<-dog": {"n": 2, "msr": 0.5, "aar": 0.4, "bar": 0.2}},
    )
    b = MetricsReport(
        msr=1.0, aar=1.0, bar=0.0,
        counts={"judgments": 2, "successes": 2, "aar_used": 1, "bar_used": 2},
        per_pair={"cat<-dog": {"n": 2, "msr": 1.0, "aar": 1.0, "bar": 0.0}},
    )
    merged = merge_reports([a, b])
    assert merged.msr == pytest.approx(0.75)
    assert merged.aar == pytest.approx(0.6)
    assert merged.bar == pytest.approx(0.1)
    assert merged.per_pair["cat<-dog"]["n"] == 4
    assert merged.per_pair["cat<-dog"]["msr"] == pytest.approx(0.75)

    other = MetricsReport(msr=0.0, aar=0.0, bar=0.0, similarity_scale=ToyScorer(scale=1.0).scale)
    with pytest.raises(ScaleMismatchError):
        merge_reports([a, other])


@pytest.mark.parametrize("caption", ["A cat on a couch", "A red dog", "A blue cat near a dog"])
def test_delta_sign_does_not_depend_on_the_scale(caption):
    deltas = [judge_mislabel(_rec(caption), PAIR, BLUE, RED, ToyScorer(scale=scale)).delta
              for scale in (1.0, 100.0, 2500.0)]
    assert len({d > 0 for d in deltas}) == 1
    assert deltas[1] == pytest.approx(100.0 * deltas[0])
