import json

import pytest

from amptool.dataset import (
    ConceptPair,
    CorpusManifest,
    CorpusRecord,
    assign_concept,
    group_corpus,
    load_pairs,
    sample_pairs,
    scan_corpus,
    select_attack_images,
    top_concepts,
    write_pairs,
)
from amptool.errors import InvalidArgumentError

from conftest import solid, write_png


def _manifest(rows):
    return CorpusManifest([CorpusRecord(id=i, path=f"{i}.png", concept=c, confidence=p) for i, c, p in rows])


def test_assign_concept_softmax_over_candidates(toy_scorer):
    red = solid((1.0, 0.0, 0.0), image_id="r")
    result = assign_concept(red, ["cat", "dog"], toy_scorer)
    assert result.concept == "dog"
    assert 0.5 < result.confidence <= 1.0
    assert result.candidates == ("cat", "dog")
    with pytest.raises(InvalidArgumentError):
        assign_concept(red, [], toy_scorer)


def test_scan_and_group_corpus(tmp_path, toy_scorer):
    corpus = tmp_path / "corpus"
    write_png(corpus / "a.png", (1.0, 0.0, 0.0))
    write_png(corpus / "b.png", (0.0, 0.0, 1.0))
    write_png(corpus / "c.png", (0.0, 1.0, 0.0))
    (corpus / "broken.png").write_bytes(b"not an image")
    (corpus / "captions.jsonl").write_text(
        json.dumps({"file": "a.png", "caption": "A dog next to a cat"}) + "\n"
        + json.dumps({"file": "b.png", "caption": "A cat on a couch"}) + "\n",
        encoding="utf-8",
    )
    (corpus / "c.txt").write_text("a photograph", encoding="utf-8")

    entries = scan_corpus(corpus)
    assert [e.id for e in entries] == ["a", "b", "broken", "c"]
    outcome = group_corpus(entries, toy_scorer, image_size=16, base_dir=tmp_path)
    by_id = outcome.manifest.by_id()
    assert by_id["a"].concept == "dog"
    assert by_id["b"].concept == "cat"
    # no candidate nouns: unassigned, not an error
    assert by_id["c"].concept is None
    assert list(outcome.failures) == [str(corpus / "broken.png")]
    assert by_id["a"].path == "corpus/a.png"

    path = outcome.manifest.save(tmp_path / "corpus.jsonl")
    loaded = CorpusManifest.load(path)
    assert [r.id for r in loaded.records] == ["a", "b", "c"]


def test_manifest_rejects_duplicates_and_dangling_paths(tmp_path):
    with pytest.raises(InvalidArgumentError):
        CorpusManifest([CorpusRecord("x", "x.png"), CorpusRecord("x", "y.png")])
    _manifest([("x", "dog", 1.0)]).save(tmp_path / "m.jsonl")
    with pytest.raises(InvalidArgumentError):
        CorpusManifest.load(tmp_path / "m.jsonl")
    assert len(CorpusManifest.load(tmp_path / "m.jsonl", check_paths=False)) == 1


def test_top_concepts_ties_are_lexicographic():
    manifest = _manifest([
        ("1", "dog", 1.0), ("2", "dog", 1.0), ("3", "cat", 1.0),
        ("4", "car", 1.0), ("5", "ball", 1.0), ("6", None, 0.0),
    ])
    assert top_concepts(manifest, 3) == ["dog", "ball", "car"]
    with pytest.raises(InvalidArgumentError):
        top_concepts(manifest, 0)


def test_select_attack_images_is_seeded_and_filters_confidence():
    rows = [(f"d{i}", "dog", 0.995) for i in range(6)] + [(f"c{i}", "cat", 0.999) for i in range(3)]
    rows.append(("d_low", "dog", 0.5))
    manifest = _manifest(rows)
    pair = ConceptPair("cat", "dog")
    first = select_attack_images(manifest, pair, 4, 0.99, seed=1)
    again = select_attack_images(manifest, pair, 4, 0.99, seed=1)
    assert [r.id for r in first.references] == [r.id for r in again.references]
    assert len(first.references) == 4
    assert len(first.targets) == 3
    assert first.short
    assert "d_low" not in {r.id for r in first.references}


def test_pairs_sampling_and_files(tmp_path):
    pairs = sample_pairs(["dog", "cat", "car"], 6, seed=0)
    assert len({p.key() for p in pairs}) == 6
    assert sample_pairs(["dog", "cat", "car"], 3, seed=4) == sample_pairs(["dog", "cat", "car"], 3, seed=4)
    with pytest.raises(InvalidArgumentError):
        sample_pairs(["dog", "cat"], 3)
    with pytest.raises(InvalidArgumentError):
        ConceptPair("dog", "dog")

    path = write_pairs(tmp_path / "pairs.txt", pairs[:2])
    with open(path, "a", encoding="utf-8") as f:
        f.write("\n# comment\n")
    assert load_pairs(path) == pairs[:2]
    (tmp_path / "bad.txt").write_text("dog,zebra\n", encoding="utf-8")
    with pytest.raises(InvalidArgumentError, match="zebra"):
        load_pairs(tmp_path / "bad.txt", allowed=["dog", "cat"])
