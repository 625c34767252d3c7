import json
import threading

import pytest
import torch
import torch.nn as nn

from amptool import attacks
from amptool.attacks import (
    SWEEP_BUDGETS,
    AdaptiveLossTerms,
    AttackJob,
    EnsembleSpec,
    ResultsWriter,
    adaptive_perturb,
    budget_sweep,
    ensemble_perturb,
    load_results,
    read_jobs,
    transfer_distance,
    white_box_perturb,
    write_jobs,
)
from amptool.config import Settings
from amptool.core import AttackConfig, AttackMode, ImageTensor
from amptool.defenses import score_alignment
from amptool.embeddings import EmbeddingCache, RandomProjectionExtractor, TorchFeatureExtractor, build_extractor
from amptool.errors import CapabilityError, DependencyError, InvalidArgumentError
from amptool.jpeg import jpeg_roundtrip

EPS = 16 / 255
# Optimum of the two-pixel problem: delta = eps everywhere.
OPTIMUM = (1.2 * (EPS - 0.5)) ** 2


def _config(mode=AttackMode.WHITE_BOX, **kw):
    params = dict(budget=EPS, steps=20, step_size=EPS / 10, mode=mode)
    params.update(kw)
    return AttackConfig(**params)


def test_white_box_reaches_closed_form_optimum(two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    result = white_box_perturb(reference, target, linear_extractor, _config())
    assert result.final_loss == pytest.approx(OPTIMUM, rel=1e-4)
    assert result.final_loss <= result.initial_loss
    assert result.converged
    assert result.perturbed.id == "ref~tgt"
    assert torch.allclose(result.perturbed.pixels, torch.full((3, 1, 2), 0.4 + EPS), atol=1e-6)
    assert len(result.loss_trace) == 20


def test_budget_is_never_exceeded():
    gen = torch.Generator().manual_seed(0)
    reference = ImageTensor(torch.rand(3, 32, 32, generator=gen), "r")
    target = ImageTensor(torch.rand(3, 32, 32, generator=gen), "t")
    extractor = RandomProjectionExtractor(seed=1, embed_dim=16, pool=8, channels=4)
    config = _config(budget=4 / 255, step_size=1 / 255, steps=15, random_init=True, seed=3)
    result = white_box_perturb(reference, target, extractor, config)
    assert max(result.budget_trace) <= config.budget + 1e-7
    diff = (result.perturbed.pixels - reference.pixels).abs().max()
    assert float(diff) <= config.budget + 1e-6
    assert float(result.perturbed.pixels.min()) >= 0.0
    assert float(result.perturbed.pixels.max()) <= 1.0


def test_single_member_ensemble_matches_white_box(two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    white = white_box_perturb(reference, target, linear_extractor, _config())
    ensemble = ensemble_perturb(
        reference, target, EnsembleSpec([linear_extractor], stabilizer="none"), _config(AttackMode.ENSEMBLE)
    )
    assert ensemble.final_loss == pytest.approx(white.final_loss)
    assert torch.allclose(ensemble.delta, white.delta)


def test_spectrum_momentum_still_descends(two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    spec = EnsembleSpec([linear_extractor], stabilizer="momentum_spectrum", copies=2, sigma=0.01)
    result = ensemble_perturb(reference, target, spec, _config(AttackMode.ENSEMBLE))
    assert result.final_loss < result.initial_loss
    assert max(result.budget_trace) <= EPS + 1e-7


def test_adaptive_without_alignment_tracks_white_box(two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    terms = AdaptiveLossTerms(jpeg_quality=100, alpha=0.0)
    config = _config(AttackMode.ADAPTIVE, jpeg_quality=100, alpha=0.0)
    result = adaptive_perturb(reference, target, linear_extractor, None, terms, config)
    assert result.final_loss == pytest.approx(OPTIMUM, abs=1e-2)
    assert set(result.component_traces) == {"distance", "alignment"}


def test_adaptive_alignment_needs_a_caption_and_scorer(two_pixel_pair, linear_extractor, toy_scorer):
    reference, target = two_pixel_pair
    with pytest.raises(InvalidArgumentError):
        AdaptiveLossTerms(alpha=0.1)
    terms = AdaptiveLossTerms(jpeg_quality=90, alpha=0.1, target_caption="a red dog")
    config = _config(AttackMode.ADAPTIVE, jpeg_quality=90, alpha=0.1)
    with pytest.raises(InvalidArgumentError):
        adaptive_perturb(reference, target, linear_extractor, None, terms, config)
    result = adaptive_perturb(reference, target, linear_extractor, toy_scorer, terms, config)
    assert result.extractor_ids == ["linear", "toy-palette"]


def test_mode_and_shape_are_checked(two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    with pytest.raises(InvalidArgumentError):
        white_box_perturb(reference, target, linear_extractor, _config(AttackMode.ENSEMBLE))
    wide = ImageTensor(torch.full((3, 1, 3), 0.5), "wide")
    with pytest.raises(InvalidArgumentError):
        white_box_perturb(reference, wide, linear_extractor, _config())


def test_extractor_without_gradients_is_refused(two_pixel_pair):
    reference, target = two_pixel_pair
    frozen = TorchFeatureExtractor("frozen", torch.nn.Flatten(), embed_dim=6, supports_grad=False)
    with pytest.raises(CapabilityError):
        white_box_perturb(reference, target, frozen, _config())


def test_config_rejects_unreachable_budget():
    with pytest.raises(InvalidArgumentError):
        AttackConfig(budget=EPS, steps=2, step_size=EPS / 10)
    with pytest.raises(InvalidArgumentError):
        EnsembleSpec([RandomProjectionExtractor()], weights=[0.5])


def test_warm_started_sweep_is_monotone(two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    results = budget_sweep(white_box_perturb, reference, target, _config(), extractor=linear_extractor)
    assert [r.config.budget for r in results] == sorted(SWEEP_BUDGETS)
    losses = [r.final_loss for r in results]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    for r in results:
        assert r.config.step_size == pytest.approx(r.config.budget / 10)


def test_transfer_distance_is_zero_for_identical_images(two_pixel_pair, linear_extractor):
    reference, _ = two_pixel_pair
    assert transfer_distance(reference, reference, linear_extractor) == pytest.approx(0.0)


def test_job_files_and_config(tmp_path):
    jobs = [AttackJob("r1", "t1", mode="adaptive", epsilon=8 / 255, target_concept="cat", reference_concept="dog")]
    write_jobs(tmp_path / "jobs.jsonl", jobs)
    loaded = read_jobs(tmp_path / "jobs.jsonl")
    assert loaded == jobs
    config = loaded[0].config(Settings())
    assert config.mode is AttackMode.ADAPTIVE
    assert config.budget == pytest.approx(8 / 255)
    assert config.step_size == pytest.approx(8 / 2550)

    (tmp_path / "bad.jsonl").write_text(json.dumps({"reference_id": "r", "bogus": 1}) + "\n", encoding="utf-8")
    with pytest.raises(InvalidArgumentError):
        read_jobs(tmp_path / "bad.jsonl")


def test_results_writer_persists_png_and_index(tmp_path, two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    result = white_box_perturb(reference, target, linear_extractor, _config())
    writer = ResultsWriter(tmp_path / "results")
    row = writer.add(result, extra={"target_concept": "cat"}, tag="eps16")
    writer.flush()
    assert row["perturbed_id"] == "ref~tgt@eps16"
    assert (tmp_path / "results" / row["image"]).exists()
    sidecar = json.loads((tmp_path / "results" / row["sidecar"]).read_text(encoding="utf-8"))
    assert sidecar["max_abs_delta"] <= EPS + 1e-7
    assert sidecar["target_concept"] == "cat"
    rows = load_results(tmp_path / "results")
    assert rows[0]["png_sha256"] == row["png_sha256"]


def test_load_results_without_attack_output(tmp_path):
    with pytest.raises(DependencyError) as info:
        load_results(tmp_path)
    assert info.value.stage == "attack"
    (tmp_path / "results.jsonl").write_text("", encoding="utf-8")
    with pytest.raises(DependencyError):
        load_results(tmp_path)


def _linear(name, rows):
    layer = nn.Linear(6, len(rows), bias=False)
    with torch.no_grad():
        layer.weight.copy_(torch.tensor(rows))
    return TorchFeatureExtractor(name, nn.Sequential(nn.Flatten(), layer), embed_dim=len(rows))


@pytest.fixture
def near_pair():
    # target within the budget of the reference
    return ImageTensor(torch.full((3, 1, 2), 0.4), "ref"), ImageTensor(torch.full((3, 1, 2), 0.45), "tgt")


def test_white_box_closes_most_of_a_reachable_gap(near_pair, linear_extractor):
    reference, target = near_pair
    before = transfer_distance(reference, target, linear_extractor)
    result = white_box_perturb(reference, target, linear_extractor, _config())
    after = transfer_distance(result.perturbed, target, linear_extractor)
    assert result.initial_loss == pytest.approx(before)
    assert after <= 0.2 * before
    assert result.converged


def test_ensemble_perturbation_transfers_to_a_held_out_encoder(near_pair, linear_extractor):
    reference, target = near_pair
    picks = _linear("picks", [[1.0 if j == i else 0.0 for j in range(6)] for i in range(4)])
    held_out = _linear("held-out", [[0.1, 0.3, 0.2, 0.1, 0.2, 0.3], [0.3, 0.0, 0.1, 0.2, 0.0, 0.1]])
    spec = EnsembleSpec([linear_extractor, picks], stabilizer="none")
    result = ensemble_perturb(reference, target, spec, _config(AttackMode.ENSEMBLE))
    assert result.extractor_ids == ["linear", "picks"]
    before = transfer_distance(reference, target, held_out)
    after = transfer_distance(result.perturbed, target, held_out)
    assert after <= 0.2 * before


def test_same_seed_reruns_are_bit_identical():
    gen = torch.Generator().manual_seed(1)
    reference = ImageTensor(torch.rand(3, 32, 32, generator=gen), "r")
    target = ImageTensor(torch.rand(3, 32, 32, generator=gen), "t")
    config = _config(budget=4 / 255, step_size=1 / 255, steps=10, random_init=True, seed=3)

    def run(cfg):
        return white_box_perturb(reference, target, RandomProjectionExtractor(seed=1, embed_dim=16, pool=8,
                                                                               channels=4), cfg)

    a, b = run(config), run(config)
    assert torch.equal(a.delta, b.delta)
    assert torch.equal(a.perturbed.pixels, b.perturbed.pixels)
    assert a.loss_trace == b.loss_trace
    other = run(_config(budget=4 / 255, step_size=1 / 255, steps=10, random_init=True, seed=4))
    assert not torch.equal(a.delta, other.delta)


class _Rounded(nn.Module):
    def forward(self, x):
        return torch.round(x * 4)


def test_flat_objective_is_reported_as_not_converged(two_pixel_pair):
    reference, target = two_pixel_pair
    stuck = TorchFeatureExtractor("stuck", nn.Sequential(nn.Flatten(), _Rounded()), embed_dim=6)
    result = white_box_perturb(reference, target, stuck, _config())
    assert result.initial_loss > 0
    assert result.final_loss == result.initial_loss
    assert not result.converged


def test_serialized_backend_holds_its_lock_through_backward(two_pixel_pair):
    reference, target = two_pixel_pair
    held = []

    class RecordBackward(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, grad):
            held.append(_locked_elsewhere(attacks._backend_lock(extractor)))
            return grad

    class Recorder(nn.Module):
        def forward(self, x):
            return RecordBackward.apply(x)

    layer = nn.Linear(6, 2, bias=False)
    with torch.no_grad():
        layer.weight.copy_(torch.tensor([[0.2] * 6, [0.2, -0.2, 0.2, -0.2, 0.2, -0.2]]))
    extractor = TorchFeatureExtractor("serial", nn.Sequential(Recorder(), nn.Flatten(), layer), embed_dim=2)
    extractor.serialize_calls = True

    white_box_perturb(reference, target, extractor, _config(steps=12))
    assert len(held) == 12
    assert all(held)


def _locked_elsewhere(lock):
    """True when another thread cannot take ``lock`` right now."""
    taken = []

    def attempt():
        got = lock.acquire(blocking=False)
        if got:
            lock.release()
        taken.append(got)

    worker = threading.Thread(target=attempt)
    worker.start()
    worker.join()
    return not taken[0]


def test_adaptive_alignment_raises_target_caption_similarity(two_pixel_pair, linear_extractor, toy_scorer):
    reference, target = two_pixel_pair
    caption = "a blue cat"
    plain = adaptive_perturb(reference, target, linear_extractor, None,
                             AdaptiveLossTerms(jpeg_quality=100, alpha=0.0),
                             _config(AttackMode.ADAPTIVE, jpeg_quality=100, alpha=0.0))
    aligned = adaptive_perturb(reference, target, linear_extractor, toy_scorer,
                               AdaptiveLossTerms(jpeg_quality=100, alpha=0.05, target_caption=caption),
                               _config(AttackMode.ADAPTIVE, jpeg_quality=100, alpha=0.05))
    # an alignment filter rejects low scores; the aligned attack moves away from rejection
    assert score_alignment(aligned.perturbed, caption, toy_scorer) > score_alignment(plain.perturbed, caption, toy_scorer)
    assert score_alignment(aligned.perturbed, caption, toy_scorer) > score_alignment(reference, caption, toy_scorer)


def test_transfer_distance_reuses_cached_embeddings(tmp_path, two_pixel_pair, linear_extractor):
    reference, target = two_pixel_pair
    cache = EmbeddingCache(tmp_path / "emb")
    first = transfer_distance(reference, target, linear_extractor, cache=cache)
    assert cache.get(linear_extractor.id, target.digest()) is not None
    assert transfer_distance(reference, target, linear_extractor, cache=EmbeddingCache(tmp_path / "emb")) == first


@pytest.mark.models
def test_adaptive_attack_survives_jpeg_better_than_white_box():
    extractor = build_extractor("clip:openai/clip-vit-base-patch32")
    gen = torch.Generator().manual_seed(0)
    coarse = torch.rand(2, 3, 14, 14, generator=gen) * 0.8 + 0.1
    pixels = torch.nn.functional.interpolate(coarse, size=(224, 224), mode="bilinear", align_corners=False)
    reference, target = ImageTensor(pixels[0].clamp(0, 1), "r"), ImageTensor(pixels[1].clamp(0, 1), "t")
    params = dict(budget=16 / 255, steps=100, step_size=1 / 255, jpeg_quality=75, alpha=0.0)
    basic = white_box_perturb(reference, target, extractor, AttackConfig(**params))
    adaptive = adaptive_perturb(reference, target, extractor, None, AdaptiveLossTerms(jpeg_quality=75, alpha=0.0),
                                AttackConfig(mode=AttackMode.ADAPTIVE, **params))

    def after_jpeg(result):
        return transfer_distance(jpeg_roundtrip(result.perturbed, 75), target, extractor)

    assert after_jpeg(adaptive) <= 0.5 * after_jpeg(basic)
