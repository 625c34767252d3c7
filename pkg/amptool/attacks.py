"""Perturbation optimizers: white-box, JPEG/alignment-adaptive and encoder ensemble.

All three share one sign-gradient PGD loop (``_run_pgd``). Each step evaluates
the objective on ``clamp(x + delta)``, moves delta against the sign of the
(possibly stabilized) gradient, projects onto the L-infinity ball and re-clamps.
The best iterate seen is what gets returned.
"""
from __future__ import annotations

import contextlib
import logging
import math
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import torch

from .core import (
    AttackConfig,
    AttackMode,
    ImageTensor,
    PerturbationResult,
    apply_perturbation,
    project_linf,
    save_png,
    write_sidecar,
)
from .embeddings import EmbeddingCache, FeatureExtractor, TextImageScorer, embed, feature_distance
from .errors import (
    BudgetViolationError,
    CapabilityError,
    DependencyError,
    InvalidArgumentError,
)
from .jpeg import DifferentiableJPEG, dct_2d, idct_2d
from .utils import compute_file_hash, read_jsonl, slug, write_jsonl


logger = logging.getLogger(__name__)

SWEEP_BUDGETS = tuple(k / 255 for k in (2, 4, 8, 16, 32))

# objective(batch) -> (scalar loss, named scalar components)
Objective = Callable[[torch.Tensor], Tuple[torch.Tensor, Dict[str, torch.Tensor]]]


@dataclass
class EnsembleSpec:
    extractors: List[FeatureExtractor]
    weights: Optional[List[float]] = None
    stabilizer: str = "none"
    copies: int = 4
    momentum: float = 0.9
    rho: float = 0.5
    sigma: float = 16 / 255

    def __post_init__(self) -> None:
        if not self.extractors:
            raise InvalidArgumentError("ensemble needs at least one extractor")
        if self.weights is None:
            self.weights = [1.0 / len(self.extractors)] * len(self.extractors)
        if len(self.weights) != len(self.extractors):
            raise InvalidArgumentError("one weight per extractor is required")
        if any(w < 0 for w in self.weights):
            raise InvalidArgumentError("ensemble weights must be nonnegative")
        total = sum(self.weights)
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-6):
            raise InvalidArgumentError(f"ensemble weights must sum to 1, got {total}")
        if self.stabilizer not in {"none", "momentum_spectrum"}:
            raise InvalidArgumentError(f"unknown stabilizer {self.stabilizer!r}")
        if self.copies < 1:
            raise InvalidArgumentError("copies must be positive")
        if not 0 <= self.rho < 1:
            raise InvalidArgumentError("rho must be in [0, 1)")

    @classmethod
    def from_settings(cls, settings: Any, extractors: List[FeatureExtractor],
                      stabilizer: str = "momentum_spectrum") -> "EnsembleSpec":
        return cls(
            extractors=extractors,
            stabilizer=stabilizer,
            copies=settings.ssa_copies,
            momentum=settings.ssa_momentum,
            rho=settings.ssa_rho,
            sigma=settings.ssa_sigma,
        )

    def describe(self) -> Dict[str, Any]:
        return {
            "extractors": [e.id for e in self.extractors],
            "weights": list(self.weights or []),
            "stabilizer": self.stabilizer,
            "copies": self.copies,
            "momentum": self.momentum,
            "rho": self.rho,
            "sigma": self.sigma,
        }


@dataclass(frozen=True)
class AdaptiveLossTerms:
    jpeg_quality: int = 75
    alpha: float = 0.05
    target_caption: str = ""

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be nonnegative")
        if not 1 <= self.jpeg_quality <= 100:
            raise InvalidArgumentError("jpeg_quality must be in [1, 100]")
        if self.alpha > 0 and not self.target_caption.strip():
            raise InvalidArgumentError("target_caption is required when alpha > 0")

    @classmethod
    def from_config(cls, config: AttackConfig, target_caption: str) -> "AdaptiveLossTerms":
        return cls(jpeg_quality=config.jpeg_quality, alpha=config.alpha, target_caption=target_caption)


# Backends that declare serialize_calls share one lock per extractor id.
_backend_locks: Dict[str, threading.RLock] = {}
_backend_locks_guard = threading.Lock()


def _backend_lock(component: Any) -> Optional[threading.RLock]:
    if not getattr(component, "serialize_calls", False):
        return None
    with _backend_locks_guard:
        return _backend_locks.setdefault(component.id, threading.RLock())


@contextlib.contextmanager
def _guard(*components: Any) -> Iterator[None]:
    """Hold the lock of every serialized backend in ``components``, taken in id order."""
    locks = {c.id: lock for c in components if (lock := _backend_lock(c)) is not None}
    with contextlib.ExitStack() as stack:
        for key in sorted(locks):
            stack.enter_context(locks[key])
        yield


def _require_grad(component: FeatureExtractor | TextImageScorer) -> None:
    if not getattr(component, "supports_grad", False):
        raise CapabilityError(component.id, "gradients")


def _check_inputs(reference: ImageTensor, target: ImageTensor, config: AttackConfig, mode: AttackMode) -> None:
    if config.mode is not mode:
        raise InvalidArgumentError(f"config.mode is {config.mode.value}, expected {mode.value}")
    if reference.shape != target.shape:
        raise InvalidArgumentError(f"reference {reference.shape} and target {target.shape} differ in shape")


class SpectrumMomentum:
    """Spectrum-augmented gradient averaging with momentum accumulation.

    Each call draws ``copies`` images ``idct(dct(x + noise) * mask)`` with
    gaussian noise of std ``sigma`` and a per-coefficient mask in
    [1 - rho, 1 + rho], averages their gradients, normalizes by mean |g|
    and folds the result into a momentum buffer.
    """

    def __init__(self, copies: int, momentum: float, rho: float, sigma: float, generator: torch.Generator) -> None:
        self.copies = copies
        self.momentum = momentum
        self.rho = rho
        self.sigma = sigma
        self.generator = generator
        self._accum: Optional[torch.Tensor] = None

    def __call__(self, adv: torch.Tensor, grad: torch.Tensor, objective: Objective) -> torch.Tensor:
        avg = torch.zeros_like(adv)
        for _ in range(self.copies):
            gauss = torch.randn(adv.shape, generator=self.generator, dtype=adv.dtype) * self.sigma
            mask = torch.rand(adv.shape, generator=self.generator, dtype=adv.dtype) * 2 * self.rho + 1 - self.rho
            augmented = idct_2d(dct_2d(adv + gauss.to(adv.device)) * mask.to(adv.device)).detach().requires_grad_(True)
            loss, _ = objective(augmented)
            (g,) = torch.autograd.grad(loss, augmented)
            avg = avg + g
        avg = avg / self.copies
        avg = avg / avg.abs().mean(dim=(1, 2, 3), keepdim=True).clamp_min(1e-12)
        self._accum = avg if self._accum is None else self.momentum * self._accum + avg
        return self._accum


Stabilizer = Callable[[torch.Tensor, torch.Tensor, Objective], torch.Tensor]


def _initial_delta(x: torch.Tensor, config: AttackConfig, init_delta: Optional[torch.Tensor],
                   generator: torch.Generator) -> torch.Tensor:
    if init_delta is not None:
        delta = init_delta.detach().to(x.dtype).reshape(x.shape).clone()
    elif config.random_init:
        delta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * config.budget
    else:
        delta = torch.zeros_like(x)
    return project_linf((x + delta).clamp(0.0, 1.0) - x, config.budget)


def _run_pgd(
    reference: ImageTensor,
    target_id: str,
    objective: Objective,
    config: AttackConfig,
    extractor_ids: List[str],
    stabilizer_factory: Optional[Callable[[torch.Generator], Stabilizer]] = None,
    init_delta: Optional[torch.Tensor] = None,
    components: Sequence[Any] = (),
) -> PerturbationResult:
    """Sign-gradient PGD; ``components`` are the backends whose locks cover each forward and backward."""
    eps = config.budget
    x = reference.batch().detach()
    # the budget as representable in the working dtype; clamp rounds to it
    limit = float(torch.tensor(eps, dtype=x.dtype))
    generator = torch.Generator().manual_seed(config.seed)
    delta = _initial_delta(x, config, init_delta, generator)
    stabilizer = stabilizer_factory(generator) if stabilizer_factory else None

    loss_trace: List[float] = []
    component_traces: Dict[str, List[float]] = defaultdict(list)
    budget_trace: List[float] = []
    best_loss = math.inf
    best_delta = delta.clone()

    for step in range(config.steps):
        adv = (x + delta).clamp(0.0, 1.0).detach().requires_grad_(True)
        with _guard(*components):
            loss, parts = objective(adv)
            (grad,) = torch.autograd.grad(loss, adv)
            direction = stabilizer(adv.detach(), grad, objective) if stabilizer else grad
        loss_value = float(loss.detach())
        loss_trace.append(loss_value)
        for name, value in parts.items():
            component_traces[name].append(float(value.detach()))
        if loss_value < best_loss:
            best_loss = loss_value
            best_delta = delta.clone()

        delta = project_linf(delta - config.step_size * direction.sign(), eps)
        delta = project_linf((x + delta).clamp(0.0, 1.0) - x, eps)
        max_abs = float(delta.abs().max())
        budget_trace.append(max_abs)
        if max_abs > limit:
            raise BudgetViolationError(f"step {step}: max|delta|={max_abs!r} exceeds budget {eps!r}")
        if step % 50 == 0:
            logger.debug(f"{reference.id} -> {target_id} step {step}: loss={loss_value:.6f}")

    with _guard(*components), torch.no_grad():
        final_loss_t, _ = objective((x + delta).clamp(0.0, 1.0))
    final_value = float(final_loss_t)
    if final_value < best_loss:
        best_loss = final_value
        best_delta = delta.clone()

    perturbed = apply_perturbation(reference, best_delta[0])
    initial = loss_trace[0] if loss_trace else best_loss
    result = PerturbationResult(
        perturbed=perturbed.with_id(perturbed_id(reference.id, target_id)),
        final_loss=best_loss,
        loss_trace=loss_trace,
        config=config,
        target_id=target_id,
        reference_id=reference.id,
        initial_loss=initial,
        converged=_improved(initial, best_loss),
        component_traces=dict(component_traces),
        budget_trace=budget_trace,
        extractor_ids=extractor_ids,
        delta=best_delta[0].detach(),
    )
    if not result.converged:
        logger.warning(f"{reference.id} -> {target_id}: loss did not decrease ({initial:.6f} -> {best_loss:.6f})")
    logger.info(
        f"{config.mode.value} attack {reference.id} -> {target_id}: "
        f"loss {initial:.6f} -> {best_loss:.6f} in {config.steps} steps"
    )
    return result


def _improved(initial: float, best: float, rel_tol: float = 1e-6) -> bool:
    """Best loss is measurably below the starting loss, or the start was already at zero."""
    if abs(initial) <= 1e-12:
        return True
    return best < initial - rel_tol * max(1.0, abs(initial))


def perturbed_id(reference_id: str, target_id: str) -> str:
    return f"{reference_id}~{target_id}"


def _target_features(extractor: FeatureExtractor, target: ImageTensor) -> torch.Tensor:
    with _guard(extractor), torch.no_grad():
        return extractor.features(target.batch().to(extractor.dtype)).detach()


def white_box_perturb(
    reference: ImageTensor,
    target: ImageTensor,
    extractor: FeatureExtractor,
    config: AttackConfig,
    init_delta: Optional[torch.Tensor] = None,
) -> PerturbationResult:
    """Minimize Dist(phi(x_r + delta), phi(x_t)) subject to |delta| <= budget."""
    _check_inputs(reference, target, config, AttackMode.WHITE_BOX)
    _require_grad(extractor)
    target_feats = _target_features(extractor, target)

    def objective(batch: torch.Tensor):
        feats = extractor.features(batch.to(extractor.dtype))
        dist = feature_distance(feats, target_feats, config.distance).sum()
        return dist, {"distance": dist}

    return _run_pgd(reference, target.id, objective, config, [extractor.id], init_delta=init_delta,
                    components=[extractor])


def adaptive_perturb(
    reference: ImageTensor,
    target: ImageTensor,
    extractor: FeatureExtractor,
    scorer: Optional[TextImageScorer],
    terms: AdaptiveLossTerms,
    config: AttackConfig,
    init_delta: Optional[torch.Tensor] = None,
) -> PerturbationResult:
    """Minimize Dist(phi(JPEG(x_r + delta)), phi(x_t)) - alpha * sim(x_r + delta, C_t)."""
    _check_inputs(reference, target, config, AttackMode.ADAPTIVE)
    _require_grad(extractor)
    if terms.alpha > 0:
        if scorer is None:
            raise InvalidArgumentError("adaptive attack with alpha > 0 needs a scorer")
        _require_grad(scorer)
    jpeg = DifferentiableJPEG(terms.jpeg_quality)
    target_feats = _target_features(extractor, target)

    def objective(batch: torch.Tensor):
        feats = extractor.features(jpeg(batch).to(extractor.dtype))
        dist = feature_distance(feats, target_feats, config.distance).sum()
        if terms.alpha > 0:
            align = scorer.scale * scorer.cosine(batch, [terms.target_caption])[0, 0]
        else:
            align = torch.zeros((), dtype=dist.dtype)
        return dist - terms.alpha * align.to(dist.dtype), {"distance": dist, "alignment": align}

    used = [extractor] + ([scorer] if scorer is not None and terms.alpha > 0 else [])
    return _run_pgd(reference, target.id, objective, config, [c.id for c in used], init_delta=init_delta,
                    components=used)


def ensemble_perturb(
    reference: ImageTensor,
    target: ImageTensor,
    ensemble: EnsembleSpec,
    config: AttackConfig,
    init_delta: Optional[torch.Tensor] = None,
) -> PerturbationResult:
    """Minimize sum_k w_k * Dist(phi_k(x_r + delta), phi_k(x_t))."""
    _check_inputs(reference, target, config, AttackMode.ENSEMBLE)
    for extractor in ensemble.extractors:
        _require_grad(extractor)
    members = [
        (extractor, weight, _target_features(extractor, target))
        for extractor, weight in zip(ensemble.extractors, ensemble.weights or [])
    ]

    def objective(batch: torch.Tensor):
        total: Optional[torch.Tensor] = None
        parts: Dict[str, torch.Tensor] = {}
        for extractor, weight, target_feats in members:
            feats = extractor.features(batch.to(extractor.dtype))
            dist = feature_distance(feats, target_feats, config.distance).sum()
            parts[f"distance:{extractor.id}"] = dist
            term = weight * dist
            total = term if total is None else total + term
        return total, parts

    factory = None
    if ensemble.stabilizer == "momentum_spectrum":
        def factory(generator: torch.Generator) -> Stabilizer:
            return SpectrumMomentum(ensemble.copies, ensemble.momentum, ensemble.rho, ensemble.sigma, generator)

    return _run_pgd(
        reference, target.id, objective, config,
        [e.id for e in ensemble.extractors], stabilizer_factory=factory, init_delta=init_delta,
        components=ensemble.extractors,
    )


def budget_sweep(
    attack: Callable[..., PerturbationResult],
    reference: ImageTensor,
    target: ImageTensor,
    config: AttackConfig,
    budgets: Sequence[float] = SWEEP_BUDGETS,
    warm_start: bool = True,
    **attack_kwargs: Any,
) -> List[PerturbationResult]:
    """Run ``attack`` at increasing budgets; step size keeps its ratio to the budget.

    With ``warm_start`` each run starts from the previous optimum, which lies
    inside the larger ball, so final losses are non-increasing in the budget.
    """
    ordered = sorted(budgets)
    ratio = config.step_size / config.budget
    results: List[PerturbationResult] = []
    previous: Optional[torch.Tensor] = None
    for eps in ordered:
        cfg = replace(config, budget=eps, step_size=eps * ratio)
        init = previous if warm_start else None
        result = attack(reference, target, config=cfg, init_delta=init, **attack_kwargs)
        results.append(result)
        previous = result.delta
    return results


def transfer_distance(perturbed: ImageTensor, target: ImageTensor, extractor: FeatureExtractor,
                      kind: str = "l2", cache: Optional[EmbeddingCache] = None) -> float:
    """Feature distance under an extractor the attack did not optimize against."""
    with _guard(extractor):
        a = embed(extractor, perturbed, cache)
        b = embed(extractor, target, cache)
    return float(feature_distance(a, b, kind))


@dataclass
class AttackJob:
    reference_id: str
    target_id: str
    mode: str = AttackMode.WHITE_BOX.value
    epsilon: Optional[float] = None
    steps: Optional[int] = None
    alpha: Optional[float] = None
    jpeg_quality: Optional[int] = None
    seed: Optional[int] = None
    target_concept: Optional[str] = None
    reference_concept: Optional[str] = None

    def config(self, settings: Any) -> AttackConfig:
        return AttackConfig.from_settings(
            settings,
            self.mode,
            budget=self.epsilon,
            steps=self.steps,
            alpha=self.alpha,
            jpeg_quality=self.jpeg_quality,
            seed=self.seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def read_jobs(path: str | Path) -> List[AttackJob]:
    jobs = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            jobs.append(AttackJob(**row))
        except TypeError as e:
            raise InvalidArgumentError(f"{path}:{i + 1}: bad job record ({e})") from e
    return jobs


def write_jobs(path: str | Path, jobs: Iterable[AttackJob]) -> int:
    return write_jsonl(path, (job.to_dict() for job in jobs))


class ResultsWriter:
    """``images/<id>.png`` + ``images/<id>.json`` per result and a ``results.jsonl`` index."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.images_dir = self.root / "images"
        self.index_path = self.root / "results.jsonl"
        self.images_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._rows: List[Dict[str, Any]] = []

    def add(self, result: PerturbationResult, extra: Optional[Dict[str, Any]] = None,
            tag: Optional[str] = None) -> Dict[str, Any]:
        """Persist one result; ``tag`` distinguishes several results of one pair (budget sweeps)."""
        result_id = f"{result.perturbed.id}@{tag}" if tag else result.perturbed.id
        name = slug(result_id)
        png = save_png(result.perturbed, self.images_dir / f"{name}.png")
        sidecar = write_sidecar(result, self.images_dir / f"{name}.json", extra)
        row = {
            "perturbed_id": result_id,
            "reference_id": result.reference_id,
            "target_id": result.target_id,
            "mode": result.config.mode.value,
            "epsilon": result.config.budget,
            "final_loss": result.final_loss,
            "initial_loss": result.initial_loss,
            "image": png.relative_to(self.root).as_posix(),
            "sidecar": sidecar.relative_to(self.root).as_posix(),
            "png_sha256": compute_file_hash(png),
        }
        if extra:
            row.update(extra)
        with self._lock:
            self._rows.append(row)
        return row

    def flush(self) -> Path:
        with self._lock:
            rows = sorted(self._rows, key=lambda r: (r["perturbed_id"], r["epsilon"]))
        write_jsonl(self.index_path, rows)
        return self.index_path


def load_results(root: str | Path) -> List[Dict[str, Any]]:
    index = Path(root) / "results.jsonl"
    if not index.exists():
        raise DependencyError("attack", f"{index} not found")
    rows = list(read_jsonl(index))
    if not rows:
        raise DependencyError("attack", f"{index} has no results")
    return rows
