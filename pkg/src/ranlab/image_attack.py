"""Targeted PGD attack in the surrogate encoder's embedding space.

Starting from a clean image, iterate signed gradient ascent on the
similarity between the current iterate's embedding and a target image's
embedding, projecting every step onto the L-inf ball around the clean
image intersected with valid pixel range.  The returned adversarial
image is the best-similarity iterate seen, not necessarily the last.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad
from .encoders import (
    CaptionSample,
    DualEncoderParams,
    Embedding,
    ImageSample,
    encode_image,
    encode_text,
    image_forward,
    l2_normalize_rows,
    normalize,
)
from .errors import ContractViolationError, NumericFailureError

_BALL_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """L-inf PGD budget; norm_order is fixed to inf and kept for provenance."""

    epsilon: float = 8.0 / 255.0
    step_size: float = 2.0 / 255.0
    iterations: int = 40
    norm_order: float = np.inf

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractViolationError("epsilon must be >= 0")
        if self.iterations < 0:
            raise ContractViolationError("iterations must be >= 0")
        if self.iterations > 0 and self.step_size <= 0:
            raise ContractViolationError(
                "step_size must be > 0 when iterations > 0"
            )
        if self.norm_order != np.inf:
            raise ContractViolationError("only the L-inf norm is supported")


@dataclass(frozen=True)
class AdversarialResult:
    x_adv: np.ndarray
    delta: np.ndarray
    similarity_trace: tuple[float, ...]
    converged_at: int

    def __post_init__(self):
        object.__setattr__(self, "x_adv", _frozen(self.x_adv))
        object.__setattr__(self, "delta", _frozen(self.delta))

    @property
    def best_similarity(self) -> float:
        return self.similarity_trace[self.converged_at]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64).copy()
    arr.flags.writeable = False
    return arr


def _embed_fn(
    encoder: DualEncoderParams | Callable[[Tensor], Tensor],
) -> Callable[[Tensor], Tensor]:
    """Accepts trained params or any differentiable pixels->vector map."""
    if isinstance(encoder, DualEncoderParams):
        tensors = encoder.as_tensors()
        shape = encoder.config.image_shape

        def embed(pixels: Tensor) -> Tensor:
            return image_forward(tensors, pixels.reshape((1,) + shape)).reshape(
                (-1,)
            )

        return embed
    return encoder


def pgd_attack(
    encoder: DualEncoderParams | Callable[[Tensor], Tensor],
    x_clean: np.ndarray | ImageSample,
    x_target: np.ndarray | ImageSample,
    cfg: AttackConfig,
    objective: str = "cosine",
) -> AdversarialResult:
    """Craft a perturbation that drags x_clean toward x_target in feature space.

    ``objective`` is "cosine" (normalized embeddings, the default) or
    "dot" (raw inner product; useful with linear test encoders whose
    embedding of a zero image is the zero vector).
    """
    if isinstance(x_clean, ImageSample):
        x_clean = x_clean.pixels
    if isinstance(x_target, ImageSample):
        x_target = x_target.pixels
    x_clean = np.asarray(x_clean, dtype=np.float64)
    x_target = np.asarray(x_target, dtype=np.float64)
    if x_clean.shape != x_target.shape:
        raise ContractViolationError(
            f"clean/target shape mismatch: {x_clean.shape} vs {x_target.shape}"
        )
    if objective not in ("cosine", "dot"):
        raise ContractViolationError(f"unknown objective {objective!r}")

    embed = _embed_fn(encoder)
    target_vec = embed(Tensor(x_target)).detach()
    if objective == "cosine":
        target_vec = l2_normalize_rows(target_vec.reshape(1, -1)).reshape((-1,))

    def similarity(pixels: Tensor) -> Tensor:
        vec = embed(pixels)
        if objective == "cosine":
            vec = l2_normalize_rows(vec.reshape(1, -1)).reshape((-1,))
        return (vec * target_vec).sum()

    x = x_clean.copy()
    trace: list[float] = [similarity(Tensor(x)).item()]
    best_x, best_sim, best_at = x.copy(), trace[0], 0
    for t in range(cfg.iterations):
        leaf = Tensor(x)
        try:
            g = grad(similarity(leaf), [leaf])[leaf]
        except NumericFailureError as err:
            raise NumericFailureError(
                f"attack gradient failed at iteration {t}: {err}"
            ) from err
        stepped = x + cfg.step_size * np.sign(g)
        delta = np.clip(stepped - x_clean, -cfg.epsilon, cfg.epsilon)
        x = np.clip(x_clean + delta, 0.0, 1.0)
        sim = similarity(Tensor(x)).item()
        trace.append(sim)
        if sim > best_sim:
            best_x, best_sim, best_at = x.copy(), sim, t + 1
    delta = best_x - x_clean
    assert np.max(np.abs(delta)) <= cfg.epsilon + _BALL_TOL
    return AdversarialResult(
        x_adv=best_x,
        delta=delta,
        similarity_trace=tuple(trace),
        converged_at=best_at,
    )


def similarity_score(
    encoder: DualEncoderParams,
    image: ImageSample | np.ndarray,
    other: Embedding | CaptionSample | ImageSample,
) -> float:
    """Cosine of the two normalized embeddings, in [-1, 1]."""
    a = normalize(encode_image(encoder, image))
    if isinstance(other, Embedding):
        b = other if other.normalized else normalize(other)
    elif isinstance(other, CaptionSample):
        b = normalize(encode_text(encoder, other))
    elif isinstance(other, ImageSample):
        b = normalize(encode_image(encoder, other))
    else:
        raise ContractViolationError(
            f"cannot score against {type(other).__name__}"
        )
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


@dataclass(frozen=True)
class AttackReportRow:
    record_id: str
    target_id: str
    sim_clean_target: float
    sim_adv_target: float
    converged_at: int


@dataclass(frozen=True)
class AttackReport:
    """Mean similarity to the target caption, before vs after the attack."""

    rows: tuple[AttackReportRow, ...]
    mean_clean: float
    mean_adv: float

    def as_dict(self) -> dict:
        return {
            "mean_clean": self.mean_clean,
            "mean_adv": self.mean_adv,
            "rows": [vars(r) for r in self.rows],
        }


def attack_report(
    corpus,
    encoder: DualEncoderParams,
    cfg: AttackConfig,
    target_sampler: Callable[[np.random.Generator], object],
    seed: int = 0,
) -> AttackReport:
    """Attack every record toward a sampled out-of-family target and score
    similarity to the target's caption before and after."""
    records = list(getattr(corpus, "records", corpus))
    if not records:
        raise ContractViolationError("attack_report needs a nonempty corpus")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 2]))
    rows = []
    for record in records:
        target = target_sampler(rng)
        result = pgd_attack(encoder, record.image.pixels, target.image.pixels, cfg)
        sim_clean = similarity_score(encoder, record.image.pixels, target.caption)
        sim_adv = similarity_score(encoder, result.x_adv, target.caption)
        rows.append(
            AttackReportRow(
                record_id=record.image.id,
                target_id=target.image.id,
                sim_clean_target=sim_clean,
                sim_adv_target=sim_adv,
                converged_at=result.converged_at,
            )
        )
    return AttackReport(
        rows=tuple(rows),
        mean_clean=float(np.mean([r.sim_clean_target for r in rows])),
        mean_adv=float(np.mean([r.sim_adv_target for r in rows])),
    )
