"""Fine-tuning heads over frozen features: linear probe, MLP, and the
noise-rectifying recipe.

The rectifying mode transforms frozen features F through a 2-layer MLP
into Z and trains classifier + MLP + per-class unit-norm centroids with

    total = CE + alpha * (consistency + covariance) + beta * margin

where consistency ties row-normalized Z to F, covariance penalizes
squared off-diagonal entries of Z's sample covariance, and the margin
term pushes transformed features away from wrong-class centroids while
spreading the centroids apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, cross_entropy, grad
from .encoders import DualEncoderParams, image_forward
from .errors import ContractViolationError, DegenerateEmbeddingError
from .fileio import sha256_hex
from .optim import Adam, OptimizerConfig

_CLAMP = 1e-7


class Mode(str, Enum):
    LINEAR_PROBE = "lp"
    MLP_TUNE = "mlp"
    RAN = "ran"


@dataclass(frozen=True)
class FeatureBatch:
    """Frozen pre-trained features with optional integer labels."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ContractViolationError("features must be a nonempty n x D array")
        object.__setattr__(self, "features", f)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (f.shape[0],):
                raise ContractViolationError("labels must be one per row")
            object.__setattr__(self, "labels", y)


@dataclass(frozen=True)
class RanConfig:
    alpha: float = 0.01
    beta: float = 0.015
    mode: Mode = Mode.RAN
    learning_rate: float = 1e-2
    epochs: int = 200
    seed: int = 0
    hidden_multiplier: int = 2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolationError("alpha and beta must be >= 0")
        if self.epochs < 0:
            raise ContractViolationError("epochs must be >= 0")


# -- losses ------------------------------------------------------------------------


def cov_loss(Z) -> Tensor:
    """Mean squared off-diagonal of the sample covariance of Z (n x D)."""
    Z = ad.as_tensor(Z)
    if Z.ndim != 2:
        raise ContractViolationError("cov_loss needs an n x D matrix")
    n, d = Z.shape
    if n < 2:
        raise ContractViolationError("sample covariance needs n >= 2 rows")
    centered = Z - Z.mean(axis=0, keepdims=True)
    cov = (centered.T @ centered) * (1.0 / (n - 1))
    off_diag = cov * (1.0 - np.eye(d))
    return (off_diag * off_diag).sum() * (1.0 / d)


def _normalize_rows(t: Tensor, what: str) -> Tensor:
    norms_sq = (t * t).sum(axis=1, keepdims=True)
    if np.any(norms_sq.data <= 0.0):
        raise DegenerateEmbeddingError(f"zero-norm row in {what}")
    return t / norms_sq.sqrt()


def mse_consistency(F, Z) -> Tensor:
    """Squared distance between row-normalized F and Z, averaged over rows."""
    F = ad.as_tensor(F)
    Z = ad.as_tensor(Z)
    if F.shape != Z.shape or F.ndim != 2:
        raise ContractViolationError("F and Z must be matching n x D matrices")
    diff = _normalize_rows(F, "F") - _normalize_rows(Z, "Z")
    return (diff * diff).sum() * (1.0 / F.shape[0])


@dataclass(frozen=True)
class ClassCentroids:
    """One learnable unit-norm row per class."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ContractViolationError("centroids must be k x D with k >= 2")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractViolationError("centroid rows must be unit-norm")
        object.__setattr__(self, "matrix", m)

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @staticmethod
    def from_features(features: np.ndarray, labels: np.ndarray, k: int) -> "ClassCentroids":
        """Normalized per-class means; every class must be present."""
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        rows = []
        for j in range(k):
            members = features[labels == j]
            if members.shape[0] == 0:
                raise ContractViolationError(
                    f"class {j} absent from training split; centroid undefined"
                )
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm <= 0.0:
                raise DegenerateEmbeddingError(f"class {j} mean is zero")
            rows.append(mean / norm)
        return ClassCentroids(np.stack(rows))


def adv_loss(features, labels, centroids) -> Tensor:
    """Centroid-margin term, always <= 0; more negative means wider margins.

    Per sample: mean distance to wrong-class centroids plus mean angle
    between the own-class centroid and the others, negated and averaged.
    """
    F = ad.as_tensor(features)
    C = centroids.matrix if isinstance(centroids, ClassCentroids) else None
    if C is not None:
        C = ad.as_tensor(C)
    else:
        C = ad.as_tensor(centroids)
        norms = np.linalg.norm(C.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractViolationError("centroid rows must be unit-norm")
    k, d = C.shape
    if k < 2:
        raise ContractViolationError("need k >= 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    n = F.shape[0]
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ContractViolationError("labels must index the centroid rows")

    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    wrong = 1.0 - onehot  # (n, k) mask over j != y_i

    diffs = F.reshape(n, 1, d) - C.reshape(1, k, d)
    dists = (diffs * diffs).sum(axis=2).sqrt()  # (n, k)
    dist_term = (dists * wrong).sum(axis=1) * (1.0 / (k - 1))

    gram = (C @ C.T).clip(-1.0 + _CLAMP, 1.0 - _CLAMP)
    angles = gram.arccos()  # (k, k)
    own_rows = ad.as_tensor(onehot) @ angles  # row i = angles[y_i]
    angle_term = (own_rows * wrong).sum(axis=1) * (1.0 / (k - 1))

    return -(dist_term + angle_term).sum() * (1.0 / n)


def combine_losses(ce, mse, cov, adv, alpha: float, beta: float):
    """Weighted total; zero weights contribute nothing, bit-for-bit."""
    total = ce
    if alpha != 0.0:
        total = total + alpha * (mse + cov)
    if beta != 0.0:
        total = total + beta * adv
    return total


def ran_loss(
    logits, labels, F, Z, centroids, cfg: RanConfig
) -> tuple[Tensor, dict[str, float]]:
    """Combined objective plus the per-component breakdown.

    The margin term sees row-normalized Z: centroids are unit vectors and
    the angle term is spherical, so the feature side must live on the
    sphere too - otherwise maximizing ||z - c_j|| just inflates ||z||
    without bound.
    """
    ce = cross_entropy(logits, labels)
    mse = mse_consistency(F, Z)
    cov = cov_loss(Z)
    adv = adv_loss(_normalize_rows(ad.as_tensor(Z), "Z"), labels, centroids)
    total = combine_losses(ce, mse, cov, adv, cfg.alpha, cfg.beta)
    components = {
        "ce": ce.item(),
        "mse": mse.item(),
        "cov": cov.item(),
        "adv": adv.item(),
        "total": total.item(),
    }
    return total, components


# -- heads -------------------------------------------------------------------------


@dataclass
class TrainedHead:
    mode: Mode
    params: dict[str, np.ndarray]
    feature_dim: int
    n_classes: int
    centroids: ClassCentroids | None = None
    log: list[dict] = field(default_factory=list)

    def head_checksum(self) -> str:
        """Checksum over head weights only (centroids excluded)."""
        payload = b"".join(
            name.encode() + np.asarray(v).tobytes()
            for name, v in sorted(self.params.items())
            if name != "centroids"
        )
        return sha256_hex(payload)


def _init_head(
    mode: Mode, d: int, k: int, hidden: int, seed: int
) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 10]))
    params: dict[str, np.ndarray] = {}
    if mode is Mode.LINEAR_PROBE:
        params["cls_w"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, k))
        params["cls_b"] = np.zeros(k)
        return params
    params["mlp_w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden))
    params["mlp_b1"] = np.zeros(hidden)
    params["mlp_w2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, d))
    params["mlp_b2"] = np.zeros(d)
    params["cls_w"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, k))
    params["cls_b"] = np.zeros(k)
    return params


def _transform(tensors: dict[str, Tensor], F: Tensor) -> Tensor:
    hidden = (F @ tensors["mlp_w1"] + tensors["mlp_b1"]).softplus()
    return hidden @ tensors["mlp_w2"] + tensors["mlp_b2"]


def transform_features(head: TrainedHead, features: np.ndarray) -> np.ndarray:
    """Z = MLP(F) for trained mlp/ran heads; identity for linear probes."""
    if head.mode is Mode.LINEAR_PROBE:
        return np.asarray(features, dtype=np.float64)
    tensors = {k: Tensor(v) for k, v in head.params.items()}
    return _transform(tensors, Tensor(features)).data


def predict_logits(head: TrainedHead, features: np.ndarray) -> np.ndarray:
    z = transform_features(head, features)
    return z @ head.params["cls_w"] + head.params["cls_b"]


def accuracy(head: TrainedHead, features: np.ndarray, labels: np.ndarray) -> float:
    preds = predict_logits(head, features).argmax(axis=1)
    return float(np.mean(preds == np.asarray(labels)))


def encoder_features(
    params: DualEncoderParams, corpus, normalize: bool = True
) -> FeatureBatch:
    """Frozen image-tower outputs for every record of a task corpus.

    Rows are unit-normalized by default, the usual probing convention
    for contrastively trained encoders.
    """
    records = list(getattr(corpus, "records", corpus))
    if not records:
        raise ContractViolationError("empty task corpus")
    pixels = np.stack([r.image.pixels for r in records])
    out = image_forward(params.as_tensors(), Tensor(pixels)).data
    if normalize:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if np.any(norms <= 0.0):
            raise DegenerateEmbeddingError("zero-norm feature row")
        out = out / norms
    labels = [r.label for r in records]
    if any(l is None for l in labels):
        return FeatureBatch(features=out, labels=None)
    return FeatureBatch(features=out, labels=np.asarray(labels, dtype=np.int64))


def fine_tune(source, task=None, cfg: RanConfig = RanConfig()) -> TrainedHead:
    """Train a head on frozen features (or an encoder plus task corpus).

    Modes: linear probe (affine on F, CE only), MLP tuning (MLP + CE),
    and the rectifying mode (MLP + CE + weighted regularizers with
    learnable unit-norm centroids).  Deterministic under cfg.seed; with
    alpha = beta = 0 the rectifying mode follows the MLP trajectory
    bit for bit.
    """
    if isinstance(source, FeatureBatch):
        batch = source
    elif isinstance(source, DualEncoderParams):
        if task is None:
            raise ContractViolationError("encoder source needs a task corpus")
        batch = encoder_features(source, task)
    else:
        raise ContractViolationError(
            f"source must be FeatureBatch or DualEncoderParams, got {type(source).__name__}"
        )
    if batch.labels is None:
        raise ContractViolationError("fine-tuning needs labeled features")
    F_data = batch.features
    labels = batch.labels
    n, d = F_data.shape
    k = int(labels.max()) + 1
    if k < 2:
        raise ContractViolationError("need at least two classes")

    params = _init_head(cfg.mode, d, k, cfg.hidden_multiplier * d, cfg.seed)
    if cfg.mode is Mode.RAN:
        init_tensors = {name: Tensor(v) for name, v in params.items()}
        z0 = _transform(init_tensors, Tensor(F_data)).data
        params["centroids"] = ClassCentroids.from_features(z0, labels, k).matrix

    opt_cfg = OptimizerConfig(
        learning_rate=cfg.learning_rate,
        warmup_steps=0,
        cosine_decay=False,
        epochs=cfg.epochs,
        batch_size=n,
    )
    adam = Adam(opt_cfg, total_steps=cfg.epochs)
    log: list[dict] = []
    F_const = Tensor(F_data)

    for epoch in range(cfg.epochs):
        tensors = {name: Tensor(v) for name, v in params.items()}
        if cfg.mode is Mode.LINEAR_PROBE:
            logits = F_const @ tensors["cls_w"] + tensors["cls_b"]
            total = cross_entropy(logits, labels)
            components = {"ce": total.item(), "total": total.item()}
        else:
            Z = _transform(tensors, F_const)
            logits = Z @ tensors["cls_w"] + tensors["cls_b"]
            if cfg.mode is Mode.MLP_TUNE:
                total = cross_entropy(logits, labels)
                components = {"ce": total.item(), "total": total.item()}
            else:
                total, components = ran_loss(
                    logits, labels, F_const, Z, tensors["centroids"], cfg
                )
        grads = grad(total, tensors.values())
        params = adam.step(params, {name: grads[t] for name, t in tensors.items()})
        if cfg.mode is Mode.RAN:
            c = params["centroids"]
            norms = np.linalg.norm(c, axis=1, keepdims=True)
            if np.any(norms <= 0.0):
                raise DegenerateEmbeddingError("centroid collapsed to zero")
            params["centroids"] = c / norms
        snapshot = TrainedHead(
            mode=cfg.mode, params=params, feature_dim=d, n_classes=k
        )
        log.append(
            {
                "epoch": epoch,
                "train_acc": accuracy(snapshot, F_data, labels),
                "head_sha": snapshot.head_checksum(),
                **components,
            }
        )

    centroids = (
        ClassCentroids(params["centroids"]) if cfg.mode is Mode.RAN else None
    )
    return TrainedHead(
        mode=cfg.mode,
        params=params,
        feature_dim=d,
        n_classes=k,
        centroids=centroids,
        log=log,
    )
