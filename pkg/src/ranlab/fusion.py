"""VQA as classification: co-attention fusion of image and question
tokens feeding an answer classifier.

Two cross-attention streams (text queries attending image keys/values
and the reverse), each single-head, mean-pooled and summed into one
fused vector.  The head on top mirrors the fine-tuning modes: linear,
MLP, or MLP with the rectifying regularizers applied to the fused
representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, cross_entropy, grad, stack
from .encoders import (
    CaptionSample,
    DualEncoderParams,
    ImageSample,
    image_token_features,
    text_token_features,
)
from .errors import ContractViolationError
from .finetune import (
    ClassCentroids,
    Mode,
    adv_loss,
    combine_losses,
    cov_loss,
    mse_consistency,
)
from .optim import Adam, OptimizerConfig

QUESTION_TEMPLATES = (
    "what finding is shown",
    "which finding appears",
)


@dataclass(frozen=True)
class AnswerVocabulary:
    """Ordered distinct answer strings; line index = class index."""

    answers: tuple[str, ...]

    def __post_init__(self):
        if len(self.answers) < 2:
            raise ContractViolationError("need at least two answers")
        if len(set(self.answers)) != len(self.answers):
            raise ContractViolationError("duplicate answers")

    def __len__(self) -> int:
        return len(self.answers)

    def index_of(self, answer: str) -> int:
        try:
            return self.answers.index(answer)
        except ValueError:
            raise ContractViolationError(f"unknown answer {answer!r}") from None

    @staticmethod
    def load(path) -> "AnswerVocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = [line.strip() for line in fh if line.strip()]
        return AnswerVocabulary(tuple(lines))

    def save(self, path) -> None:
        from .fileio import atomic_write_text

        atomic_write_text(path, "\n".join(self.answers) + "\n")


@dataclass(frozen=True)
class QuestionSample:
    image: ImageSample
    question: CaptionSample
    answer: int

    def __post_init__(self):
        if self.answer < 0:
            raise ContractViolationError("answer index must be >= 0")


# -- fusion operations -----------------------------------------------------------


def fuse_concat(f_v, f_q) -> Tensor:
    """(image, text) concatenation: two D-vectors -> one 2D-vector."""
    f_v = ad.as_tensor(f_v)
    f_q = ad.as_tensor(f_q)
    if f_v.ndim != 1 or f_v.shape != f_q.shape:
        raise ContractViolationError(
            f"expected matching D-vectors, got {f_v.shape} and {f_q.shape}"
        )
    return ad.concat([f_v, f_q], axis=0)


@dataclass(frozen=True)
class CoAttentionBlock:
    """Single-head q/k/v/output projections for both directions."""

    arrays: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.arrays["t2i_q"].shape[0]

    def as_tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(v) for name, v in self.arrays.items()}


_BLOCK_KEYS = (
    "t2i_q", "t2i_k", "t2i_v", "t2i_o",
    "i2t_q", "i2t_k", "i2t_v", "i2t_o",
)


def init_coattention(dim: int, seed: int) -> CoAttentionBlock:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 11]))
    scale = 1.0 / np.sqrt(dim)
    return CoAttentionBlock(
        arrays={k: rng.normal(0.0, scale, size=(dim, dim)) for k in _BLOCK_KEYS}
    )


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    logits = (q @ k.T) * scale
    weights = ad.softmax(logits, axis=1)
    return weights @ v, weights


def fuse_coattention(
    image_tokens, text_tokens, block: CoAttentionBlock | dict[str, Tensor]
) -> Tensor:
    """Bidirectional single-head cross-attention, pooled to one D-vector."""
    fused, _ = fuse_coattention_with_weights(image_tokens, text_tokens, block)
    return fused


def fuse_coattention_with_weights(
    image_tokens, text_tokens, block: CoAttentionBlock | dict[str, Tensor]
) -> tuple[Tensor, dict[str, np.ndarray]]:
    """As `fuse_coattention`, additionally returning the attention maps."""
    img = ad.as_tensor(image_tokens)
    txt = ad.as_tensor(text_tokens)
    if img.ndim != 2 or txt.ndim != 2:
        raise ContractViolationError("token inputs must be (count, D) matrices")
    if img.shape[0] < 1 or txt.shape[0] < 1:
        raise ContractViolationError("empty token sequence")
    if img.shape[1] != txt.shape[1]:
        raise ContractViolationError(
            f"token dims differ: {img.shape[1]} vs {txt.shape[1]}"
        )
    t = block.as_tensors() if isinstance(block, CoAttentionBlock) else block
    d = img.shape[1]
    scale = 1.0 / np.sqrt(d)
    attended_txt, w_t2i = _attend(
        txt @ t["t2i_q"], img @ t["t2i_k"], img @ t["t2i_v"], scale
    )
    attended_img, w_i2t = _attend(
        img @ t["i2t_q"], txt @ t["i2t_k"], txt @ t["i2t_v"], scale
    )
    pooled_txt = (attended_txt @ t["t2i_o"]).mean(axis=0)
    pooled_img = (attended_img @ t["i2t_o"]).mean(axis=0)
    return pooled_txt + pooled_img, {
        "text_to_image": w_t2i.data,
        "image_to_text": w_i2t.data,
    }


@dataclass(frozen=True)
class AnswerClassifier:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ContractViolationError("classifier must be (D, |A|) plus bias")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


def vqa_classify(fused, classifier: AnswerClassifier) -> np.ndarray:
    """Scores over the answer set; argmax (ties to the lower index) predicts."""
    vec = fused.data if isinstance(fused, Tensor) else np.asarray(fused)
    if vec.shape != (classifier.weights.shape[0],):
        raise ContractViolationError(
            f"fused dim {vec.shape} does not match classifier "
            f"{classifier.weights.shape}"
        )
    return vec @ classifier.weights + classifier.bias


# -- VQA corpus + training ----------------------------------------------------------


def vqa_from_corpus(corpus, seed: int = 0) -> tuple[list[QuestionSample], AnswerVocabulary]:
    """Recast a labeled corpus as closed-ended VQA: answer = class keyword."""
    records = list(getattr(corpus, "records", corpus))
    header = corpus.header
    answers = AnswerVocabulary(tuple(header.class_names))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 12]))
    samples = []
    for record in records:
        if record.label is None:
            raise ContractViolationError(
                f"record {record.image.id!r} has no label"
            )
        question = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
        tokens, truncated = header.vocab.encode(question, max_len=16)
        samples.append(
            QuestionSample(
                image=record.image,
                question=CaptionSample(
                    tokens=tokens, raw_text=question, truncated=truncated
                ),
                answer=record.label,
            )
        )
    return samples, answers


@dataclass(frozen=True)
class VqaTrainConfig:
    mode: Mode = Mode.MLP_TUNE
    alpha: float = 0.01
    beta: float = 0.015
    fusion_dim: int = 32
    learning_rate: float = 5e-3
    epochs: int = 120
    seed: int = 0
    hidden_multiplier: int = 2


@dataclass
class VqaModel:
    config: VqaTrainConfig
    params: dict[str, np.ndarray]
    n_answers: int
    log: list[dict] = field(default_factory=list)

    def classifier(self) -> AnswerClassifier:
        return AnswerClassifier(self.params["cls_w"], self.params["cls_b"])


def _vqa_init(
    encoder: DualEncoderParams, cfg: VqaTrainConfig, n_answers: int
) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[cfg.seed, 13]))
    c2 = encoder.config.conv_channels[1]
    e = encoder.config.token_dim
    d = cfg.fusion_dim

    def dense(fan_in, *shape):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    params = {
        "proj_img": dense(c2, c2, d),
        "proj_txt": dense(e, e, d),
    }
    for key in _BLOCK_KEYS:
        params[key] = dense(d, d, d)
    if cfg.mode is not Mode.LINEAR_PROBE:
        hidden = cfg.hidden_multiplier * d
        params["mlp_w1"] = dense(d, d, hidden)
        params["mlp_b1"] = np.zeros(hidden)
        params["mlp_w2"] = dense(hidden, hidden, d)
        params["mlp_b2"] = np.zeros(d)
    params["cls_w"] = dense(d, d, n_answers)
    params["cls_b"] = np.zeros(n_answers)
    return params


def train_vqa(
    encoder: DualEncoderParams,
    samples: list[QuestionSample],
    answers: AnswerVocabulary,
    cfg: VqaTrainConfig = VqaTrainConfig(),
) -> VqaModel:
    """Train projections + co-attention + answer head on frozen encoder tokens."""
    if not samples:
        raise ContractViolationError("empty VQA corpus")
    n_answers = len(answers)
    if any(s.answer >= n_answers for s in samples):
        raise ContractViolationError("answer index outside the vocabulary")
    enc_tensors = {
        name: Tensor(v) for name, v in encoder.arrays.items()
    }
    # frozen token features, computed once
    pixels = np.stack([s.image.pixels for s in samples])
    img_tokens_all = image_token_features(enc_tensors, Tensor(pixels)).data
    txt_tokens_all = [
        text_token_features(enc_tensors, encoder.config, s.question.tokens).data
        for s in samples
    ]
    labels = np.asarray([s.answer for s in samples], dtype=np.int64)

    params = _vqa_init(encoder, cfg, n_answers)
    n = len(samples)
    opt_cfg = OptimizerConfig(
        learning_rate=cfg.learning_rate,
        warmup_steps=0,
        cosine_decay=False,
        epochs=cfg.epochs,
        batch_size=n,
    )
    adam = Adam(opt_cfg, total_steps=cfg.epochs)
    log: list[dict] = []

    def fused_batch(tensors: dict[str, Tensor]) -> Tensor:
        rows = []
        for i in range(n):
            img = Tensor(img_tokens_all[i]) @ tensors["proj_img"]
            txt = Tensor(txt_tokens_all[i]) @ tensors["proj_txt"]
            rows.append(fuse_coattention(img, txt, tensors))
        return stack(rows)

    centroids_init = False
    for epoch in range(cfg.epochs):
        tensors = {name: Tensor(v) for name, v in params.items()}
        fused = fused_batch(tensors)
        if cfg.mode is Mode.LINEAR_PROBE:
            logits = fused @ tensors["cls_w"] + tensors["cls_b"]
            total = cross_entropy(logits, labels)
            components = {"ce": total.item(), "total": total.item()}
        else:
            hidden = (fused @ tensors["mlp_w1"] + tensors["mlp_b1"]).softplus()
            z = hidden @ tensors["mlp_w2"] + tensors["mlp_b2"]
            logits = z @ tensors["cls_w"] + tensors["cls_b"]
            ce = cross_entropy(logits, labels)
            if cfg.mode is Mode.MLP_TUNE:
                total = ce
                components = {"ce": ce.item(), "total": total.item()}
            else:
                if not centroids_init:
                    params["centroids"] = ClassCentroids.from_features(
                        z.data, labels, n_answers
                    ).matrix
                    tensors["centroids"] = Tensor(params["centroids"])
                    centroids_init = True
                mse = mse_consistency(fused, z)
                cov = cov_loss(z)
                adv = adv_loss(z, labels, tensors["centroids"])
                total = combine_losses(ce, mse, cov, adv, cfg.alpha, cfg.beta)
                components = {
                    "ce": ce.item(),
                    "mse": mse.item(),
                    "cov": cov.item(),
                    "adv": adv.item(),
                    "total": total.item(),
                }
        grads = grad(total, tensors.values())
        params = adam.step(params, {name: grads[t] for name, t in tensors.items()})
        if "centroids" in params:
            norms = np.linalg.norm(params["centroids"], axis=1, keepdims=True)
            params["centroids"] = params["centroids"] / norms
        train_acc = float(np.mean(logits.data.argmax(axis=1) == labels))
        log.append({"epoch": epoch, "train_acc": train_acc, **components})

    return VqaModel(config=cfg, params=params, n_answers=n_answers, log=log)


def vqa_predict(
    model: VqaModel, encoder: DualEncoderParams, samples: list[QuestionSample]
) -> np.ndarray:
    """Predicted answer indices for a list of question samples."""
    enc_tensors = {name: Tensor(v) for name, v in encoder.arrays.items()}
    tensors = {name: Tensor(v) for name, v in model.params.items()}
    pixels = np.stack([s.image.pixels for s in samples])
    img_tokens_all = image_token_features(enc_tensors, Tensor(pixels)).data
    preds = []
    for i, sample in enumerate(samples):
        img = Tensor(img_tokens_all[i]) @ tensors["proj_img"]
        txt = (
            Tensor(
                text_token_features(
                    enc_tensors, encoder.config, sample.question.tokens
                ).data
            )
            @ tensors["proj_txt"]
        )
        fused = fuse_coattention(img, txt, tensors)
        if model.config.mode is not Mode.LINEAR_PROBE:
            hidden = (fused.reshape(1, -1) @ tensors["mlp_w1"] + tensors["mlp_b1"]).softplus()
            z = (hidden @ tensors["mlp_w2"] + tensors["mlp_b2"]).reshape((-1,))
        else:
            z = fused
        scores = vqa_classify(
            z, AnswerClassifier(model.params["cls_w"], model.params["cls_b"])
        )
        preds.append(int(scores.argmax()))
    return np.asarray(preds, dtype=np.int64)
