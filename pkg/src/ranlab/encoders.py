"""Toy dual encoder (image + text) with the contrastive InfoNCE objective.

The image tower is two non-overlapping strided patch convolutions plus an
affine head; the text tower is an embedding table with optional learned
positions, masked mean pooling, and a two-layer affine stack.  Both emit
d-dimensional vectors.  Deliberately tiny: what matters downstream is
that attacks and losses operate on a real differentiable encoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, cross_entropy, grad, take_rows
from .errors import (
    ContractViolationError,
    DegenerateEmbeddingError,
    NumericFailureError,
)
from .fileio import atomic_write_bytes, atomic_write_text, sha256_hex
from .optim import Adam, OptimizerConfig

_ZERO_NORM_EPS = 1e-12
_TAU_MIN, _TAU_MAX = 1e-3, 100.0


# -- samples -------------------------------------------------------------------


@dataclass(frozen=True)
class ImageSample:
    """H x W x C pixels in [0, 1] plus a stable id."""

    pixels: np.ndarray
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise ContractViolationError(
                f"image {self.id!r}: pixels must be H x W x C, got {px.shape}"
            )
        if not np.all(np.isfinite(px)):
            raise NumericFailureError(f"image {self.id!r}: non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ContractViolationError(
                f"image {self.id!r}: pixels outside [0, 1]"
            )
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class CaptionSample:
    """Token ids plus the raw text they came from."""

    tokens: tuple[int, ...]
    raw_text: str
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if any(t < 0 for t in self.tokens):
            raise ContractViolationError("negative token id")


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)
        if self.normalized:
            norm = float(np.linalg.norm(v))
            if abs(norm - 1.0) > 1e-9:
                raise ContractViolationError(
                    f"normalized embedding has norm {norm!r}"
                )


# -- parameters ----------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    image_shape: tuple[int, int, int] = (16, 16, 1)
    vocab_size: int = 64
    d: int = 32
    patch: int = 2
    conv_channels: tuple[int, int] = (8, 16)
    token_dim: int = 16
    text_hidden: int = 32
    max_tokens: int = 16
    positional: bool = True

    def __post_init__(self):
        h, w, _ = self.image_shape
        p = self.patch
        if h % (p * p) or w % (p * p):
            raise ContractViolationError(
                "image height/width must be divisible by patch size twice"
            )
        if self.vocab_size < 2 or self.d < 1 or self.max_tokens < 1:
            raise ContractViolationError("degenerate encoder config")


@dataclass(frozen=True)
class DualEncoderParams:
    """All named weight arrays plus the temperature, stored as log tau."""

    config: EncoderConfig
    arrays: dict[str, np.ndarray]

    @property
    def tau(self) -> float:
        return float(np.exp(self.arrays["log_tau"]))

    def as_tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(v) for name, v in self.arrays.items()}

    def checksum(self) -> str:
        payload = b"".join(
            name.encode() + np.ascontiguousarray(v).tobytes()
            for name, v in self.arrays.items()
        )
        return sha256_hex(payload)


def init_dual_encoder(config: EncoderConfig, seed: int) -> DualEncoderParams:
    """Seeded initialization; biases start at zero so zero inputs map to 0.

    The temperature starts at 0.07 (the CLIP default): the contrastive
    logits here are sim/tau, so 0.07 plays the role CLIP's logit-scale
    multiplier exp(log(1/0.07)) plays on the other side of the division.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0]))
    h, w, c = config.image_shape
    p = config.patch
    c1, c2 = config.conv_channels
    flat = (h // (p * p)) * (w // (p * p)) * c2
    e, hid, d = config.token_dim, config.text_hidden, config.d

    def dense(fan_in: int, *shape: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    arrays = {
        "img_stage1_w": dense(p * p * c, p * p * c, c1),
        "img_stage2_w": dense(p * p * c1, p * p * c1, c2),
        "img_head_w": dense(flat, flat, d),
        "img_head_b": np.zeros(d),
        "txt_embed": dense(e, config.vocab_size, e),
        "txt_pos": dense(e, config.max_tokens, e),
        "txt_hidden_w": dense(e, e, hid),
        "txt_hidden_b": np.zeros(hid),
        "txt_head_w": dense(hid, hid, d),
        "txt_head_b": np.zeros(d),
        "log_tau": np.array(np.log(0.07)),
    }
    return DualEncoderParams(config=config, arrays=arrays)


# -- differentiable forwards -----------------------------------------------------


def _patchify(x: Tensor, p: int) -> Tensor:
    """(n, H, W, C) -> (n, H/p, W/p, p*p*C) for non-overlapping p x p patches."""
    n, h, w, c = x.shape
    x = x.reshape(n, h // p, p, w // p, p, c)
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape(n, h // p, w // p, p * p * c)


def image_forward(tensors: dict[str, Tensor], pixels: Tensor) -> Tensor:
    """Batched image tower: (n, H, W, C) pixels -> (n, d) embeddings."""
    n = pixels.shape[0]
    p_sz = int(np.sqrt(tensors["img_stage1_w"].shape[0] // pixels.shape[3]))
    x = _patchify(pixels, p_sz)
    gh, gw, pc = x.shape[1], x.shape[2], x.shape[3]
    x = x.reshape(n * gh * gw, pc) @ tensors["img_stage1_w"]
    x = x.tanh().reshape(n, gh, gw, x.shape[1])
    x = _patchify(x, p_sz)
    gh2, gw2, pc2 = x.shape[1], x.shape[2], x.shape[3]
    x = x.reshape(n * gh2 * gw2, pc2) @ tensors["img_stage2_w"]
    x = x.tanh().reshape(n, gh2 * gw2 * x.shape[1])
    return x @ tensors["img_head_w"] + tensors["img_head_b"]


def image_token_features(tensors: dict[str, Tensor], pixels: Tensor) -> Tensor:
    """Patch-level features after stage 2: (n, tokens, c2)."""
    n = pixels.shape[0]
    p_sz = int(np.sqrt(tensors["img_stage1_w"].shape[0] // pixels.shape[3]))
    x = _patchify(pixels, p_sz)
    gh, gw, pc = x.shape[1], x.shape[2], x.shape[3]
    x = (x.reshape(n * gh * gw, pc) @ tensors["img_stage1_w"]).tanh()
    x = x.reshape(n, gh, gw, x.shape[1])
    x = _patchify(x, p_sz)
    gh2, gw2, pc2 = x.shape[1], x.shape[2], x.shape[3]
    x = (x.reshape(n * gh2 * gw2, pc2) @ tensors["img_stage2_w"]).tanh()
    return x.reshape(n, gh2 * gw2, x.shape[1])


def _pad_token_batch(
    config: EncoderConfig, token_lists: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad to a common length; empty captions become a single pad token."""
    rows = []
    for tokens in token_lists:
        toks = [int(t) for t in tokens]
        if any(t < 0 or t >= config.vocab_size for t in toks):
            raise ContractViolationError(
                f"token id outside [0, {config.vocab_size})"
            )
        if len(toks) > config.max_tokens:
            raise ContractViolationError(
                f"caption longer than max_tokens={config.max_tokens}"
            )
        rows.append(toks or [0])
    width = max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width, 1))
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r), 0] = 1.0
    lengths = mask.sum(axis=1)
    return ids, mask, lengths


def text_forward(
    tensors: dict[str, Tensor],
    config: EncoderConfig,
    token_lists: Sequence[Sequence[int]],
) -> Tensor:
    """Batched text tower: token id lists -> (n, d) embeddings."""
    ids, mask, lengths = _pad_token_batch(config, token_lists)
    emb = take_rows(tensors["txt_embed"], ids)
    if config.positional:
        # multiplicative gate: additive positions would cancel under mean pooling
        positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        emb = emb * (take_rows(tensors["txt_pos"], positions) + 1.0)
    pooled = (emb * Tensor(mask)).sum(axis=1) / Tensor(lengths)
    hidden = (pooled @ tensors["txt_hidden_w"] + tensors["txt_hidden_b"]).tanh()
    return hidden @ tensors["txt_head_w"] + tensors["txt_head_b"]


def text_token_features(
    tensors: dict[str, Tensor],
    config: EncoderConfig,
    tokens: Sequence[int],
) -> Tensor:
    """Per-token embedding rows (with positions when enabled): (L, e)."""
    ids, _, _ = _pad_token_batch(config, [tokens])
    emb = take_rows(tensors["txt_embed"], ids[0])
    if config.positional:
        emb = emb * (take_rows(tensors["txt_pos"], np.arange(ids.shape[1])) + 1.0)
    return emb


def l2_normalize_rows(t: Tensor) -> Tensor:
    """Unit-normalize each row; zero rows are an error, never NaN."""
    norms_sq = (t * t).sum(axis=t.ndim - 1, keepdims=True)
    if np.any(norms_sq.data < _ZERO_NORM_EPS**2):
        raise DegenerateEmbeddingError("zero-norm row cannot be normalized")
    return t / norms_sq.sqrt()


# -- public encoding -------------------------------------------------------------


def _check_image(params: DualEncoderParams, pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    if px.shape != params.config.image_shape:
        raise ContractViolationError(
            f"pixel shape {px.shape} != corpus shape {params.config.image_shape}"
        )
    return px


def encode_image(params: DualEncoderParams, pixels) -> Embedding:
    """Deterministic d-dim embedding of one image (unnormalized)."""
    if isinstance(pixels, ImageSample):
        pixels = pixels.pixels
    px = _check_image(params, pixels)
    out = image_forward(params.as_tensors(), Tensor(px[np.newaxis]))
    return Embedding(out.data[0], normalized=False)


def encode_text(params: DualEncoderParams, tokens) -> Embedding:
    """Deterministic d-dim embedding of one caption (unnormalized)."""
    if isinstance(tokens, CaptionSample):
        tokens = tokens.tokens
    out = text_forward(params.as_tensors(), params.config, [tokens])
    return Embedding(out.data[0], normalized=False)


def normalize(v: Embedding) -> Embedding:
    """Unit vector with the same direction."""
    norm = float(np.linalg.norm(v.vector))
    if norm < _ZERO_NORM_EPS:
        raise DegenerateEmbeddingError("cannot normalize a zero embedding")
    return Embedding(v.vector / norm, normalized=True)


# -- contrastive loss -------------------------------------------------------------


def clip_loss(image_embeddings, text_embeddings, tau) -> Tensor:
    """Symmetric InfoNCE over a batch of matched, unit-normalized rows.

    Row i of each side is the positive pair; logits are cosine
    similarities divided by the temperature.  Returns the mean of the
    image-to-text and text-to-image terms, halved.
    """
    u = ad.as_tensor(image_embeddings)
    v = ad.as_tensor(text_embeddings)
    if u.ndim != 2 or u.shape != v.shape:
        raise ContractViolationError(
            f"embedding batches must match: {u.shape} vs {v.shape}"
        )
    for name, t in (("image", u), ("text", v)):
        norms = np.linalg.norm(t.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractViolationError(
                f"{name} embeddings must be unit-normalized rows"
            )
    n = u.shape[0]
    if n < 1:
        raise ContractViolationError("empty batch")
    logits = (u @ v.T) / ad.as_tensor(tau)
    labels = np.arange(n)
    return (cross_entropy(logits, labels) + cross_entropy(logits.T, labels)) * 0.5


# -- pre-training ------------------------------------------------------------------


@dataclass
class PretrainLog:
    """Per-epoch loss curve plus matched-pair cosine means."""

    epochs: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def _records_of(corpus) -> list:
    return list(getattr(corpus, "records", corpus))


def pretrain(
    corpus,
    optimizer_config: OptimizerConfig | None = None,
    seed: int = 0,
    config: EncoderConfig | None = None,
    init: DualEncoderParams | None = None,
) -> tuple[DualEncoderParams, PretrainLog]:
    """Contrastive pre-training; identical inputs give identical params.

    `corpus` is anything with image/caption records.  When `config` is
    omitted it is read from the corpus header.
    """
    records = _records_of(corpus)
    if not records:
        raise ContractViolationError("cannot pretrain on an empty corpus")
    cfg = optimizer_config or OptimizerConfig()
    if cfg.batch_size > len(records):
        raise ContractViolationError(
            f"batch size {cfg.batch_size} exceeds corpus size {len(records)}"
        )
    if init is not None:
        params = init
    else:
        if config is None:
            header = getattr(corpus, "header", None)
            if header is None:
                raise ContractViolationError(
                    "need an EncoderConfig or a corpus with a header"
                )
            config = EncoderConfig(
                image_shape=header.image_shape, vocab_size=header.vocab.size
            )
        params = init_dual_encoder(config, seed)
    enc_cfg = params.config

    pixels = np.stack([r.image.pixels for r in records])
    token_lists = [r.caption.tokens for r in records]
    arrays = dict(params.arrays)

    n = len(records)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    adam = Adam(cfg, total_steps=cfg.epochs * batches_per_epoch)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 1]))
    log = PretrainLog()

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        epoch_cosines = []
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            try:
                tensors = {name: Tensor(v) for name, v in arrays.items()}
                u = l2_normalize_rows(
                    image_forward(tensors, Tensor(pixels[idx]))
                )
                v = l2_normalize_rows(
                    text_forward(tensors, enc_cfg, [token_lists[i] for i in idx])
                )
                tau = tensors["log_tau"].exp()
                loss = clip_loss(u, v, tau)
                grads = grad(loss, tensors.values())
            except NumericFailureError as err:
                raise NumericFailureError(
                    f"pretraining failed at epoch {epoch} batch {b}: {err}"
                ) from err
            arrays = adam.step(
                arrays, {name: grads[t] for name, t in tensors.items()}
            )
            arrays["log_tau"] = np.clip(
                arrays["log_tau"], np.log(_TAU_MIN), np.log(_TAU_MAX)
            )
            epoch_losses.append(loss.item())
            epoch_cosines.append(float(np.mean(np.sum(u.data * v.data, axis=1))))
        log.epochs.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)),
                "matched_cosine": float(np.mean(epoch_cosines)),
            }
        )
    return replace(params, arrays=arrays), log


# -- checkpoints --------------------------------------------------------------------

_MAGIC = b"RLDE"
_VERSION = 1


def save_checkpoint(
    params: DualEncoderParams,
    path: str | Path,
    manifest: dict | None = None,
) -> None:
    """Self-describing binary: header + layer table + little-endian f8 payload.

    A sidecar `<path>.json` carries the run manifest (seed, config hash,
    loss curve) when given.
    """
    header = bytearray()
    header += _MAGIC
    header += struct.pack("<II", _VERSION, params.config.d)
    meta = json.dumps(
        {
            "image_shape": list(params.config.image_shape),
            "vocab_size": params.config.vocab_size,
            "d": params.config.d,
            "patch": params.config.patch,
            "conv_channels": list(params.config.conv_channels),
            "token_dim": params.config.token_dim,
            "text_hidden": params.config.text_hidden,
            "max_tokens": params.config.max_tokens,
            "positional": params.config.positional,
        },
        sort_keys=True,
    ).encode("utf-8")
    header += struct.pack("<I", len(meta)) + meta
    header += struct.pack("<I", len(params.arrays))
    payload = bytearray()
    for name, value in params.arrays.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() emits C order
        encoded = name.encode("utf-8")
        header += struct.pack("<H", len(encoded)) + encoded
        header += struct.pack("<B", arr.ndim)
        header += struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape)
        header += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    atomic_write_bytes(path, bytes(header) + bytes(payload))
    if manifest is not None:
        atomic_write_text(
            str(path) + ".json", json.dumps(manifest, indent=2, sort_keys=True)
        )


def load_checkpoint(path: str | Path) -> DualEncoderParams:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ContractViolationError(f"{path}: not a checkpoint file")
    off = 4
    version, d = struct.unpack_from("<II", blob, off)
    off += 8
    if version != _VERSION:
        raise ContractViolationError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        (offset,) = struct.unpack_from("<Q", blob, off)
        off += 8
        table.append((name, shape, offset))
    payload = blob[off:]
    arrays = {}
    for name, shape, offset in table:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f8", count=size, offset=offset
        ).astype(np.float64)
        arrays[name] = arr.reshape(shape)
    config = EncoderConfig(
        image_shape=tuple(meta["image_shape"]),
        vocab_size=meta["vocab_size"],
        d=meta["d"],
        patch=meta["patch"],
        conv_channels=tuple(meta["conv_channels"]),
        token_dim=meta["token_dim"],
        text_hidden=meta["text_hidden"],
        max_tokens=meta["max_tokens"],
        positional=meta["positional"],
    )
    if config.d != d:
        raise ContractViolationError("checkpoint header d mismatch")
    return DualEncoderParams(config=config, arrays=arrays)
