"""Synthetic image-caption corpora and seeded noisy-corpus crafting.

Two procedural families ("domain-a", "domain-b") render class-dependent
patterns with shifted statistics, giving clean/target pools plus ID/OOD
task splits.  Captions follow a small grammar whose keywords carry the
class, so caption attacks provably flip semantics.

`craft` perturbs a seeded random subset of a clean corpus (exactly
floor(gamma * N) records) with one of the attackers and emits a
manifest: which indices changed, how, and the corpus checksums.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .caption_attack import Objective, SwapDictionary, perturb_random, perturb_rule_based
from .encoders import CaptionSample, DualEncoderParams, ImageSample
from .errors import ContractViolationError
from .fileio import atomic_write_bytes, sha256_hex
from .image_attack import AttackConfig, pgd_attack
from .text import Vocabulary

SITES = ("chest", "abdomen", "head", "pelvis")
VIEWS = ("radiograph", "scan", "image")
SEVERITIES = ("mild", "severe")
LATERALITIES = ("left", "right")
DEFAULT_CLASSES = ("normal", "fracture", "effusion", "nodule")
_EXTRA_CLASSES = ("edema", "mass")

_GRAMMAR_WORDS = VIEWS + ("of", "the") + LATERALITIES + SITES + ("shows", "no") + SEVERITIES
_QUESTION_WORDS = ("what", "which", "finding", "is", "shown", "appears")


class Provenance(str, Enum):
    CLEAN = "clean"
    IMAGE_ADV = "image_adv"
    CAPTION_ADV = "caption_adv"
    RANDOM_NOISE = "random_noise"


class NoiseKind(str, Enum):
    IMAGE_ADV = "image_adv"
    CAPTION_ADV = "caption_adv"
    RANDOM_NOISE = "random_noise"


@dataclass(frozen=True)
class CorpusHeader:
    image_shape: tuple[int, int, int]
    vocab: Vocabulary
    class_names: tuple[str, ...]
    family: str

    @property
    def k(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class CorpusRecord:
    image: ImageSample
    caption: CaptionSample
    label: int | None
    provenance: Provenance
    source_id: str

    def __post_init__(self):
        if self.label is not None and self.label < 0:
            raise ContractViolationError("label must be >= 0 or None")


@dataclass(frozen=True)
class Corpus:
    header: CorpusHeader
    records: tuple[CorpusRecord, ...]

    def __post_init__(self):
        k = self.header.k
        for r in self.records:
            if r.label is not None and r.label >= k:
                raise ContractViolationError(
                    f"label {r.label} outside [0, {k})"
                )

    def __len__(self) -> int:
        return len(self.records)

    def checksum(self) -> str:
        return sha256_hex(serialize_corpus(self))


# -- caption grammar ---------------------------------------------------------------


@dataclass(frozen=True)
class CaptionSemantics:
    """What a grammar-shaped caption asserts about its image."""

    positive: bool
    finding: str | None
    site: str | None
    laterality: str | None
    severity: str | None

    def implied_label(self, class_names: Sequence[str]) -> int | None:
        if not self.positive or self.finding is None:
            return 0 if class_names and class_names[0] == "normal" else None
        try:
            return list(class_names).index(self.finding)
        except ValueError:
            return None


def caption_semantics(text: str, class_names: Sequence[str]) -> CaptionSemantics:
    words = text.lower().split()
    findings = [c for c in class_names if c != "normal"]
    finding = next((w for w in words if w in findings), None)
    negated = finding is not None and "no" in words[: words.index(finding)]
    return CaptionSemantics(
        positive=finding is not None and not negated,
        finding=finding,
        site=next((w for w in words if w in SITES), None),
        laterality=next((w for w in words if w in LATERALITIES), None),
        severity=next((w for w in words if w in SEVERITIES), None),
    )


# -- synthetic generation -------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 64
    k: int = 4
    image_shape: tuple[int, int, int] = (16, 16, 1)
    family: str = "domain-a"
    background: float = 0.35
    domain_shift: float = 0.08
    noise_sigma: float = 0.02
    amp_mild: float = 0.22
    amp_severe: float = 0.32
    laterality_prob: float = 0.5
    site_marker: float = 0.25
    n_views: int = 2

    def __post_init__(self):
        if self.k < 2:
            raise ContractViolationError("need at least two classes")
        if self.n < self.k:
            raise ContractViolationError("need at least one record per class")
        if self.k > len(DEFAULT_CLASSES) + len(_EXTRA_CLASSES):
            raise ContractViolationError(
                f"at most {len(DEFAULT_CLASSES) + len(_EXTRA_CLASSES)} classes"
            )
        if self.family not in ("domain-a", "domain-b"):
            raise ContractViolationError("family must be domain-a or domain-b")
        if not 1 <= self.n_views <= len(VIEWS):
            raise ContractViolationError(f"n_views must be in [1, {len(VIEWS)}]")


def class_names_for(k: int) -> tuple[str, ...]:
    return (DEFAULT_CLASSES + _EXTRA_CLASSES)[:k]


def corpus_vocabulary(k: int = 4) -> Vocabulary:
    """Fixed word-level vocabulary covering the grammar and class names."""
    words: dict[str, None] = {}
    for w in _GRAMMAR_WORDS + class_names_for(max(k, len(DEFAULT_CLASSES))):
        words.setdefault(w, None)
    for w in _EXTRA_CLASSES + _QUESTION_WORDS:
        words.setdefault(w, None)
    return Vocabulary(tuple(words))


def _render_pattern(
    cls: str, amp: float, rng: np.random.Generator, h: int, w: int
) -> np.ndarray:
    canvas = np.zeros((h, w))
    if cls == "normal":
        return canvas
    if cls == "fracture":
        offset = int(rng.integers(-h // 4, h // 4 + 1))
        for i in range(h):
            j = (i + offset) % w
            canvas[i, j] = amp
            canvas[i, (j + 1) % w] = amp * 0.7
    elif cls == "effusion":
        depth = int(rng.integers(h // 3, h // 2 + 1))
        canvas[h - depth :, :] = amp
    elif cls == "nodule":
        cy = int(rng.integers(5, h - 5))
        cx = int(rng.integers(5, w - 5))
        radius = float(rng.uniform(2.8, 3.6))
        yy, xx = np.mgrid[0:h, 0:w]
        canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = amp
    elif cls == "edema":
        depth = int(rng.integers(h // 4, h // 2 + 1))
        canvas[:depth, :] = amp * np.linspace(1.0, 0.2, depth)[:, None]
    elif cls == "mass":
        size = int(rng.integers(4, 7))
        top = int(rng.integers(0, h - size))
        left = int(rng.integers(0, w - size))
        canvas[top : top + size, left : left + size] = amp
    else:
        raise ContractViolationError(f"no pattern for class {cls!r}")
    return canvas


_SITE_CORNERS = {"chest": (0, 0), "abdomen": (0, 1), "head": (1, 0), "pelvis": (1, 1)}


def synth_corpus(config: GeneratorConfig, seed: int) -> Corpus:
    """Procedural clean corpus; balanced classes by construction.

    The caption's site word is grounded by a corner marker in the image,
    so image and text genuinely share everything but view/laterality.
    """
    h, w, c = config.image_shape
    names = class_names_for(config.k)
    vocab = corpus_vocabulary(config.k)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 7]))
    background = config.background + (
        config.domain_shift if config.family == "domain-b" else 0.0
    )
    records = []
    for i in range(config.n):
        label = i % config.k
        cls = names[label]
        view = VIEWS[int(rng.integers(config.n_views))]
        site = SITES[int(rng.integers(len(SITES)))]
        lat = (
            LATERALITIES[int(rng.integers(2))]
            if rng.random() < config.laterality_prob
            else None
        )
        if cls == "normal":
            mentioned = names[1 + int(rng.integers(config.k - 1))]
            phrase = f"no {mentioned}"
            amp = 0.0
        else:
            severity = SEVERITIES[int(rng.integers(2))]
            amp = config.amp_severe if severity == "severe" else config.amp_mild
            phrase = f"{severity} {cls}"
        place = f"{lat} {site}" if lat else site
        text = f"{view} of the {place} shows {phrase}"
        pattern = _render_pattern(cls, amp, rng, h, w)
        pixels = background + pattern[:, :, None] * np.ones((1, 1, c))
        corner_r, corner_c = _SITE_CORNERS[site]
        r0 = 0 if corner_r == 0 else h - 3
        c0 = 0 if corner_c == 0 else w - 3
        pixels[r0 : r0 + 3, c0 : c0 + 3, :] += config.site_marker
        pixels = pixels + rng.normal(0.0, config.noise_sigma, size=(h, w, c))
        pixels = np.clip(pixels, 0.0, 1.0)
        tokens, truncated = vocab.encode(text, max_len=16)
        rid = f"{config.family}-{i:05d}"
        records.append(
            CorpusRecord(
                image=ImageSample(pixels=pixels, id=rid),
                caption=CaptionSample(
                    tokens=tokens, raw_text=text, truncated=truncated
                ),
                label=label,
                provenance=Provenance.CLEAN,
                source_id=rid,
            )
        )
    header = CorpusHeader(
        image_shape=config.image_shape,
        vocab=vocab,
        class_names=names,
        family=config.family,
    )
    return Corpus(header=header, records=tuple(records))


# -- attackers ---------------------------------------------------------------------


@dataclass(frozen=True)
class Attacker:
    """Applies one noise kind to a record; pure given the per-record seed."""

    kind: NoiseKind
    perturb: Callable[[CorpusRecord, int, CorpusHeader], tuple[CorpusRecord, dict]]


def image_attacker(
    encoder: DualEncoderParams, cfg: AttackConfig, target_pool: Corpus
) -> Attacker:
    """PGD-attack the image toward a seeded target from a disjoint pool."""
    targets = target_pool.records

    def perturb(record, seed, header):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 8]))
        target = targets[int(rng.integers(len(targets)))]
        result = pgd_attack(encoder, record.image.pixels, target.image.pixels, cfg)
        new_record = CorpusRecord(
            image=ImageSample(pixels=result.x_adv, id=record.image.id),
            caption=record.caption,
            label=record.label,
            provenance=Provenance.IMAGE_ADV,
            source_id=record.source_id,
        )
        meta = {
            "target_id": target.image.id,
            "converged_at": result.converged_at,
            "best_similarity": result.best_similarity,
        }
        return new_record, meta

    return Attacker(kind=NoiseKind.IMAGE_ADV, perturb=perturb)


def caption_attacker(
    dictionary: SwapDictionary | None = None,
    objective: Objective | str = Objective.OPPOSITE,
) -> Attacker:
    """Rule-based caption rewrite; the image is kept as-is."""
    dictionary = dictionary or SwapDictionary.default()
    objective = Objective(objective)

    def perturb(record, seed, header):
        result = perturb_rule_based(
            record.caption.raw_text, dictionary, objective, rng_seed=seed
        )
        tokens, truncated = header.vocab.encode(result.perturbed, max_len=16)
        new_record = CorpusRecord(
            image=record.image,
            caption=CaptionSample(
                tokens=tokens, raw_text=result.perturbed, truncated=truncated
            ),
            label=record.label,
            provenance=Provenance.CAPTION_ADV,
            source_id=record.source_id,
        )
        meta = {
            "objective": result.objective,
            "no_hit": result.no_hit,
            "edits": [
                {"span": list(e.span), "original": e.original, "replacement": e.replacement}
                for e in result.edits
            ],
        }
        return new_record, meta

    return Attacker(kind=NoiseKind.CAPTION_ADV, perturb=perturb)


def random_attacker(rate: float) -> Attacker:
    """Uniform token substitution at the given per-token rate."""

    def perturb(record, seed, header):
        result = perturb_random(
            record.caption.raw_text, rate, rng_seed=seed, vocab=header.vocab
        )
        tokens, truncated = header.vocab.encode(result.perturbed, max_len=16)
        new_record = CorpusRecord(
            image=record.image,
            caption=CaptionSample(
                tokens=tokens, raw_text=result.perturbed, truncated=truncated
            ),
            label=record.label,
            provenance=Provenance.RANDOM_NOISE,
            source_id=record.source_id,
        )
        return new_record, {"rate": rate, "edit_count": len(result.edits)}

    return Attacker(kind=NoiseKind.RANDOM_NOISE, perturb=perturb)


# -- crafting ----------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """gamma fraction of records to perturb, with which attack, which seed."""

    gamma: float
    kind: NoiseKind
    seed: int
    attack_cfg: object = None  # AttackConfig | Objective | rate, by kind

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolationError("gamma must lie in [0, 1]")


@dataclass(frozen=True)
class CraftManifest:
    spec: dict
    perturbed_indices: tuple[int, ...]
    record_meta: dict[int, dict]
    clean_checksum: str
    noisy_checksum: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "spec": self.spec,
                "perturbed_indices": list(self.perturbed_indices),
                "record_meta": {str(k): v for k, v in self.record_meta.items()},
                "clean_checksum": self.clean_checksum,
                "noisy_checksum": self.noisy_checksum,
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "CraftManifest":
        raw = json.loads(text)
        return CraftManifest(
            spec=raw["spec"],
            perturbed_indices=tuple(raw["perturbed_indices"]),
            record_meta={int(k): v for k, v in raw["record_meta"].items()},
            clean_checksum=raw["clean_checksum"],
            noisy_checksum=raw["noisy_checksum"],
        )


def noisy_count(gamma: float, n: int) -> int:
    """floor(gamma * n), robust to decimal gammas that float cannot represent
    exactly (0.3 * 200 must count as 60, not 59)."""
    x = gamma * n
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        return int(nearest)
    return int(math.floor(x))


def _record_seed(base: int, index: int) -> int:
    return int(
        np.random.SeedSequence(entropy=[base, 9, index]).generate_state(1)[0]
    )


def craft(
    clean_corpus: Corpus, spec: NoiseSpec, attacker: Attacker
) -> tuple[Corpus, CraftManifest]:
    """Noisy corpus: exactly floor(gamma*N) perturbed records, rest untouched."""
    if len(clean_corpus) == 0:
        raise ContractViolationError("clean corpus is empty")
    if attacker.kind != spec.kind:
        raise ContractViolationError(
            f"attacker kind {attacker.kind} does not match spec kind {spec.kind}"
        )
    n = len(clean_corpus)
    m = noisy_count(spec.gamma, n)
   # seeded Fisher-Yates prefix: uniform without replacement
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[spec.seed, 5]))
    chosen = sorted(int(i) for i in rng.permutation(n)[:m])
    chosen_set = set(chosen)

    records = list(clean_corpus.records)
    meta: dict[int, dict] = {}
    for index in chosen:
        record = records[index]
        try:
            new_record, record_meta = attacker.perturb(
                record, _record_seed(spec.seed, index), clean_corpus.header
            )
        except Exception as err:
            raise type(err)(
                f"attack failed on record {record.image.id!r} (index {index}): {err}"
            ) from err
        records[index] = new_record
        meta[index] = record_meta

    noisy = Corpus(header=clean_corpus.header, records=tuple(records))
    manifest = CraftManifest(
        spec={
            "gamma": spec.gamma,
            "kind": spec.kind.value,
            "seed": spec.seed,
            "attack_cfg": _describe_attack_cfg(spec.attack_cfg),
        },
        perturbed_indices=tuple(chosen),
        record_meta=meta,
        clean_checksum=clean_corpus.checksum(),
        noisy_checksum=noisy.checksum(),
    )
    assert len(chosen_set) == m
    return noisy, manifest


def _describe_attack_cfg(cfg) -> object:
    if cfg is None:
        return None
    if isinstance(cfg, AttackConfig):
        return {
            "epsilon": cfg.epsilon,
            "step_size": cfg.step_size,
            "iterations": cfg.iterations,
        }
    if isinstance(cfg, Objective):
        return cfg.value
    return cfg


# -- binary persistence --------------------------------------------------------------

_MAGIC = b"RLCO"
_VERSION = 1


def _pack_str(text: str) -> bytes:
    data = text.encode("utf-8")
    return struct.pack("<I", len(data)) + data


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, fmt: str):
        values = struct.unpack_from(fmt, self.blob, self.off)
        self.off += struct.calcsize(fmt)
        return values

    def take_str(self) -> str:
        (length,) = self.take("<I")
        raw = self.blob[self.off : self.off + length]
        self.off += length
        return raw.decode("utf-8")

    def take_bytes(self, count: int) -> bytes:
        raw = self.blob[self.off : self.off + count]
        self.off += count
        return raw


_PROVENANCE_CODES = {p: i for i, p in enumerate(Provenance)}
_PROVENANCE_BY_CODE = {i: p for p, i in _PROVENANCE_CODES.items()}


def serialize_corpus(corpus: Corpus) -> bytes:
    h, w, c = corpus.header.image_shape
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack(
        "<IIIII", len(corpus), h, w, c, corpus.header.vocab.size
    )
    out += struct.pack("<I", len(corpus.header.vocab.words))
    for word in corpus.header.vocab.words:
        out += _pack_str(word)
    out += struct.pack("<I", corpus.header.k)
    for name in corpus.header.class_names:
        out += _pack_str(name)
    out += _pack_str(corpus.header.family)
    for record in corpus.records:
        out += _pack_str(record.image.id)
        out += _pack_str(record.source_id)
        out += struct.pack("<B", _PROVENANCE_CODES[record.provenance])
        out += struct.pack("<i", -1 if record.label is None else record.label)
        out += _pack_str(record.caption.raw_text)
        out += struct.pack("<H", len(record.caption.tokens))
        if record.caption.tokens:
            out += struct.pack(
                f"<{len(record.caption.tokens)}I", *record.caption.tokens
            )
        out += struct.pack("<B", int(record.caption.truncated))
        out += np.asarray(record.image.pixels, dtype="<f8").tobytes()
    return bytes(out)


def deserialize_corpus(blob: bytes) -> Corpus:
    reader = _Reader(blob)
    if reader.take_bytes(4) != _MAGIC:
        raise ContractViolationError("not a corpus file")
    (version,) = reader.take("<I")
    if version != _VERSION:
        raise ContractViolationError(f"unsupported corpus version {version}")
    n, h, w, c, vocab_size = reader.take("<IIIII")
    (word_count,) = reader.take("<I")
    words = tuple(reader.take_str() for _ in range(word_count))
    vocab = Vocabulary(words)
    if vocab.size != vocab_size:
        raise ContractViolationError("corrupt corpus: vocab size mismatch")
    (k,) = reader.take("<I")
    class_names = tuple(reader.take_str() for _ in range(k))
    family = reader.take_str()
    records = []
    for _ in range(n):
        rid = reader.take_str()
        source_id = reader.take_str()
        (prov_code,) = reader.take("<B")
        (label,) = reader.take("<i")
        raw_text = reader.take_str()
        (token_count,) = reader.take("<H")
        tokens = reader.take(f"<{token_count}I") if token_count else ()
        (truncated,) = reader.take("<B")
        pixels = np.frombuffer(
            reader.take_bytes(h * w * c * 8), dtype="<f8"
        ).reshape(h, w, c)
        records.append(
            CorpusRecord(
                image=ImageSample(pixels=pixels, id=rid),
                caption=CaptionSample(
                    tokens=tokens, raw_text=raw_text, truncated=bool(truncated)
                ),
                label=None if label < 0 else label,
                provenance=_PROVENANCE_BY_CODE[prov_code],
                source_id=source_id,
            )
        )
    header = CorpusHeader(
        image_shape=(h, w, c), vocab=vocab, class_names=class_names, family=family
    )
    return Corpus(header=header, records=tuple(records))


def write_corpus(corpus: Corpus, path: str | Path) -> str:
    """Atomic write; returns the content checksum."""
    blob = serialize_corpus(corpus)
    atomic_write_bytes(path, blob)
    return sha256_hex(blob)


def read_corpus(path: str | Path) -> Corpus:
    return deserialize_corpus(Path(path).read_bytes())
