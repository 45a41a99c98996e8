"""Adversarial captions: make the text stop describing its image.

Three attack objectives, mirrored by a deterministic dictionary engine:

* body_part - swap an anatomy term for another member of its group
* opposite - flip a finding's polarity (toggle negation / swap antonym)
* severity_laterality - flip a modifier (left/right, mild/severe, ...)

An optional chat-completion HTTP endpoint can rewrite captions instead;
its responses are validated and fall back to the rule engine when
configured.  A token-substitution baseline stands in for "random noise
on captions", which is not literally definable on discrete text.
"""

from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from typing import Sequence

import numpy as np

from .errors import (
    CaptionTransportError,
    CaptionValidationError,
    ContractViolationError,
)
from .text import Vocabulary, split_words

DEFAULT_MAX_EDITS = 3


class Objective(str, Enum):
    BODY_PART = "body_part"
    OPPOSITE = "opposite"
    SEVERITY_LATERALITY = "severity_laterality"


@dataclass(frozen=True)
class Edit:
    """Replace original word span [start, end) with `replacement`."""

    span: tuple[int, int]
    original: str
    replacement: str
    objective: str


@dataclass(frozen=True)
class PerturbedCaption:
    original: str
    perturbed: str
    edits: tuple[Edit, ...]
    objective: str
    no_hit: bool = False
    fallback: bool = False

    def __post_init__(self):
        if self.edits and _canon(self.perturbed) == _canon(self.original):
            raise ContractViolationError(
                "edits recorded but caption unchanged"
            )


def _canon(text: str) -> str:
    return " ".join(split_words(text))


# -- swap dictionary ---------------------------------------------------------


def _as_phrase(text: str) -> tuple[str, ...]:
    return tuple(split_words(text))


@dataclass(frozen=True)
class SwapDictionary:
    """Symmetric substitution tables for the three objectives."""

    body_part_groups: tuple[frozenset[str], ...]
    polarity_pairs: tuple[tuple[str, str], ...]
    severity_laterality_pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        seen: set[tuple[str, ...]] = set()

        def claim(term: str, where: str):
            phrase = _as_phrase(term)
            if not phrase:
                raise ContractViolationError(f"empty term in {where}")
            if phrase in seen:
                raise ContractViolationError(
                    f"term {term!r} appears in two groups"
                )
            seen.add(phrase)

        for group in self.body_part_groups:
            if len(group) < 2:
                raise ContractViolationError(
                    "body-part groups need at least two members"
                )
            for term in group:
                claim(term, "body_parts")
        for a, b in self.polarity_pairs:
            claim(a, "opposites")
            claim(b, "opposites")
        for a, b in self.severity_laterality_pairs:
            claim(a, "modifiers")
            claim(b, "modifiers")

    def _pair_table(
        self, pairs: tuple[tuple[str, str], ...]
    ) -> dict[tuple[str, ...], str]:
        table: dict[tuple[str, ...], str] = {}
        for a, b in pairs:
            table[_as_phrase(a)] = _canon(b)
            table[_as_phrase(b)] = _canon(a)
        return table

    def modifier_words(self) -> frozenset[str]:
        words: set[str] = set()
        for a, b in self.severity_laterality_pairs:
            words.update(_as_phrase(a))
            words.update(_as_phrase(b))
        return frozenset(words)

    @staticmethod
    def parse(content: str) -> "SwapDictionary":
        """Sectioned plain text: [body_parts] groups, [opposites] and
        [modifiers] pairs, one per line, pair sides separated by '|'."""
        groups: list[frozenset[str]] = []
        opposites: list[tuple[str, str]] = []
        modifiers: list[tuple[str, str]] = []
        section = None
        for raw in content.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip().lower()
                if section not in ("body_parts", "opposites", "modifiers"):
                    raise ContractViolationError(
                        f"unknown dictionary section [{section}]"
                    )
                continue
            if section == "body_parts":
                members = [w.strip() for w in line.split(",") if w.strip()]
                groups.append(frozenset(members))
            elif section in ("opposites", "modifiers"):
                sides = [s.strip() for s in line.split("|")]
                if len(sides) != 2 or not all(sides):
                    raise ContractViolationError(
                        f"pair line must be 'a | b': {raw!r}"
                    )
                target = opposites if section == "opposites" else modifiers
                target.append((sides[0], sides[1]))
            else:
                raise ContractViolationError(
                    f"dictionary line outside any section: {raw!r}"
                )
        return SwapDictionary(
            body_part_groups=tuple(groups),
            polarity_pairs=tuple(opposites),
            severity_laterality_pairs=tuple(modifiers),
        )

    @staticmethod
    def load(path) -> "SwapDictionary":
        with open(path, encoding="utf-8") as fh:
            return SwapDictionary.parse(fh.read())

    @staticmethod
    def default() -> "SwapDictionary":
        content = (
            resources.files("ranlab").joinpath("data/swaps.txt").read_text("utf-8")
        )
        return SwapDictionary.parse(content)


# -- rule-based engine ---------------------------------------------------------


def _scan_phrases(
    words: list[str], table: dict[tuple[str, ...], str]
) -> list[tuple[int, int, str]]:
    """Non-overlapping longest-first matches: (start, end, replacement)."""
    if not table:
        return []
    max_len = max(len(p) for p in table)
    hits = []
    i = 0
    while i < len(words):
        matched = False
        for length in range(min(max_len, len(words) - i), 0, -1):
            phrase = tuple(words[i : i + length])
            if phrase in table:
                hits.append((i, i + length, table[phrase]))
                i += length
                matched = True
                break
        if not matched:
            i += 1
    return hits


def _apply_edit(words: list[str], edit: Edit) -> list[str]:
    start, end = edit.span
    return words[:start] + split_words(edit.replacement) + words[end:]


def perturb_rule_based(
    caption: str,
    dictionary: SwapDictionary,
    objective: Objective | str,
    rng_seed: int = 0,
) -> PerturbedCaption:
    """Apply one seeded swap for the chosen objective.

    Captions with no applicable term come back unchanged with the
    ``no_hit`` flag set; that is a success, not an error.
    """
    if not caption or not caption.strip():
        raise ContractViolationError("caption must be nonempty")
    objective = Objective(objective)
    words = split_words(caption)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[rng_seed, 3]))

    candidates: list[Edit] = []
    if objective is Objective.BODY_PART:
        for i, word in enumerate(words):
            for group in dictionary.body_part_groups:
                if word in group:
                    others = sorted(group - {word})
                    pick = others[int(rng.integers(len(others)))]
                    candidates.append(
                        Edit((i, i + 1), word, pick, objective.value)
                    )
                    break
    elif objective is Objective.OPPOSITE:
        table = dictionary._pair_table(dictionary.polarity_pairs)
        modifier_words = dictionary.modifier_words()
        for start, end, replacement in _scan_phrases(words, table):
            negating = replacement.startswith("no ") and not words[start] == "no"
            # inserting a negation swallows a directly preceding modifier
            if negating and start > 0 and words[start - 1] in modifier_words:
                start -= 1
            candidates.append(
                Edit(
                    (start, end),
                    " ".join(words[start:end]),
                    replacement,
                    objective.value,
                )
            )
    else:
        table = dictionary._pair_table(dictionary.severity_laterality_pairs)
        for start, end, replacement in _scan_phrases(words, table):
            candidates.append(
                Edit(
                    (start, end),
                    " ".join(words[start:end]),
                    replacement,
                    objective.value,
                )
            )

    if not candidates:
        return PerturbedCaption(
            original=caption,
            perturbed=caption,
            edits=(),
            objective=objective.value,
            no_hit=True,
        )
    edit = candidates[int(rng.integers(len(candidates)))]
    perturbed = " ".join(_apply_edit(words, edit))
    return PerturbedCaption(
        original=caption,
        perturbed=perturbed,
        edits=(edit,),
        objective=objective.value,
    )


def invert(result: PerturbedCaption) -> str:
    """Undo recorded edits, mapping the perturbed caption back."""
    words = split_words(result.perturbed)
    for edit in reversed(result.edits):
        start = edit.span[0]
        length = len(split_words(edit.replacement))
        words = (
            words[:start] + split_words(edit.original) + words[start + length :]
        )
    return " ".join(words)


# -- random-substitution baseline ------------------------------------------------


def perturb_random(
    caption: str,
    rate: float,
    rng_seed: int,
    vocab: Vocabulary | Sequence[str],
) -> PerturbedCaption:
    """Independently substitute each token with probability `rate`.

    Replacements are drawn uniformly from the vocabulary excluding the
    current token, so every firing substitution is a real edit.  This is
    the discrete stand-in for "random noise on the caption input".
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractViolationError("rate must lie in [0, 1]")
    pool = list(vocab.words) if isinstance(vocab, Vocabulary) else list(vocab)
    if not pool:
        raise ContractViolationError("replacement vocabulary is empty")
    words = split_words(caption)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[rng_seed, 4]))
    edits = []
    out = list(words)
    for i, word in enumerate(words):
        if rng.random() >= rate:
            continue
        options = [w for w in pool if w != word]
        if not options:
            continue
        pick = options[int(rng.integers(len(options)))]
        out[i] = pick
        edits.append(Edit((i, i + 1), word, pick, "random"))
    return PerturbedCaption(
        original=caption,
        perturbed=" ".join(out),
        edits=tuple(edits),
        objective="random",
        no_hit=not edits,
    )


# -- LLM endpoint ------------------------------------------------------------------

PROMPT_TEMPLATES = {
    Objective.BODY_PART: (
        "Rewrite the radiology caption so it names a different body part, "
        "changing as few words as possible. Reply with the caption only.\n"
        "Caption: {caption}"
    ),
    Objective.OPPOSITE: (
        "Rewrite the radiology caption so the described finding is flipped "
        "to its opposite (present becomes absent and vice versa), changing "
        "as few words as possible. Reply with the caption only.\n"
        "Caption: {caption}"
    ),
    Objective.SEVERITY_LATERALITY: (
        "Rewrite the radiology caption flipping a severity or laterality "
        "modifier (left/right, mild/severe), changing as few words as "
        "possible. Reply with the caption only.\nCaption: {caption}"
    ),
}


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    path: str = "/v1/chat/completions"
    model: str = "llama3-8b"
    auth_header: str = "Authorization"
    auth_env: str | None = None
    timeout_ms: int = 10_000
    retries: int = 2
    backoff_s: float = 0.2
    fallback: bool = True
    response_path: tuple = ("choices", 0, "message", "content")


def _post_chat(cfg: EndpointConfig, prompt: str) -> str:
    body = json.dumps(
        {"model": cfg.model, "messages": [{"role": "user", "content": prompt}]}
    ).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if cfg.auth_env:
        value = os.environ.get(cfg.auth_env)
        if value:
            headers[cfg.auth_header] = value
    request = urllib.request.Request(
        cfg.base_url.rstrip("/") + cfg.path, data=body, headers=headers
    )
    attempts = cfg.retries + 1
    last_error = None
    for attempt in range(attempts):
        try:
            with urllib.request.urlopen(
                request, timeout=cfg.timeout_ms / 1000.0
            ) as response:
                payload = json.loads(response.read().decode("utf-8"))
            break
        except (urllib.error.URLError, TimeoutError, OSError) as err:
            last_error = err
            if attempt + 1 < attempts:
                time.sleep(cfg.backoff_s * (2**attempt))
    else:
        raise CaptionTransportError(
            f"endpoint unreachable after {attempts} attempts: {last_error}"
        )
    node = payload
    try:
        for key in cfg.response_path:
            node = node[key]
    except (KeyError, IndexError, TypeError) as err:
        raise CaptionValidationError(
            f"response missing field path {cfg.response_path}: {err}"
        ) from err
    if not isinstance(node, str):
        raise CaptionValidationError("response content is not a string")
    return node


def _diff_edits(original: str, perturbed: str, objective: str) -> tuple[Edit, ...]:
    import difflib

    a, b = split_words(original), split_words(perturbed)
    edits = []
    for tag, i1, i2, j1, j2 in difflib.SequenceMatcher(
        a=a, b=b, autojunk=False
    ).get_opcodes():
        if tag == "equal":
            continue
        edits.append(
            Edit(
                span=(i1, i2),
                original=" ".join(a[i1:i2]),
                replacement=" ".join(b[j1:j2]),
                objective=objective,
            )
        )
    return tuple(edits)


def perturb_llm(
    caption: str,
    endpoint_config: EndpointConfig,
    prompt_template: str | None = None,
    objective: Objective | str = Objective.OPPOSITE,
    dictionary: SwapDictionary | None = None,
    rng_seed: int = 0,
    max_edits: int = DEFAULT_MAX_EDITS,
) -> PerturbedCaption:
    """Ask a chat endpoint to rewrite the caption; validate; extract edits.

    Validation: nonempty, differs from the original, at most 3x the
    original length, and within the edit budget.  On validation failure
    (or transport failure) the rule engine takes over when
    ``endpoint_config.fallback`` is set; otherwise the error propagates.
    """
    if not caption or not caption.strip():
        raise ContractViolationError("caption must be nonempty")
    objective = Objective(objective)
    template = prompt_template or PROMPT_TEMPLATES[objective]
    if "{caption}" not in template:
        raise ContractViolationError(
            "prompt template must contain the {caption} placeholder"
        )

    def fall_back(reason: Exception) -> PerturbedCaption:
        if not endpoint_config.fallback or dictionary is None:
            raise reason
        result = perturb_rule_based(caption, dictionary, objective, rng_seed)
        return replace(result, fallback=True)

    try:
        answer = _post_chat(endpoint_config, template.format(caption=caption))
    except CaptionTransportError as err:
        return fall_back(err)
    except CaptionValidationError as err:
        return fall_back(err)

    answer = answer.strip()
    try:
        if not answer:
            raise CaptionValidationError("endpoint returned an empty caption")
        if _canon(answer) == _canon(caption):
            raise CaptionValidationError("endpoint returned the caption verbatim")
        if len(answer) > 3 * max(1, len(caption)):
            raise CaptionValidationError("response longer than 3x the original")
        edits = _diff_edits(caption, answer, objective.value)
        if len(edits) > max_edits:
            raise CaptionValidationError(
                f"{len(edits)} edits exceed budget {max_edits}"
            )
    except CaptionValidationError as err:
        return fall_back(err)
    return PerturbedCaption(
        original=caption,
        perturbed=_canon(answer),
        edits=edits,
        objective=objective.value,
    )


def perturb_llm_batch(
    captions: Sequence[str],
    endpoint_config: EndpointConfig,
    objective: Objective | str = Objective.OPPOSITE,
    dictionary: SwapDictionary | None = None,
    rng_seed: int = 0,
    in_flight: int = 4,
) -> list[PerturbedCaption]:
    """Bounded-concurrency endpoint calls; results keep corpus order."""
    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        return list(
            pool.map(
                lambda item: perturb_llm(
                    item[1],
                    endpoint_config,
                    objective=objective,
                    dictionary=dictionary,
                    rng_seed=rng_seed + item[0],
                ),
                enumerate(captions),
            )
        )
