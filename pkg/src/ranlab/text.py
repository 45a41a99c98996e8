"""Toy word-level vocabulary and tokenizer for the synthetic corpora."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ContractViolationError

PAD_ID = 0
UNK_ID = 1
_SPECIALS = ("<pad>", "<unk>")

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split into alphanumeric word tokens."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Fixed word list; ids 0 and 1 are reserved for pad and unknown."""

    words: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ContractViolationError("vocabulary words must be unique")
        object.__setattr__(
            self,
            "_index",
            {w: i + len(_SPECIALS) for i, w in enumerate(self.words)},
        )

    @property
    def size(self) -> int:
        return len(self.words) + len(_SPECIALS)

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        if token_id < len(_SPECIALS):
            return _SPECIALS[token_id]
        return self.words[token_id - len(_SPECIALS)]

    def encode(
        self, text: str, max_len: int | None = None, strict: bool = False
    ) -> tuple[tuple[int, ...], bool]:
        """Tokenize; returns (token ids, truncated flag).

        With ``strict``, unknown words raise instead of mapping to <unk>.
        """
        words = split_words(text)
        if strict:
            unknown = sorted({w for w in words if w not in self._index})
            if unknown:
                raise ContractViolationError(
                    f"words not in vocabulary: {', '.join(unknown)}"
                )
        ids = [self.id_of(w) for w in words]
        truncated = max_len is not None and len(ids) > max_len
        if truncated:
            ids = ids[:max_len]
        return tuple(ids), truncated

    def decode(self, token_ids) -> str:
        return " ".join(self.word_of(int(t)) for t in token_ids)


def build_vocabulary(texts) -> Vocabulary:
    """Vocabulary over all words in ``texts``, in first-seen order."""
    seen: dict[str, None] = {}
    for text in texts:
        for word in split_words(text):
            seen.setdefault(word, None)
    return Vocabulary(tuple(seen))
