"""Whitespace tokenizer and vocabulary with the reserved special tokens."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, ENT = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[ENT]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, ENT)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, ENT_ID = range(5)


def tokenize(text: str) -> list[str]:
    """Split on Unicode whitespace."""
    return text.split()


def decode_span(tokens: Sequence[str], start: int, end: int) -> str:
    """Join ``tokens[start..end]`` (inclusive) with single spaces."""
    if not 0 <= start <= end < len(tokens):
        raise IndexError(f"span ({start}, {end}) out of range for {len(tokens)} tokens")
    return " ".join(tokens[start : end + 1])


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...] = ()  # non-reserved, in id order starting at 5
    lowercase: bool = False
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        index = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for i, tok in enumerate(self.tokens, start=len(SPECIAL_TOKENS)):
            if tok in index:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(SPECIAL_TOKENS) + len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return self.normalize(token) in self._index

    def normalize(self, token: str) -> str:
        if token in SPECIAL_TOKENS:
            return token
        return token.lower() if self.lowercase else token

    def id_of(self, token: str) -> int:
        return self._index.get(self.normalize(token), UNK_ID)

    def token_of(self, idx: int) -> str:
        if idx < len(SPECIAL_TOKENS):
            return SPECIAL_TOKENS[idx]
        return self.tokens[idx - len(SPECIAL_TOKENS)]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def save(self, path) -> None:
        lines = [f"#lowercase={'true' if self.lowercase else 'false'}", *self.tokens]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        header = lines[0]
        if not header.startswith("#lowercase="):
            raise ValueError(f"{path}: missing casing header line")
        lowercase = header.split("=", 1)[1].strip() == "true"
        body = lines[1:]
        if body and body[-1] == "":
            body = body[:-1]
        return cls(tuple(body), lowercase)


def build_vocab(corpus: Iterable[str], min_count: int = 1, lowercase: bool = False) -> Vocab:
    """Vocabulary over whitespace tokens seen at least ``min_count`` times.

    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for text in corpus:
        toks = tokenize(text)
        counts.update(t.lower() if lowercase else t for t in toks if t not in SPECIAL_TOKENS)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(tuple(kept), lowercase)


def encode(tokens: Iterable[str], vocab: Vocab) -> list[int]:
    return vocab.encode(tokens)
