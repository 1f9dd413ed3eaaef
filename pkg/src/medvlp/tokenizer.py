"""Word-level tokenization and the fixed vocabulary.

Text is lowercased and split on anything that is not a letter or digit, so
surface forms stay aligned one-to-one with token positions (which keeps
entity positions unambiguous). The vocabulary file format is one token per
line, line number = id, special tokens first.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]")
PAD, BOS, EOS, UNK, MASK = range(5)

_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize_text(text: str) -> list[str]:
    """Lowercased alphanumeric word tokens, punctuation dropped."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenSeq:
    """A token sequence: ids, aligned surface forms and per-position validity."""

    ids: np.ndarray
    words: tuple[str, ...]
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.intp))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))
        if not (len(self.ids) == len(self.words) == len(self.valid)):
            raise ValueError("TokenSeq: ids, words and valid must align")
        if len(self.ids) and self.ids.min() < 0:
            raise ValueError("TokenSeq: negative token id")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


class Vocabulary:
    """Fixed token-to-id mapping with the special tokens at the front."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def build(cls, words) -> "Vocabulary":
        """Specials followed by the sorted unique word set."""
        body = sorted(set(words) - set(SPECIAL_TOKENS))
        return cls(list(SPECIAL_TOKENS) + body)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode_words(self, words: list[str], max_len: int | None = None) -> TokenSeq:
        if max_len is not None:
            words = words[:max_len]
        ids = np.fromiter(
            (self._index.get(w, UNK) for w in words), dtype=np.intp, count=len(words)
        )
        return TokenSeq(ids, tuple(words), np.ones(len(words), dtype=bool))

    def encode(self, text: str, max_len: int | None = None) -> TokenSeq:
        return self.encode_words(tokenize_text(text), max_len)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def pad_to(seq: TokenSeq, length: int) -> TokenSeq:
    """Right-pad with [PAD] tokens marked invalid."""
    n = len(seq)
    if length < n:
        raise ValueError(f"cannot pad a sequence of {n} tokens down to {length}")
    extra = length - n
    ids = np.concatenate([seq.ids, np.full(extra, PAD, dtype=np.intp)])
    words = seq.words + (SPECIAL_TOKENS[PAD],) * extra
    valid = np.concatenate([seq.valid, np.zeros(extra, dtype=bool)])
    return TokenSeq(ids, words, valid)


def concat_with_separator(seqs: list[TokenSeq], sep_id: int = EOS) -> TokenSeq:
    """Join sequences with a separator token between them (all positions valid)."""
    ids: list[int] = []
    words: list[str] = []
    for i, seq in enumerate(seqs):
        if i:
            ids.append(sep_id)
            words.append(SPECIAL_TOKENS[sep_id])
        ids.extend(seq.ids.tolist())
        words.extend(seq.words)
    return TokenSeq(
        np.asarray(ids, dtype=np.intp), tuple(words), np.ones(len(ids), dtype=bool)
    )
