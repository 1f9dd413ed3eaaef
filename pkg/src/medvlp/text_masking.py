"""Entity-driven text masking for the report decoder.

Medical entities are found by deterministic lexicon matching (longest match
first, left to right, no overlaps). A random subset of entity positions is
masked; the resulting token mask is folded into the decoder's causal
attention permissions so masked entities are hidden from every other
position while keeping their own (mask-embedded) slot visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .image_masking import TokenMask, round_half_up
from .rng import RngStream, sample_without_replacement
from .tokenizer import TokenSeq, tokenize_text


@dataclass(frozen=True)
class EntityLexicon:
    """Lowercase surface forms (possibly multi-word) mapped to entity classes."""

    terms: dict[tuple[str, ...], str]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("EntityLexicon: empty lexicon")

    @property
    def max_words(self) -> int:
        return max(len(t) for t in self.terms)

    @classmethod
    def from_pairs(cls, pairs) -> "EntityLexicon":
        terms: dict[tuple[str, ...], str] = {}
        for surface, tag in pairs:
            key = tuple(tokenize_text(surface))
            if not key:
                raise ValueError(f"lexicon surface form {surface!r} has no tokens")
            if key in terms:
                raise ValueError(f"duplicate lexicon term {surface!r}")
            terms[key] = tag
        return cls(terms)

    @classmethod
    def load(cls, path) -> "EntityLexicon":
        pairs = []
        for lineno, line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'surface<TAB>class'")
            pairs.append((parts[0], parts[1]))
        return cls.from_pairs(pairs)

    def save(self, path) -> None:
        lines = [f"{' '.join(k)}\t{v}" for k, v in sorted(self.terms.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class AttnMatrix:
    """Boolean attention permissions: allowed[i, j] = i may attend to j."""

    allowed: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.allowed, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"AttnMatrix must be square, got {arr.shape}")
        object.__setattr__(self, "allowed", arr)

    @property
    def n(self) -> int:
        return self.allowed.shape[0]


def recognize_entities(tokens: TokenSeq, lexicon: EntityLexicon) -> list[int]:
    """Positions of every token inside a lexicon match.

    Greedy longest-match-first scan over the valid positions, left to right,
    matches never overlap. Trailing padding is ignored.
    """
    words = [w if ok else None for w, ok in zip(tokens.words, tokens.valid)]
    n = len(words)
    found: list[int] = []
    i = 0
    while i < n:
        if words[i] is None:
            i += 1
            continue
        matched = 0
        for length in range(min(lexicon.max_words, n - i), 0, -1):
            window = words[i : i + length]
            if None in window:
                continue
            if tuple(window) in lexicon.terms:
                matched = length
                break
        if matched:
            found.extend(range(i, i + matched))
            i += matched
        else:
            i += 1
    return found


def entity_mask(
    entity_indices, n_tokens: int, lambda3: float, rng: RngStream
) -> TokenMask:
    """Mask round(lambda3 * |entities|) entity positions.

    The ratio applies to the entity tokens found, not to sentence length.
    """
    if not (0.0 <= lambda3 <= 1.0):
        raise ValueError(f"entity_mask: lambda3 must be in [0, 1], got {lambda3}")
    indices = list(entity_indices)
    k = round_half_up(lambda3 * len(indices))
    chosen = sample_without_replacement(rng, indices, k)
    return TokenMask(n_tokens, tuple(chosen), "entity")


def causal_mask(n: int) -> AttnMatrix:
    """Each position may attend to itself and earlier positions only."""
    if n < 1:
        raise ValueError(f"causal_mask: n must be >= 1, got {n}")
    return AttnMatrix(np.tril(np.ones((n, n), dtype=bool)))


def combine_masks(causal: AttnMatrix, ent: TokenMask) -> AttnMatrix:
    """Hide masked entity columns from every other position.

    allowed[i, j] = causal[i, j] and (j not masked or j == i): a masked
    entity keeps self-visibility of its mask-embedded slot so positional
    information survives, but its content is invisible elsewhere.
    """
    n = causal.n
    if ent.n_tokens != n:
        raise ShapeError(
            f"combine_masks: mask over {ent.n_tokens} tokens vs causal {n}"
        )
    allowed = causal.allowed.copy()
    if ent.masked:
        cols = np.asarray(ent.masked, dtype=np.intp)
        keep_diag = allowed[cols, cols].copy()
        allowed[:, cols] = False
        allowed[cols, cols] = keep_diag
    return AttnMatrix(allowed)


def apply_text_mask(
    e_report: Tensor, ent: TokenMask, mask_embedding: Tensor, pos_embed: Tensor
) -> Tensor:
    """Replace masked entity rows with the shared text mask embedding plus
    that row's positional embedding."""
    if ent.n_tokens != e_report.shape[0]:
        raise ShapeError(
            f"apply_text_mask: mask over {ent.n_tokens} tokens vs features "
            f"{e_report.shape}"
        )
    if not ent.masked:
        return e_report
    idx = np.asarray(ent.masked, dtype=np.intp)
    rows = ad.add(ad.take_rows(pos_embed, idx), mask_embedding)
    return ad.scatter_rows(e_report, idx, rows)
