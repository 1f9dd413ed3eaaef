"""Attention-guided image token masking.

Masking runs in two stages: unparameterized single-head attention maps are
computed against report features, disease-prompt features and the image
features themselves; each map is reduced to per-token scores and its
top-proportion tokens are masked; the per-strategy masks are blended by set
union and randomly subsampled to the final ratio. Attention inputs are
detached, so mask selection never contributes a gradient path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import RngStream, sample_without_replacement

PROVENANCES = ("report", "prompt", "self", "blended", "random", "entity")


@dataclass(frozen=True)
class MaskConfig:
    """Mask ratios: per-strategy, final blended, and entity-token."""

    lambda1: float = 0.7
    lambda2: float = 0.75
    lambda3: float = 0.2

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class TokenMask:
    """A set of masked token indices over a sequence of ``n_tokens``."""

    n_tokens: int
    masked: tuple[int, ...]
    provenance: str

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.masked))
        object.__setattr__(self, "masked", idx)
        if len(set(idx)) != len(idx):
            raise ValueError("TokenMask: duplicate indices")
        if idx and not (0 <= idx[0] and idx[-1] < self.n_tokens):
            raise ValueError(
                f"TokenMask: indices out of range for n_tokens={self.n_tokens}"
            )
        if self.provenance not in PROVENANCES:
            raise ValueError(f"TokenMask: unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.masked)

    def as_set(self) -> frozenset[int]:
        return frozenset(self.masked)

    def complement(self) -> tuple[int, ...]:
        inside = set(self.masked)
        return tuple(i for i in range(self.n_tokens) if i not in inside)


def round_half_up(x: float) -> int:
    """round(0.5) == 1; used for every ratio-to-count conversion."""
    return int(math.floor(x + 0.5))


def cross_attention(q_feats: Tensor, kv_feats: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(C)) V with detached inputs, single head.

    The output feeds mask scoring only, so it is deliberately cut out of the
    differentiation graph.
    """
    q = q_feats.detach()
    kv = kv_feats.detach()
    if q.ndim != 2 or kv.ndim != 2 or q.shape[1] != kv.shape[1]:
        raise ShapeError(
            f"cross_attention: channel mismatch {q.shape} vs {kv.shape}"
        )
    if kv.shape[0] < 1:
        raise ShapeError("cross_attention: empty key/value sequence")
    c = q.shape[1]
    weights = ad.softmax_rows(ad.matmul(q, ad.transpose(kv)), 1.0 / math.sqrt(c))
    return ad.matmul(weights, kv)


def self_attention_feats(e_img: Tensor) -> Tensor:
    return cross_attention(e_img, e_img)


def token_scores(a: Tensor) -> np.ndarray:
    """Per-token score = L2 norm of the attention-mixed feature row."""
    return np.linalg.norm(np.asarray(a.data if isinstance(a, Tensor) else a), axis=1)


def topk_mask(a: Tensor, lambda1: float, provenance: str = "self") -> TokenMask:
    """Mask the round(lambda1 * N) highest-scoring tokens.

    Ties break toward the lower index.
    """
    if not (0.0 <= lambda1 <= 1.0):
        raise ValueError(f"topk_mask: lambda1 must be in [0, 1], got {lambda1}")
    scores = token_scores(a)
    n = len(scores)
    k = round_half_up(lambda1 * n)
    order = np.lexsort((np.arange(n), -scores))
    return TokenMask(n, tuple(int(i) for i in order[:k]), provenance)


def blend_masks(*masks: TokenMask) -> TokenMask:
    """Set union of the per-strategy masks."""
    if not masks:
        raise ValueError("blend_masks: no masks given")
    n = masks[0].n_tokens
    for m in masks[1:]:
        if m.n_tokens != n:
            raise ShapeError(
                f"blend_masks: length mismatch {m.n_tokens} vs {n}"
            )
    union: set[int] = set()
    for m in masks:
        union |= set(m.masked)
    return TokenMask(n, tuple(union), "blended")


def final_mask(m_b: TokenMask, lambda2: float, rng: RngStream) -> TokenMask:
    """Random subset of the blended mask at exactly round(lambda2 * N) tokens.

    If the blend is smaller than the target, all of it is kept and the
    remainder is drawn uniformly from the unmasked indices, so the final
    ratio contract is exact either way.
    """
    if not (0.0 <= lambda2 <= 1.0):
        raise ValueError(f"final_mask: lambda2 must be in [0, 1], got {lambda2}")
    k = round_half_up(lambda2 * m_b.n_tokens)
    if len(m_b) >= k:
        chosen = sample_without_replacement(rng, m_b.masked, k)
    else:
        top_up = sample_without_replacement(rng, m_b.complement(), k - len(m_b))
        chosen = list(m_b.masked) + top_up
    return TokenMask(m_b.n_tokens, tuple(chosen), "blended")


def random_mask(n_tokens: int, ratio: float, rng: RngStream) -> TokenMask:
    """Plain uniform masking baseline at round(ratio * N) tokens."""
    k = round_half_up(ratio * n_tokens)
    chosen = sample_without_replacement(rng, range(n_tokens), k)
    return TokenMask(n_tokens, tuple(chosen), "random")


def apply_image_mask(
    e_img: Tensor, mask: TokenMask, mask_embedding: Tensor, pos_embed: Tensor
) -> Tensor:
    """Replace masked rows with the shared mask embedding plus that row's
    positional embedding; unmasked rows pass through unchanged."""
    if mask.n_tokens != e_img.shape[0]:
        raise ShapeError(
            f"apply_image_mask: mask over {mask.n_tokens} tokens vs features "
            f"{e_img.shape}"
        )
    if not mask.masked:
        return e_img
    idx = np.asarray(mask.masked, dtype=np.intp)
    rows = ad.add(ad.take_rows(pos_embed, idx), mask_embedding)
    return ad.scatter_rows(e_img, idx, rows)


def strategy_masks(
    e_img: Tensor,
    e_prompt: Tensor,
    cfg: MaskConfig,
    rng: RngStream,
    e_report: Tensor | None = None,
) -> tuple[TokenMask, dict[str, TokenMask]]:
    """Full masking pipeline for one sample.

    Report-driven attention participates only when report features exist;
    without them the blend unions the prompt and self strategies alone.
    Returns the final mask plus each strategy mask for inspection.
    """
    per: dict[str, TokenMask] = {}
    if e_report is not None:
        per["report"] = topk_mask(
            cross_attention(e_img, e_report), cfg.lambda1, "report"
        )
    per["prompt"] = topk_mask(cross_attention(e_img, e_prompt), cfg.lambda1, "prompt")
    per["self"] = topk_mask(self_attention_feats(e_img), cfg.lambda1, "self")
    blended = blend_masks(*per.values())
    return final_mask(blended, cfg.lambda2, rng), per
