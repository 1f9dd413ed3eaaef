"""Alignment, image-reconstruction and report-reconstruction losses.

Paired samples contribute all three losses; unpaired samples contribute the
image-reconstruction loss only. The batch objective is the mean paired total
plus the mean unpaired total.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoders import EncoderConfig, block_forward
from .image_masking import TokenMask
from .rng import RngStream
from .text_masking import AttnMatrix
from .tokenizer import TokenSeq


@dataclass(frozen=True)
class DecoderConfig:
    image_decoder_layers: int = 2
    text_decoder_layers: int = 2

    def __post_init__(self):
        if self.image_decoder_layers < 1 or self.text_decoder_layers < 1:
            raise ValueError("decoder layer counts must be positive")


@dataclass
class LossBundle:
    """Scalar losses for one sample or one batch; absent parts are None."""

    mim: Tensor | None
    align: Tensor | None = None
    mlm: Tensor | None = None
    total: Tensor | None = None
    paired: bool = False

    def values(self) -> dict[str, float | None]:
        pull = lambda t: None if t is None else float(t.data)
        return {
            "align": pull(self.align),
            "mim": pull(self.mim),
            "mlm": pull(self.mlm),
            "total": pull(self.total),
        }


def init_decoder_params(
    enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, rng: RngStream
) -> dict[str, Tensor]:
    """Image / text decoder parameters, keyed ``imgdec.*`` / ``txtdec.*``."""
    from .encoders import _init_block, _init_cross  # shared block layout

    c = enc_cfg.embed_dim
    params: dict[str, Tensor] = {}

    r = rng.child("imgdec")
    params["imgdec.mask_emb"] = Tensor(
        r.child("mask").truncated_normal(0.02, (c,)), requires_grad=True
    )
    params["imgdec.pos"] = Tensor(
        r.child("pos").truncated_normal(0.02, (enc_cfg.n_patches, c)),
        requires_grad=True,
    )
    for i in range(dec_cfg.image_decoder_layers):
        _init_block(params, f"imgdec.l{i}", c, r.child("block", i))
    params["imgdec.lnf_g"] = Tensor(np.ones(c), requires_grad=True)
    params["imgdec.lnf_b"] = Tensor(np.zeros(c), requires_grad=True)
    params["imgdec.head_w"] = Tensor(
        r.child("head").truncated_normal(0.02, (c, enc_cfg.patch_dim)),
        requires_grad=True,
    )
    params["imgdec.head_b"] = Tensor(np.zeros(enc_cfg.patch_dim), requires_grad=True)

    r = rng.child("txtdec")
    params["txtdec.mask_emb"] = Tensor(
        r.child("mask").truncated_normal(0.02, (c,)), requires_grad=True
    )
    params["txtdec.pos"] = Tensor(
        r.child("pos").truncated_normal(0.02, (enc_cfg.max_text_len, c)),
        requires_grad=True,
    )
    for i in range(dec_cfg.text_decoder_layers):
        _init_block(params, f"txtdec.l{i}", c, r.child("block", i))
        _init_cross(params, f"txtdec.l{i}", c, r.child("cross", i))
    params["txtdec.lnf_g"] = Tensor(np.ones(c), requires_grad=True)
    params["txtdec.lnf_b"] = Tensor(np.zeros(c), requires_grad=True)
    params["txtdec.head_w"] = Tensor(
        r.child("head").truncated_normal(0.02, (c, enc_cfg.vocab_size)),
        requires_grad=True,
    )
    params["txtdec.head_b"] = Tensor(np.zeros(enc_cfg.vocab_size), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_align(x_feats: Tensor, y_feats: Tensor, sigma) -> Tensor:
    """Symmetric InfoNCE over unit-norm global features.

    -(1/B) * [sum_i log softmax(x_i . Y / sigma)_i
              + sum_i log softmax(y_i . X / sigma)_i].
    ``sigma`` may be a float or a scalar Tensor (learnable temperature).
    """
    if x_feats.shape != y_feats.shape or x_feats.ndim != 2:
        raise ShapeError(
            f"loss_align: feature shapes {x_feats.shape} vs {y_feats.shape}"
        )
    if not (np.isfinite(x_feats.data).all() and np.isfinite(y_feats.data).all()):
        raise FloatingPointError("loss_align: non-finite features")
    b = x_feats.shape[0]
    logits = ad.matmul(x_feats, ad.transpose(y_feats))
    if isinstance(sigma, Tensor):
        logits = ad.mul(logits, ad.recip(sigma))
    else:
        if sigma <= 0:
            raise ValueError(f"loss_align: temperature must be positive, got {sigma}")
        logits = ad.mul(logits, 1.0 / float(sigma))
    diag = np.arange(b)
    i2t = ad.pick(ad.log_softmax_rows(logits), diag, diag)
    t2i = ad.pick(ad.log_softmax_rows(ad.transpose(logits)), diag, diag)
    return ad.mul(ad.add(ad.sum_all(i2t), ad.sum_all(t2i)), -1.0 / b)


def decode_image(mim_input: Tensor, cfg: EncoderConfig, dec_cfg, params) -> Tensor:
    """Transformer over the mask-embedded token sequence, then a linear head
    back to flattened patch space."""
    x = mim_input
    for i in range(dec_cfg.image_decoder_layers):
        x = block_forward(x, params, f"imgdec.l{i}", cfg.n_heads)
    x = ad.layer_norm_affine(x, params["imgdec.lnf_g"], params["imgdec.lnf_b"])
    return ad.linear(x, params["imgdec.head_w"], params["imgdec.head_b"])


def loss_mim(y_mim: Tensor, target_patches, mask: TokenMask) -> Tensor:
    """Mean squared error over masked rows only."""
    target = np.asarray(
        target_patches.data if isinstance(target_patches, Tensor) else target_patches
    )
    if y_mim.shape != target.shape:
        raise ShapeError(
            f"loss_mim: prediction {y_mim.shape} vs target {target.shape}"
        )
    if not mask.masked:
        warnings.warn("loss_mim: empty mask, loss is 0", RuntimeWarning)
        return Tensor(0.0)
    idx = np.asarray(mask.masked, dtype=np.intp)
    diff = ad.sub(ad.take_rows(y_mim, idx), Tensor(target[idx]))
    return ad.mean_all(ad.mul(diff, diff))


def decode_text(
    mlm_input: Tensor,
    attn: AttnMatrix,
    e_img: Tensor,
    cfg: EncoderConfig,
    dec_cfg,
    params,
) -> Tensor:
    """Masked self-attention + cross-attention over image tokens, to vocab logits."""
    if attn.n != mlm_input.shape[0]:
        raise ShapeError(
            f"decode_text: permissions {attn.n} vs sequence {mlm_input.shape}"
        )
    x = mlm_input
    for i in range(dec_cfg.text_decoder_layers):
        x = block_forward(
            x, params, f"txtdec.l{i}", cfg.n_heads, allowed=attn.allowed,
            cross_kv=e_img,
        )
    x = ad.layer_norm_affine(x, params["txtdec.lnf_g"], params["txtdec.lnf_b"])
    return ad.linear(x, params["txtdec.head_w"], params["txtdec.head_b"])


def loss_mlm(logits: Tensor, targets: TokenSeq, positions) -> Tensor:
    """Mean negative log-likelihood of the target token at each position."""
    positions = sorted(int(p) for p in positions)
    if not positions:
        warnings.warn("loss_mlm: no positions, loss is 0", RuntimeWarning)
        return Tensor(0.0)
    vocab = logits.shape[1]
    ids = targets.ids[positions]
    if ids.max() >= vocab or ids.min() < 0:
        raise ValueError(
            f"loss_mlm: target id outside vocabulary of size {vocab}"
        )
    logp = ad.log_softmax_rows(ad.take_rows(logits, positions))
    picked = ad.pick(logp, np.arange(len(positions)), ids)
    return ad.mul(ad.mean_all(picked), -1.0)


def compose_losses(
    align: Tensor | None, mim: Tensor, mlm: Tensor | None, paired: bool
) -> LossBundle:
    """Joint-phase composition: paired needs all three parts, unpaired only
    the image-reconstruction part."""
    if paired:
        if align is None or mlm is None:
            raise ValueError("compose_losses: paired sample missing align or mlm")
        total = ad.add(ad.add(align, mim), mlm)
        return LossBundle(mim=mim, align=align, mlm=mlm, total=total, paired=True)
    if align is not None or mlm is not None:
        raise ValueError("compose_losses: unpaired sample carries align or mlm")
    return LossBundle(mim=mim, total=mim, paired=False)


def mixed_batch_total(bundles: list[LossBundle]) -> Tensor:
    """Mean over paired totals plus mean over unpaired totals."""
    paired = [b.total for b in bundles if b.paired]
    unpaired = [b.total for b in bundles if not b.paired]
    if not paired and not unpaired:
        raise ValueError("mixed_batch_total: empty batch")
    parts = []
    for group in (paired, unpaired):
        if group:
            acc = group[0]
            for t in group[1:]:
                acc = ad.add(acc, t)
            parts.append(ad.mul(acc, 1.0 / len(group)))
    return parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])


def standardize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch zero mean / unit variance reconstruction targets."""
    mu = patches.mean(axis=1, keepdims=True)
    var = patches.var(axis=1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)
