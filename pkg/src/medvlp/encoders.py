"""Patch-based image encoder and token-based text encoder.

Both encoders share the same pre-norm transformer block (norm -> multi-head
attention -> residual; norm -> 4x GELU MLP -> residual), followed by a final
layer norm and a per-modality linear projection. Weights are initialized
with a truncated normal of std 0.02, biases and positional tables with zeros
except where noted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import RngStream
from .tokenizer import TokenSeq


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 0
    max_text_len: int = 128

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an HxW image into flattened patches, raster order, row-major.

    Lossless: ``unpatchify`` inverts it exactly.
    """
    image = np.asarray(image)
    h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(
            f"patchify: image {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    tiles = image.reshape(gh, patch_size, gw, patch_size).transpose(0, 2, 1, 3)
    return tiles.reshape(gh * gw, patch_size * patch_size)


def unpatchify(patches: np.ndarray, image_size: int, patch_size: int) -> np.ndarray:
    gh = image_size // patch_size
    tiles = patches.reshape(gh, gh, patch_size, patch_size).transpose(0, 2, 1, 3)
    return tiles.reshape(image_size, image_size)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _init_block(params: dict, prefix: str, dim: int, rng: RngStream) -> None:
    hidden = 4 * dim

    def w(shape):
        return Tensor(rng.truncated_normal(0.02, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params[f"{prefix}.ln1_g"] = ones(dim)
    params[f"{prefix}.ln1_b"] = zeros(dim)
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = w((dim, dim))
        params[f"{prefix}.{name[1]}b"] = zeros(dim)
    params[f"{prefix}.ln2_g"] = ones(dim)
    params[f"{prefix}.ln2_b"] = zeros(dim)
    params[f"{prefix}.w1"] = w((dim, hidden))
    params[f"{prefix}.b1"] = zeros(hidden)
    params[f"{prefix}.w2"] = w((hidden, dim))
    params[f"{prefix}.b2"] = zeros(dim)


def _init_cross(params: dict, prefix: str, dim: int, rng: RngStream) -> None:
    def w(shape):
        return Tensor(rng.truncated_normal(0.02, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params[f"{prefix}.lnc_g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{prefix}.lnc_b"] = zeros(dim)
    for name in ("cwq", "cwk", "cwv", "cwo"):
        params[f"{prefix}.{name}"] = w((dim, dim))
        params[f"{prefix}.c{name[2]}b"] = zeros(dim)


def init_encoder_params(cfg: EncoderConfig, rng: RngStream) -> dict[str, Tensor]:
    """Image and text encoder parameters, keyed ``img.*`` / ``txt.*``."""
    c = cfg.embed_dim
    params: dict[str, Tensor] = {}

    r = rng.child("img")
    params["img.patch_w"] = Tensor(
        r.child("patch").truncated_normal(0.02, (cfg.patch_dim, c)),
        requires_grad=True,
    )
    params["img.patch_b"] = Tensor(np.zeros(c), requires_grad=True)
    params["img.pos"] = Tensor(
        r.child("pos").truncated_normal(0.02, (cfg.n_patches, c)), requires_grad=True
    )
    for i in range(cfg.n_layers):
        _init_block(params, f"img.l{i}", c, r.child("block", i))
    params["img.lnf_g"] = Tensor(np.ones(c), requires_grad=True)
    params["img.lnf_b"] = Tensor(np.zeros(c), requires_grad=True)
    params["img.proj_w"] = Tensor(
        r.child("proj").truncated_normal(0.02, (c, c)), requires_grad=True
    )
    params["img.proj_b"] = Tensor(np.zeros(c), requires_grad=True)

    r = rng.child("txt")
    params["txt.embed"] = Tensor(
        r.child("embed").truncated_normal(0.02, (cfg.vocab_size, c)),
        requires_grad=True,
    )
    params["txt.pos"] = Tensor(
        r.child("pos").truncated_normal(0.02, (cfg.max_text_len, c)),
        requires_grad=True,
    )
    for i in range(cfg.n_layers):
        _init_block(params, f"txt.l{i}", c, r.child("block", i))
    params["txt.lnf_g"] = Tensor(np.ones(c), requires_grad=True)
    params["txt.lnf_b"] = Tensor(np.zeros(c), requires_grad=True)
    params["txt.proj_w"] = Tensor(
        r.child("proj").truncated_normal(0.02, (c, c)), requires_grad=True
    )
    params["txt.proj_b"] = Tensor(np.zeros(c), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _affine_norm(x: Tensor, params, prefix: str, tag: str) -> Tensor:
    return ad.layer_norm_affine(
        x, params[f"{prefix}.{tag}_g"], params[f"{prefix}.{tag}_b"]
    )


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.linear(x, w, b)


def block_forward(
    x: Tensor,
    params,
    prefix: str,
    n_heads: int,
    allowed: np.ndarray | None = None,
    cross_kv: Tensor | None = None,
) -> Tensor:
    """One pre-norm transformer block; optional cross-attention sublayer."""
    h = _affine_norm(x, params, prefix, "ln1")
    q = _linear(h, params[f"{prefix}.wq"], params[f"{prefix}.qb"])
    k = _linear(h, params[f"{prefix}.wk"], params[f"{prefix}.kb"])
    v = _linear(h, params[f"{prefix}.wv"], params[f"{prefix}.vb"])
    a = ad.attention(q, k, v, n_heads, allowed)
    x = ad.add(x, _linear(a, params[f"{prefix}.wo"], params[f"{prefix}.ob"]))

    if cross_kv is not None:
        h = _affine_norm(x, params, prefix, "lnc")
        q = _linear(h, params[f"{prefix}.cwq"], params[f"{prefix}.cqb"])
        k = _linear(cross_kv, params[f"{prefix}.cwk"], params[f"{prefix}.ckb"])
        v = _linear(cross_kv, params[f"{prefix}.cwv"], params[f"{prefix}.cvb"])
        a = ad.attention(q, k, v, n_heads)
        x = ad.add(x, _linear(a, params[f"{prefix}.cwo"], params[f"{prefix}.cob"]))

    h = _affine_norm(x, params, prefix, "ln2")
    m = ad.gelu(_linear(h, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.add(x, _linear(m, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def standardize_image(image: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-image zero mean / unit variance; drops the uninformative DC level."""
    return (image - image.mean()) / (image.std() + eps)


def encode_image(image, cfg: EncoderConfig, params) -> Tensor:
    """Image -> token features (n_patches, embed_dim).

    The input is standardized per image before patch embedding, so global
    brightness and contrast carry no signal.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"encode_image: image {image.shape} does not match configured size "
            f"{cfg.image_size}"
        )
    patches = Tensor(patchify(standardize_image(image), cfg.patch_size))
    x = _linear(patches, params["img.patch_w"], params["img.patch_b"])
    x = ad.add(x, params["img.pos"])
    for i in range(cfg.n_layers):
        x = block_forward(x, params, f"img.l{i}", cfg.n_heads)
    x = _affine_norm(x, params, "img", "lnf")
    return _linear(x, params["img.proj_w"], params["img.proj_b"])


def encode_text(tokens: TokenSeq, cfg: EncoderConfig, params) -> Tensor:
    """Token sequence -> features (len, embed_dim).

    Bidirectional self-attention over valid positions; padded positions are
    hidden from every query, so features at valid positions do not depend on
    trailing padding.
    """
    n = len(tokens)
    if n == 0:
        raise ShapeError("encode_text: empty token sequence")
    if n > cfg.max_text_len:
        raise ShapeError(
            f"encode_text: sequence of {n} tokens exceeds max_text_len "
            f"{cfg.max_text_len}"
        )
    if int(tokens.ids.max()) >= cfg.vocab_size:
        raise ValueError(
            f"encode_text: token id {int(tokens.ids.max())} outside vocabulary "
            f"of size {cfg.vocab_size}"
        )
    x = ad.take_rows(params["txt.embed"], tokens.ids)
    x = ad.add(x, ad.take_rows(params["txt.pos"], np.arange(n)))
    allowed = np.broadcast_to(tokens.valid, (n, n)) if not tokens.valid.all() else None
    for i in range(cfg.n_layers):
        x = block_forward(x, params, f"txt.l{i}", cfg.n_heads, allowed=allowed)
    x = _affine_norm(x, params, "txt", "lnf")
    return _linear(x, params["txt.proj_w"], params["txt.proj_b"])


def pool_global(features: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Mean over valid token rows, then L2-normalized to unit norm."""
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if not valid.any():
            raise ValueError("pool_global: no valid positions")
        if not valid.all():
            features = ad.take_rows(features, np.flatnonzero(valid))
    return ad.l2_normalize(ad.mean_rows(features))
