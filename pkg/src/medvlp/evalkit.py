"""Zero-shot scoring, classification metrics, linear probing, ensembling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .datagen import SampleRecord, disease_prompts
from .encoders import EncoderConfig, encode_image, encode_text, pool_global
from .image_masking import round_half_up
from .rng import RngStream, sample_without_replacement


@dataclass
class EvalReport:
    """Per-class and macro metrics for one evaluation."""

    per_class_auc: list[float]
    per_class_f1: list[float]
    per_class_acc: list[float]
    macro_auc: float
    macro_f1: float
    macro_acc: float
    n_samples: int
    checkpoints: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_scores(
        cls, scores: np.ndarray, labels: np.ndarray, threshold: float = 0.0,
        checkpoints: list[str] | None = None,
    ) -> "EvalReport":
        aucs, f1s, accs = [], [], []
        for k in range(scores.shape[1]):
            aucs.append(auc(scores[:, k], labels[:, k]))
            f1, acc = f1_acc(scores[:, k], labels[:, k], threshold)
            f1s.append(f1)
            accs.append(acc)
        return cls(
            per_class_auc=aucs,
            per_class_f1=f1s,
            per_class_acc=accs,
            macro_auc=float(np.mean(aucs)),
            macro_f1=float(np.mean(f1s)),
            macro_acc=float(np.mean(accs)),
            n_samples=scores.shape[0],
            checkpoints=list(checkpoints or []),
        )


# ---------------------------------------------------------------------------
# Feature extraction (forward only)
# ---------------------------------------------------------------------------


def image_features(images, cfg: EncoderConfig, params) -> np.ndarray:
    """Pooled unit-norm image features, one row per image."""
    with ad.no_grad():
        rows = [
            pool_global(encode_image(img, cfg, params)).data for img in images
        ]
    return np.stack(rows, axis=0)


def prompt_features(vocab, n_classes: int, cfg: EncoderConfig, params) -> np.ndarray:
    """Pooled unit-norm features of each per-class prompt."""
    with ad.no_grad():
        rows = [
            pool_global(encode_text(seq, cfg, params)).data
            for seq in disease_prompts(vocab, n_classes)
        ]
    return np.stack(rows, axis=0)


def zero_shot_scores(images, class_prompts, params, cfg: EncoderConfig):
    """Cosine similarity of pooled image and prompt features, (B, K).

    ``class_prompts`` is a list of TokenSeq (one per class); features are
    unit-norm, so the score is a plain dot product with no cross-class
    softmax.
    """
    if not class_prompts:
        raise ShapeError("zero_shot_scores: need at least one class prompt")
    with ad.no_grad():
        prompts = np.stack(
            [pool_global(encode_text(seq, cfg, params)).data for seq in class_prompts]
        )
    feats = image_features(images, cfg, params)
    return feats @ prompts.T


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted half.

    Computed with midranks; exactly equal to the exhaustive pairwise count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"auc: shapes {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"auc undefined: need both classes, got {n_pos} positives and "
            f"{n_neg} negatives"
        )
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_acc(scores, labels, threshold: float = 0.0) -> tuple[float, float]:
    """Binary F1 and accuracy at ``score >= threshold``.

    With no predicted and no actual positives F1 is defined as 1.0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not np.isfinite(threshold):
        raise ValueError("f1_acc: threshold must be finite")
    pred = scores >= threshold
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    acc = float((pred == labels).mean())
    denom = 2 * tp + fp + fn
    f1 = 1.0 if denom == 0 else 2.0 * tp / denom
    return f1, acc


def ensemble_scores(score_matrices: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of per-checkpoint score matrices."""
    if not score_matrices:
        raise ValueError("ensemble_scores: empty list")
    mats = [np.asarray(m, dtype=np.float64) for m in score_matrices]
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ShapeError(f"ensemble_scores: shape mismatch {m.shape} vs {shape}")
    return np.mean(mats, axis=0)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


def train_linear_head(
    features: np.ndarray,
    labels: np.ndarray,
    lr: float,
    momentum: float,
    iters: int,
) -> tuple[Tensor, Tensor]:
    """Multi-label logistic head on frozen features, full-batch SGD."""
    n, c = features.shape
    k = labels.shape[1]
    w = Tensor(np.zeros((c, k)), requires_grad=True)
    b = Tensor(np.zeros(k), requires_grad=True)
    vel = [Tensor(np.zeros((c, k))), Tensor(np.zeros(k))]
    x = Tensor(features)
    y = labels.astype(np.float64)
    for _ in range(iters):
        w.grad = b.grad = None
        z = ad.add(ad.matmul(x, w), b)
        # mean BCE-with-logits: softplus(z) - y * z
        loss = ad.mean_all(ad.sub(ad.softplus(z), ad.mul(Tensor(y), z)))
        loss.backward()
        ad.sgd_step([w, b], [w.grad, b.grad], lr, momentum, vel)
    return w, b


def linear_probe(
    train_records: list[SampleRecord],
    eval_records: list[SampleRecord],
    fraction: float,
    cfg: EncoderConfig,
    params,
    seed: int = 0,
    lr: float = 0.5,
    momentum: float = 0.9,
    iters: int = 300,
    checkpoints: list[str] | None = None,
) -> EvalReport:
    """Fit a linear head on a seeded fraction of the frozen-feature training
    pool and report metrics on the held-out records."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"linear_probe: fraction must be in (0, 1], got {fraction}")
    n_take = round_half_up(fraction * len(train_records))
    if n_take == 0:
        raise ValueError("linear_probe: selected subset is empty")
    rng = RngStream(seed).child("probe")
    chosen_idx = sample_without_replacement(rng, range(len(train_records)), n_take)
    chosen = [train_records[i] for i in sorted(chosen_idx)]

    y_train = np.stack([r.labels for r in chosen]).astype(np.float64)
    missing = [int(k) for k in range(y_train.shape[1]) if y_train[:, k].sum() == 0]
    if missing:
        raise ValueError(
            f"linear_probe: selected subset has no positive sample for class(es) "
            f"{missing}"
        )
    x_train = image_features([r.image for r in chosen], cfg, params)
    w, b = train_linear_head(x_train, y_train, lr, momentum, iters)

    x_eval = image_features([r.image for r in eval_records], cfg, params)
    y_eval = np.stack([r.labels for r in eval_records])
    scores = x_eval @ w.data + b.data
    return EvalReport.from_scores(scores, y_eval, 0.0, checkpoints=checkpoints)
