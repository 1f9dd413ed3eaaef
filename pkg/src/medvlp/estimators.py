"""Scikit-learn style wrappers around the pretraining pipeline.

``MaskedPretrainer.fit`` runs the full two-phase training on a corpus (or a
plain list of sample records) and ``transform`` maps image arrays to pooled
unit-norm features. ``ZeroShotPromptClassifier`` scores images against the
per-class disease prompts of a fitted pretrainer; ``LinearProbeClassifier``
is a frozen-feature multi-label logistic head trained with the same SGD.
All three follow the estimator contract (``get_params`` / ``set_params`` /
``clone``), so they compose with pipelines and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array

from .autodiff import sgd_step
from .datagen import Corpus, build_vocabulary, default_lexicon
from .encoders import EncoderConfig
from .evalkit import image_features, prompt_features, train_linear_head
from .image_masking import MaskConfig
from .objectives import DecoderConfig
from .trainer import TrainConfig, fit_state


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate a batch of square grayscale images shaped (B, H, W)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None, :, :]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(
            f"expected images shaped (n_samples, size, size), got {X.shape}"
        )
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(
            f"images are {X.shape[1]}x{X.shape[2]} but the model expects "
            f"{image_size}x{image_size}"
        )
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


class MaskedPretrainer(BaseEstimator, TransformerMixin):
    """Two-phase masked/contrastive pretraining as a fit/transform estimator."""

    def __init__(
        self,
        image_size=32,
        patch_size=8,
        embed_dim=64,
        n_layers=2,
        n_heads=4,
        max_text_len=128,
        image_decoder_layers=2,
        text_decoder_layers=2,
        lambda1=0.7,
        lambda2=0.75,
        lambda3=0.2,
        lr=5e-5,
        momentum=0.9,
        batch_size=8,
        warmup_iters=300,
        total_iters=1500,
        unpaired_fraction=0.25,
        use_mim=True,
        use_mlm=True,
        warmup_mlm=True,
        mim_masking="attention",
        mlm_scope="entity",
        temperature=0.07,
        learnable_temperature=False,
        normalize_mim_targets=True,
        seed=0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_text_len = max_text_len
        self.image_decoder_layers = image_decoder_layers
        self.text_decoder_layers = text_decoder_layers
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.warmup_iters = warmup_iters
        self.total_iters = total_iters
        self.unpaired_fraction = unpaired_fraction
        self.use_mim = use_mim
        self.use_mlm = use_mlm
        self.warmup_mlm = warmup_mlm
        self.mim_masking = mim_masking
        self.mlm_scope = mlm_scope
        self.temperature = temperature
        self.learnable_temperature = learnable_temperature
        self.normalize_mim_targets = normalize_mim_targets
        self.seed = seed

    def build_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            warmup_iters=self.warmup_iters,
            total_iters=self.total_iters,
            seed=self.seed,
            unpaired_fraction=self.unpaired_fraction,
            mask_config=MaskConfig(self.lambda1, self.lambda2, self.lambda3),
            encoder=EncoderConfig(
                image_size=self.image_size,
                patch_size=self.patch_size,
                embed_dim=self.embed_dim,
                n_layers=self.n_layers,
                n_heads=self.n_heads,
                max_text_len=self.max_text_len,
            ),
            decoder=DecoderConfig(
                image_decoder_layers=self.image_decoder_layers,
                text_decoder_layers=self.text_decoder_layers,
            ),
            use_mim=self.use_mim,
            use_mlm=self.use_mlm,
            warmup_mlm=self.warmup_mlm,
            mim_masking=self.mim_masking,
            mlm_scope=self.mlm_scope,
            temperature=self.temperature,
            learnable_temperature=self.learnable_temperature,
            normalize_mim_targets=self.normalize_mim_targets,
        )

    def fit(self, X, y=None):
        """Train on a ``Corpus`` or an iterable of ``SampleRecord``."""
        corpus = (
            X
            if isinstance(X, Corpus)
            else Corpus(
                records=list(X), vocab=build_vocabulary(), lexicon=default_lexicon()
            )
        )
        state = fit_state(self.build_config(), corpus)
        self.state_ = state
        self.params_ = state.params
        self.enc_cfg_ = state.enc_cfg
        self.vocab_ = state.vocab
        self.n_classes_ = corpus.n_classes
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("MaskedPretrainer is not fitted yet")

    def transform(self, X) -> np.ndarray:
        """Images (B, H, W) -> pooled unit-norm features (B, embed_dim)."""
        self._check_fitted()
        X = check_images(X, self.enc_cfg_.image_size)
        return image_features(X, self.enc_cfg_, self.params_)


class ZeroShotPromptClassifier(BaseEstimator):
    """Multi-label zero-shot scoring against per-class disease prompts."""

    def __init__(self, model: MaskedPretrainer | None = None, threshold=0.0):
        self.model = model
        self.threshold = threshold

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("ZeroShotPromptClassifier needs a fitted model")
        self.model._check_fitted()
        self.prompt_features_ = prompt_features(
            self.model.vocab_,
            self.model.n_classes_,
            self.model.enc_cfg_,
            self.model.params_,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "prompt_features_"):
            raise NotFittedError("ZeroShotPromptClassifier is not fitted yet")

    def decision_function(self, X) -> np.ndarray:
        """Per-class cosine scores (B, K); no softmax across classes."""
        self._check_fitted()
        X = check_images(X, self.model.enc_cfg_.image_size)
        feats = image_features(X, self.model.enc_cfg_, self.model.params_)
        return feats @ self.prompt_features_.T

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= self.threshold).astype(np.int8)


class LinearProbeClassifier(BaseEstimator):
    """Multi-label logistic head over fixed feature vectors."""

    def __init__(self, lr=0.5, momentum=0.9, iters=300, threshold=0.0):
        self.lr = lr
        self.momentum = momentum
        self.iters = iters
        self.threshold = threshold

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != X.shape[0]:
            raise ValueError(
                f"X has {X.shape[0]} rows but y has {y.shape[0]}"
            )
        w, b = train_linear_head(
            X, y.astype(np.float64), self.lr, self.momentum, self.iters
        )
        self.coef_ = w.data
        self.intercept_ = b.data
        return self

    def decision_function(self, X) -> np.ndarray:
        if not hasattr(self, "coef_"):
            raise NotFittedError("LinearProbeClassifier is not fitted yet")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= self.threshold).astype(np.int8)
