"""Masked contrastive vision-language pretraining at laptop scale.

Deterministic float64 implementation of a three-task pretraining objective
(contrastive alignment, attention-guided masked image modeling and
entity-masked language modeling) over synthetic paired/unpaired chest-image
corpora, with a zero-shot / linear-probe evaluation kit and a CLI.
"""

from .autodiff import Tensor, finite_diff_check, no_grad, sgd_step
from .datagen import CONDITIONS, Corpus, CorpusSpec, SampleRecord, load_corpus, write_corpus
from .encoders import EncoderConfig, encode_image, encode_text, pool_global
from .estimators import (
    LinearProbeClassifier,
    MaskedPretrainer,
    ZeroShotPromptClassifier,
)
from .evalkit import EvalReport, auc, ensemble_scores, f1_acc, zero_shot_scores
from .image_masking import MaskConfig, TokenMask
from .objectives import DecoderConfig, LossBundle
from .rng import RngStream
from .text_masking import AttnMatrix, EntityLexicon
from .trainer import TrainConfig, run
from .tokenizer import TokenSeq, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "AttnMatrix",
    "CONDITIONS",
    "Corpus",
    "CorpusSpec",
    "DecoderConfig",
    "EncoderConfig",
    "EntityLexicon",
    "EvalReport",
    "LinearProbeClassifier",
    "LossBundle",
    "MaskConfig",
    "MaskedPretrainer",
    "RngStream",
    "SampleRecord",
    "Tensor",
    "TokenMask",
    "TokenSeq",
    "TrainConfig",
    "Vocabulary",
    "ZeroShotPromptClassifier",
    "auc",
    "encode_image",
    "encode_text",
    "ensemble_scores",
    "f1_acc",
    "finite_diff_check",
    "load_corpus",
    "no_grad",
    "pool_global",
    "run",
    "sgd_step",
    "write_corpus",
    "zero_shot_scores",
]
