import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvlp.autodiff import ShapeError, Tensor
from medvlp.datagen import CorpusSpec, disease_prompts, load_corpus, write_corpus
from medvlp.encoders import EncoderConfig
from medvlp.evalkit import (
    EvalReport,
    auc,
    ensemble_scores,
    f1_acc,
    image_features,
    linear_probe,
    prompt_features,
    train_linear_head,
    zero_shot_scores,
)
from medvlp.rng import RngStream


def brute_force_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_hand_case(self):
        # pairs: (.35,.1)+ (.35,.4)- (.8,.1)+ (.8,.4)+ => 3/4
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_all_ties_half(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="undefined"):
            auc([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError, match="undefined"):
            auc([0.1, 0.2], [0, 0])

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        base = auc(scores, labels)
        assert auc(np.exp(scores), labels) == base
        assert auc(3.0 * scores + 7.0, labels) == base

    def test_negation_complements_without_ties(self):
        rng = np.random.default_rng(1)
        scores = rng.permutation(30).astype(float)  # distinct
        labels = rng.integers(0, 2, size=30)
        labels[0], labels[1] = 0, 1
        assert auc(scores, labels) + auc(-scores, labels) == 1.0

    @given(st.integers(2, 50), st.integers(0, 2**31))
    @settings(max_examples=120, deadline=None)
    def test_matches_exhaustive_pairwise_oracle(self, n, seed):
        rng = np.random.default_rng(seed)
        # quantized scores so ties actually occur
        scores = rng.integers(0, 6, size=n) / 5.0
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert auc(scores, labels) == brute_force_auc(scores, labels)


class TestF1Acc:
    def test_perfect(self):
        assert f1_acc([1.0, 1.0, -1.0], [1, 1, 0]) == (1.0, 1.0)

    def test_all_wrong(self):
        assert f1_acc([1.0, -1.0], [0, 1]) == (0.0, 0.0)

    def test_confusion_matrix_arithmetic(self):
        # 3 TP, 1 FP, 1 FN, 5 TN
        scores = [1, 1, 1, 1, -1, -1, -1, -1, -1, -1]
        labels = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0]
        f1, acc = f1_acc(scores, labels, threshold=0.0)
        assert f1 == pytest.approx(0.75)
        assert acc == pytest.approx(0.8)

    def test_degenerate_definitions(self):
        assert f1_acc([-1.0, -1.0], [0, 0])[0] == 1.0  # nothing to find
        assert f1_acc([-1.0, -1.0], [1, 0])[0] == 0.0  # missed everything

    def test_nonfinite_threshold_rejected(self):
        with pytest.raises(ValueError):
            f1_acc([0.0], [1], threshold=np.inf)


class TestEnsembleScores:
    def test_single_member_identity(self):
        m = np.random.default_rng(2).normal(size=(3, 4))
        assert np.array_equal(ensemble_scores([m]), m)

    def test_identical_members_identity(self):
        m = np.random.default_rng(3).normal(size=(3, 4))
        assert np.allclose(ensemble_scores([m, m.copy()]), m, atol=1e-15)

    def test_elementwise_mean(self):
        out = ensemble_scores([np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])])
        assert np.array_equal(out, np.array([[0.5, 0.5]]))

    def test_permutation_invariant(self):
        mats = [np.random.default_rng(i).normal(size=(2, 3)) for i in range(4)]
        a = ensemble_scores(mats)
        b = ensemble_scores(mats[::-1])
        assert np.allclose(a, b, atol=1e-15)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ensemble_scores([np.zeros((2, 2)), np.zeros((2, 3))])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ensemble_scores([])


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory):
    from medvlp.trainer import TrainConfig, TrainState
    from medvlp.objectives import DecoderConfig

    root = tmp_path_factory.mktemp("evalkit_corpus")
    write_corpus(
        CorpusSpec(n_paired=12, n_unpaired=0, image_size=16, seed=8), root
    )
    corpus = load_corpus(root)
    cfg = TrainConfig(
        total_iters=0,
        warmup_iters=0,
        encoder=EncoderConfig(
            image_size=16, patch_size=8, embed_dim=16, n_heads=2, n_layers=1
        ),
        decoder=DecoderConfig(1, 1),
        seed=1,
    )
    return corpus, TrainState(cfg, corpus)


class TestZeroShotScores:
    def test_shape_and_dot_product_identity(self, tiny_model):
        corpus, state = tiny_model
        images = [r.image for r in corpus.records[:5]]
        prompts = disease_prompts(corpus.vocab, corpus.n_classes)
        scores = zero_shot_scores(images, prompts, state.params, state.enc_cfg)
        assert scores.shape == (5, corpus.n_classes)
        feats = image_features(images, state.enc_cfg, state.params)
        pf = prompt_features(corpus.vocab, corpus.n_classes, state.enc_cfg, state.params)
        assert np.array_equal(scores, feats @ pf.T)
        assert np.abs(scores).max() <= 1.0 + 1e-12  # cosine bound

    def test_prompt_reordering_permutes_columns(self, tiny_model):
        corpus, state = tiny_model
        images = [r.image for r in corpus.records[:4]]
        prompts = disease_prompts(corpus.vocab, corpus.n_classes)
        base = zero_shot_scores(images, prompts, state.params, state.enc_cfg)
        perm = [3, 0, 2, 1, 7, 5, 6, 4]
        shuffled = zero_shot_scores(
            images, [prompts[i] for i in perm], state.params, state.enc_cfg
        )
        assert np.array_equal(shuffled, base[:, perm])

    def test_empty_prompts_rejected(self, tiny_model):
        corpus, state = tiny_model
        with pytest.raises(ShapeError):
            zero_shot_scores([corpus.records[0].image], [], state.params, state.enc_cfg)


class TestLinearHead:
    def test_separable_features_reach_high_accuracy(self):
        rng = np.random.default_rng(4)
        n, c, k = 120, 6, 3
        labels = rng.integers(0, 2, size=(n, k)).astype(np.float64)
        directions = rng.normal(size=(k, c))
        feats = labels @ directions + 0.05 * rng.normal(size=(n, c))
        w, b = train_linear_head(feats, labels, lr=0.5, momentum=0.9, iters=400)
        scores = feats @ w.data + b.data
        report = EvalReport.from_scores(scores, labels.astype(int))
        assert report.macro_acc >= 0.95

    def test_report_metrics_within_bounds(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(30, 4))
        labels = rng.integers(0, 2, size=(30, 4))
        labels[0] = [0, 0, 0, 0]
        labels[1] = [1, 1, 1, 1]
        report = EvalReport.from_scores(scores, labels)
        for metric in (
            report.per_class_auc + report.per_class_f1 + report.per_class_acc
        ):
            assert 0.0 <= metric <= 1.0
        assert report.n_samples == 30


class TestLinearProbe:
    def test_deterministic_per_seed(self, tiny_model):
        corpus, state = tiny_model
        a = linear_probe(
            corpus.records, corpus.records, 0.8, state.enc_cfg, state.params,
            seed=4, iters=10,
        )
        b = linear_probe(
            corpus.records, corpus.records, 0.8, state.enc_cfg, state.params,
            seed=4, iters=10,
        )
        assert a.per_class_auc == b.per_class_auc

    def test_fraction_bounds(self, tiny_model):
        corpus, state = tiny_model
        with pytest.raises(ValueError, match="fraction"):
            linear_probe(
                corpus.records, corpus.records, 0.0, state.enc_cfg, state.params
            )

    def test_missing_class_positive_rejected(self, tiny_model):
        corpus, state = tiny_model
        # fraction small enough that some class has no positive sample
        with pytest.raises(ValueError, match="no positive sample"):
            linear_probe(
                corpus.records, corpus.records, 1 / len(corpus.records),
                state.enc_cfg, state.params, iters=1,
            )
