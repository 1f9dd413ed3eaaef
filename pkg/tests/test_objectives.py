import math

import numpy as np
import pytest

from oracles import oracle_decode_image, oracle_decode_text, oracle_info_nce

from medvlp import autodiff as ad
from medvlp.autodiff import Tensor, finite_diff_check
from medvlp.encoders import EncoderConfig
from medvlp.image_masking import TokenMask
from medvlp.objectives import (
    DecoderConfig,
    compose_losses,
    decode_image,
    decode_text,
    init_decoder_params,
    loss_align,
    loss_mim,
    loss_mlm,
    mixed_batch_total,
    standardize_patches,
)
from medvlp.rng import RngStream
from medvlp.text_masking import AttnMatrix, causal_mask
from medvlp.tokenizer import Vocabulary


def unit_rows(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestLossAlign:
    def test_batch_of_one_is_zero(self):
        x = Tensor(unit_rows([[1.0, 0.0]]))
        assert float(loss_align(x, x, 0.07).data) == 0.0

    def test_identical_rows_give_two_log_b(self):
        row = unit_rows([[0.6, 0.8]])[0]
        x = Tensor(np.tile(row, (4, 1)))
        out = loss_align(x, Tensor(x.data.copy()), 0.07)
        assert abs(float(out.data) - 2.0 * math.log(4.0)) < 1e-9

    def test_orthonormal_pair_closed_form(self):
        x = Tensor(np.eye(2))
        out = loss_align(x, Tensor(np.eye(2)), 1.0)
        expected = 2.0 * math.log(1.0 + math.exp(-1.0))
        assert abs(float(out.data) - expected) < 1e-12

    def test_matches_bruteforce_summation(self):
        rng = np.random.default_rng(0)
        x = unit_rows(rng.normal(size=(5, 4)))
        y = unit_rows(rng.normal(size=(5, 4)))
        out = loss_align(Tensor(x), Tensor(y), 0.3)
        assert abs(float(out.data) - oracle_info_nce(x, y, 0.3)) < 1e-10

    def test_symmetric_under_swap(self):
        rng = np.random.default_rng(1)
        x = Tensor(unit_rows(rng.normal(size=(4, 3))))
        y = Tensor(unit_rows(rng.normal(size=(4, 3))))
        assert float(loss_align(x, y, 0.1).data) == pytest.approx(
            float(loss_align(y, x, 0.1).data), abs=1e-12
        )

    def test_invariant_under_joint_row_permutation(self):
        rng = np.random.default_rng(2)
        x = unit_rows(rng.normal(size=(5, 4)))
        y = unit_rows(rng.normal(size=(5, 4)))
        perm = rng.permutation(5)
        a = loss_align(Tensor(x), Tensor(y), 0.2)
        b = loss_align(Tensor(x[perm]), Tensor(y[perm]), 0.2)
        assert abs(float(a.data) - float(b.data)) < 1e-12

    def test_nonfinite_input_rejected(self):
        bad = np.ones((2, 2))
        bad[0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            loss_align(Tensor(bad), Tensor(np.ones((2, 2))), 0.07)

    def test_gradient_wrt_features(self):
        # the formula is differentiable for any finite rows, so the check can
        # perturb raw (not re-normalized) features
        rng = np.random.default_rng(3)
        y = Tensor(unit_rows(rng.normal(size=(3, 4))))
        p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert finite_diff_check(lambda t: loss_align(t, y, 0.5), p, eps=1e-5) < 1e-6

    def test_learnable_temperature_tensor(self):
        rng = np.random.default_rng(4)
        x = Tensor(unit_rows(rng.normal(size=(3, 4))))
        y = Tensor(unit_rows(rng.normal(size=(3, 4))))
        log_sigma = Tensor(math.log(0.07), requires_grad=True)

        def loss(t):
            return loss_align(x, y, ad.exp(t))

        fixed = loss_align(x, y, 0.07)
        assert float(loss(log_sigma).data) == pytest.approx(
            float(fixed.data), abs=1e-12
        )
        assert finite_diff_check(loss, log_sigma, eps=1e-5) < 1e-6


def toy_model():
    enc_cfg = EncoderConfig(
        image_size=16, patch_size=8, embed_dim=8, n_layers=1, n_heads=2,
        vocab_size=9, max_text_len=16,
    )
    dec_cfg = DecoderConfig(image_decoder_layers=1, text_decoder_layers=1)
    params = init_decoder_params(enc_cfg, dec_cfg, RngStream(33))
    return enc_cfg, dec_cfg, params


class TestDecodeImage:
    def test_shape_contract(self):
        enc_cfg, dec_cfg, params = toy_model()
        x = Tensor(np.random.default_rng(5).normal(size=(4, 8)))
        out = decode_image(x, enc_cfg, dec_cfg, params)
        assert out.shape == (4, 64)  # 8x8 patches

    def test_repeatable(self):
        enc_cfg, dec_cfg, params = toy_model()
        x = np.random.default_rng(6).normal(size=(4, 8))
        a = decode_image(Tensor(x), enc_cfg, dec_cfg, params)
        b = decode_image(Tensor(x.copy()), enc_cfg, dec_cfg, params)
        assert np.array_equal(a.data, b.data)

    def test_matches_straight_line_oracle(self):
        enc_cfg, dec_cfg, params = toy_model()
        x = np.random.default_rng(7).normal(size=(4, 8))
        out = decode_image(Tensor(x), enc_cfg, dec_cfg, params)
        expected = oracle_decode_image(x, dec_cfg, enc_cfg.n_heads, params)
        assert np.allclose(out.data, expected, atol=1e-12)


class TestLossMim:
    def test_exact_reconstruction_is_zero(self):
        target = np.random.default_rng(8).normal(size=(4, 6))
        out = loss_mim(Tensor(target.copy()), target, TokenMask(4, (0, 2), "blended"))
        assert float(out.data) == 0.0

    def test_only_masked_rows_count(self):
        target = np.zeros((4, 6))
        pred = np.zeros((4, 6))
        pred[1] = 99.0  # unmasked row, arbitrarily wrong
        out = loss_mim(Tensor(pred), target, TokenMask(4, (0, 3), "blended"))
        assert float(out.data) == 0.0

    def test_single_row_closed_form(self):
        target = np.zeros((3, 4))
        pred = np.zeros((3, 4))
        pred[1] = [1.0, -1.0, 0.0, 0.0]
        out = loss_mim(Tensor(pred), target, TokenMask(3, (1,), "blended"))
        assert float(out.data) == pytest.approx(0.5, abs=1e-12)

    def test_empty_mask_warns_and_returns_zero(self):
        with pytest.warns(RuntimeWarning):
            out = loss_mim(
                Tensor(np.ones((2, 2))), np.zeros((2, 2)), TokenMask(2, (), "blended")
            )
        assert float(out.data) == 0.0

    def test_gradient_isolated_to_masked_rows(self):
        target = np.zeros((4, 3))
        pred = Tensor(np.random.default_rng(9).normal(size=(4, 3)), requires_grad=True)
        loss_mim(pred, target, TokenMask(4, (1, 2), "blended")).backward()
        assert np.array_equal(pred.grad[0], np.zeros(3))
        assert np.array_equal(pred.grad[3], np.zeros(3))
        assert np.abs(pred.grad[1]).max() > 0

    def test_gradient_matches_finite_differences(self):
        target = np.random.default_rng(10).normal(size=(4, 3))
        p = Tensor(np.random.default_rng(11).normal(size=(4, 3)), requires_grad=True)
        err = finite_diff_check(
            lambda t: loss_mim(t, target, TokenMask(4, (0, 2), "blended")), p
        )
        assert err < 1e-6


class TestDecodeText:
    def test_shape_contract(self):
        enc_cfg, dec_cfg, params = toy_model()
        x = Tensor(np.random.default_rng(12).normal(size=(5, 8)))
        e_img = Tensor(np.random.default_rng(13).normal(size=(4, 8)))
        out = decode_text(x, causal_mask(5), e_img, enc_cfg, dec_cfg, params)
        assert out.shape == (5, 9)

    def test_matches_straight_line_oracle(self):
        enc_cfg, dec_cfg, params = toy_model()
        rng = np.random.default_rng(14)
        x = rng.normal(size=(5, 8))
        e_img = rng.normal(size=(4, 8))
        attn = causal_mask(5)
        out = decode_text(Tensor(x), attn, Tensor(e_img), enc_cfg, dec_cfg, params)
        expected = oracle_decode_text(
            x, attn.allowed, e_img, dec_cfg, enc_cfg.n_heads, params
        )
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_zero_image_features_reduce_cross_attention_to_value_bias(self):
        # with all-zero image tokens every key and value equals its bias, so
        # cross-attention adds the same vector regardless of token count
        enc_cfg, dec_cfg, params = toy_model()
        x = Tensor(np.random.default_rng(15).normal(size=(5, 8)))
        out4 = decode_text(
            x, causal_mask(5), Tensor(np.zeros((4, 8))), enc_cfg, dec_cfg, params
        )
        out9 = decode_text(
            x, causal_mask(5), Tensor(np.zeros((9, 8))), enc_cfg, dec_cfg, params
        )
        assert np.allclose(out4.data, out9.data, atol=1e-12)

    def test_permission_size_mismatch_rejected(self):
        enc_cfg, dec_cfg, params = toy_model()
        x = Tensor(np.zeros((5, 8)))
        with pytest.raises(Exception):
            decode_text(
                x, causal_mask(4), Tensor(np.zeros((4, 8))), enc_cfg, dec_cfg, params
            )


class TestLossMlm:
    def vocab_seq(self, text="mild edema noted"):
        vocab = Vocabulary.build(["mild", "edema", "noted"])
        return vocab, vocab.encode(text)

    def test_confident_correct_logits_near_zero(self):
        vocab, seq = self.vocab_seq()
        logits = np.zeros((3, len(vocab)))
        for t in range(3):
            logits[t, seq.ids[t]] = 20.0
        out = loss_mlm(Tensor(logits), seq, [0, 1, 2])
        assert float(out.data) <= 1e-6

    def test_uniform_logits_log_vocab(self):
        vocab = Vocabulary.build(["a", "b", "c"])  # 5 specials + 3 = 8
        assert len(vocab) == 8
        seq = vocab.encode("a b c")
        out = loss_mlm(Tensor(np.zeros((3, 8))), seq, [0, 2])
        assert abs(float(out.data) - math.log(8.0)) < 1e-9

    def test_hand_computed_two_position_mean(self):
        vocab = Vocabulary.build([])  # 5 specials
        seq = vocab.encode_words(["[BOS]", "[EOS]"])
        logits = np.array(
            [[1.0, 2.0, 0.5, 0.0, 0.0], [0.0, -1.0, 3.0, 0.0, 0.0]]
        )
        # positions 0 and 1, targets are ids 1 ([BOS]) and 2 ([EOS])
        def nll(row, t):
            m = row.max()
            return -(row[t] - m - math.log(np.exp(row - m).sum()))

        expected = (nll(logits[0], 1) + nll(logits[1], 2)) / 2.0
        out = loss_mlm(Tensor(logits), seq, [0, 1])
        assert float(out.data) == pytest.approx(expected, abs=1e-12)

    def test_out_of_vocab_target_rejected(self):
        vocab, seq = self.vocab_seq()
        with pytest.raises(ValueError):
            loss_mlm(Tensor(np.zeros((3, 4))), seq, [0, 1])

    def test_empty_positions_warn_zero(self):
        vocab, seq = self.vocab_seq()
        with pytest.warns(RuntimeWarning):
            out = loss_mlm(Tensor(np.zeros((3, len(vocab)))), seq, [])
        assert float(out.data) == 0.0

    def test_gradient(self):
        vocab, seq = self.vocab_seq()
        p = Tensor(
            np.random.default_rng(16).normal(size=(3, len(vocab))),
            requires_grad=True,
        )
        assert finite_diff_check(lambda t: loss_mlm(t, seq, [0, 2]), p) < 1e-6


class TestComposeLosses:
    def test_paired_sum(self):
        out = compose_losses(Tensor(1.0), Tensor(2.0), Tensor(3.0), paired=True)
        assert float(out.total.data) == 6.0
        assert out.paired

    def test_unpaired_total_is_mim(self):
        out = compose_losses(None, Tensor(2.5), None, paired=False)
        assert float(out.total.data) == 2.5
        assert out.align is None and out.mlm is None

    def test_paired_missing_component_rejected(self):
        with pytest.raises(ValueError):
            compose_losses(None, Tensor(1.0), Tensor(1.0), paired=True)

    def test_unpaired_with_extra_component_rejected(self):
        with pytest.raises(ValueError):
            compose_losses(Tensor(1.0), Tensor(1.0), None, paired=False)

    def test_mixed_batch_expansion(self):
        paired = compose_losses(Tensor(1.0), Tensor(2.0), Tensor(3.0), paired=True)
        unpaired = compose_losses(None, Tensor(2.5), None, paired=False)
        total = mixed_batch_total([paired, unpaired])
        assert float(total.data) == pytest.approx(8.5, abs=1e-12)

    def test_mixed_batch_means_within_groups(self):
        p1 = compose_losses(Tensor(1.0), Tensor(1.0), Tensor(1.0), paired=True)
        p2 = compose_losses(Tensor(2.0), Tensor(2.0), Tensor(2.0), paired=True)
        u1 = compose_losses(None, Tensor(4.0), None, paired=False)
        total = mixed_batch_total([p1, p2, u1])
        assert float(total.data) == pytest.approx((3.0 + 6.0) / 2 + 4.0, abs=1e-12)


def test_standardize_patches_zero_mean_unit_var():
    rows = np.random.default_rng(17).normal(2.0, 3.0, size=(5, 16))
    out = standardize_patches(rows)
    assert np.abs(out.mean(axis=1)).max() < 1e-12
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4
