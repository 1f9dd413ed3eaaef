import numpy as np
import pytest

from medvlp.autodiff import ShapeError, Tensor
from medvlp.encoders import EncoderConfig
from medvlp.image_masking import TokenMask
from medvlp.objectives import DecoderConfig, decode_text, init_decoder_params
from medvlp.rng import RngStream
from medvlp.text_masking import (
    AttnMatrix,
    EntityLexicon,
    apply_text_mask,
    causal_mask,
    combine_masks,
    entity_mask,
    recognize_entities,
)
from medvlp.tokenizer import Vocabulary, pad_to

LEX = EntityLexicon.from_pairs(
    [
        ("edema", "edema"),
        ("pneumonia", "pneumonia"),
        ("pleural effusion", "pleural effusion"),
        ("effusion", "pleural effusion"),
    ]
)
VOCAB = Vocabulary.build(
    ["mild", "edema", "noted", "pleural", "effusion", "seen", "clear", "lungs"]
)


class TestLexicon:
    def test_round_trip(self, tmp_path):
        LEX.save(tmp_path / "lex.tsv")
        loaded = EntityLexicon.load(tmp_path / "lex.tsv")
        assert loaded.terms == LEX.terms

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            EntityLexicon.from_pairs([])

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            EntityLexicon.from_pairs([("edema", "a"), ("Edema", "b")])

    def test_malformed_line_reports_position(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("edema\tedema\nbroken line\n")
        with pytest.raises(ValueError, match="bad.tsv:2"):
            EntityLexicon.load(tmp_path / "bad.tsv")


class TestRecognizeEntities:
    def test_single_word_match(self):
        tokens = VOCAB.encode("mild edema noted")
        assert recognize_entities(tokens, LEX) == [1]

    def test_no_match_is_empty(self):
        tokens = VOCAB.encode("clear lungs")
        assert recognize_entities(tokens, LEX) == []

    def test_multi_word_longest_match(self):
        tokens = VOCAB.encode("pleural effusion seen")
        assert recognize_entities(tokens, LEX) == [0, 1]

    def test_longest_match_wins_over_submatch(self):
        # "effusion" alone is also a term; the two-word term must claim both
        # positions with no overlapping rematch.
        tokens = VOCAB.encode("pleural effusion effusion")
        assert recognize_entities(tokens, LEX) == [0, 1, 2]

    def test_invariant_to_trailing_padding(self):
        tokens = VOCAB.encode("mild edema noted")
        assert recognize_entities(pad_to(tokens, 10), LEX) == [1]

    def test_exhaustive_scan_oracle(self):
        words = ["mild", "edema", "seen", "pneumonia", "noted", "edema"]
        tokens = VOCAB.encode(" ".join(words))
        single_word_terms = {k[0] for k in LEX.terms if len(k) == 1}
        expected = [i for i, w in enumerate(words) if w in single_word_terms]
        assert recognize_entities(tokens, LEX) == expected


class TestEntityMask:
    def test_lambda_one_takes_all(self):
        out = entity_mask([2, 5, 7], 10, 1.0, RngStream(0))
        assert out.masked == (2, 5, 7)
        assert out.provenance == "entity"

    def test_lambda_zero_or_no_entities_empty(self):
        assert entity_mask([1, 2], 5, 0.0, RngStream(0)).masked == ()
        assert entity_mask([], 5, 1.0, RngStream(0)).masked == ()

    def test_cardinality_and_subset(self):
        entities = list(range(0, 20, 2))
        out = entity_mask(entities, 20, 0.2, RngStream(3))
        assert len(out) == 2
        assert set(out.masked) <= set(entities)

    def test_always_subset_of_entities(self):
        rng = np.random.default_rng(4)
        for trial in range(30):
            n = int(rng.integers(1, 30))
            entities = sorted(
                rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False).tolist()
            )
            lam = float(rng.uniform())
            out = entity_mask(entities, n, lam, RngStream(trial))
            assert set(out.masked) <= set(entities)


class TestCausalMask:
    def test_single_position(self):
        assert causal_mask(1).allowed.tolist() == [[True]]

    def test_lower_triangular_count(self):
        allowed = causal_mask(3).allowed
        assert allowed.sum() == 6
        assert np.array_equal(allowed, np.tril(np.ones((3, 3), dtype=bool)))

    def test_row_sums_count_up(self):
        allowed = causal_mask(7).allowed
        assert allowed.sum(axis=1).tolist() == list(range(1, 8))

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            causal_mask(0)


class TestCombineMasks:
    def test_empty_entity_mask_is_identity(self):
        causal = causal_mask(5)
        out = combine_masks(causal, TokenMask(5, (), "entity"))
        assert np.array_equal(out.allowed, causal.allowed)

    def test_all_masked_leaves_only_diagonal(self):
        out = combine_masks(causal_mask(4), TokenMask(4, (0, 1, 2, 3), "entity"))
        assert np.array_equal(out.allowed, np.eye(4, dtype=bool))

    def test_double_loop_oracle(self):
        ent = TokenMask(4, (1,), "entity")
        out = combine_masks(causal_mask(4), ent)
        expected = np.zeros((4, 4), dtype=bool)
        for i in range(4):
            for j in range(4):
                expected[i, j] = (j <= i) and (j not in ent.masked or j == i)
        assert np.array_equal(out.allowed, expected)
        # column 1 cleared for rows 2 and 3, kept on the diagonal
        assert not out.allowed[2, 1] and not out.allowed[3, 1]
        assert out.allowed[1, 1]

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            combine_masks(causal_mask(4), TokenMask(5, (0,), "entity"))


class TestApplyTextMask:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.e = Tensor(rng.normal(size=(5, 4)))
        self.emb = Tensor(rng.normal(size=4))
        self.pos = Tensor(rng.normal(size=(5, 4)))

    def test_empty_mask_identity(self):
        out = apply_text_mask(self.e, TokenMask(5, (), "entity"), self.emb, self.pos)
        assert np.array_equal(out.data, self.e.data)

    def test_full_replacement(self):
        out = apply_text_mask(
            self.e, TokenMask(5, tuple(range(5)), "entity"), self.emb, self.pos
        )
        assert np.allclose(out.data, self.emb.data + self.pos.data, atol=1e-12)

    def test_single_position_replacement(self):
        out = apply_text_mask(self.e, TokenMask(5, (2,), "entity"), self.emb, self.pos)
        assert np.array_equal(out.data[[0, 1, 3, 4]], self.e.data[[0, 1, 3, 4]])
        assert np.allclose(out.data[2], self.emb.data + self.pos.data[2], atol=1e-12)


# ---------------------------------------------------------------------------
# Decoder visibility contracts
# ---------------------------------------------------------------------------


def toy_decoder():
    enc_cfg = EncoderConfig(
        image_size=16, patch_size=8, embed_dim=8, n_layers=1, n_heads=2,
        vocab_size=9, max_text_len=16,
    )
    dec_cfg = DecoderConfig(image_decoder_layers=1, text_decoder_layers=2)
    params = init_decoder_params(enc_cfg, dec_cfg, RngStream(21))
    return enc_cfg, dec_cfg, params


def decoder_outputs(e_rep_data, ent, enc_cfg, dec_cfg, params, e_img):
    n = e_rep_data.shape[0]
    attn = combine_masks(causal_mask(n), ent)
    mlm_input = apply_text_mask(
        Tensor(e_rep_data), ent, params["txtdec.mask_emb"], params["txtdec.pos"]
    )
    return decode_text(mlm_input, attn, e_img, enc_cfg, dec_cfg, params).data


class TestHiddenEntityProperty:
    def test_perturbing_masked_entity_changes_no_other_position(self):
        enc_cfg, dec_cfg, params = toy_decoder()
        rng = np.random.default_rng(6)
        e_img = Tensor(rng.normal(size=(4, 8)))
        e_rep = rng.normal(size=(7, 8))
        ent = TokenMask(7, (2, 5), "entity")
        base = decoder_outputs(e_rep, ent, enc_cfg, dec_cfg, params, e_img)
        for p in ent.masked:
            bumped = e_rep.copy()
            bumped[p] += rng.normal(size=8)
            out = decoder_outputs(bumped, ent, enc_cfg, dec_cfg, params, e_img)
            others = [i for i in range(7) if i != p]
            assert np.abs(out[others] - base[others]).max() < 1e-9

    def test_perturbing_unmasked_token_does_propagate(self):
        enc_cfg, dec_cfg, params = toy_decoder()
        rng = np.random.default_rng(7)
        e_img = Tensor(rng.normal(size=(4, 8)))
        e_rep = rng.normal(size=(7, 8))
        ent = TokenMask(7, (2,), "entity")
        base = decoder_outputs(e_rep, ent, enc_cfg, dec_cfg, params, e_img)
        bumped = e_rep.copy()
        bumped[1] += rng.normal(size=8)  # uniform shifts are layer-norm invisible
        out = decoder_outputs(bumped, ent, enc_cfg, dec_cfg, params, e_img)
        assert np.abs(out[3] - base[3]).max() > 1e-9  # later position sees it


class TestPrefixCausality:
    def test_truncation_preserves_prefix_outputs(self):
        enc_cfg, dec_cfg, params = toy_decoder()
        rng = np.random.default_rng(8)
        e_img = Tensor(rng.normal(size=(4, 8)))
        e_rep = rng.normal(size=(12, 8))
        ent = TokenMask(12, (3, 8), "entity")
        full = decoder_outputs(e_rep, ent, enc_cfg, dec_cfg, params, e_img)
        for t in range(1, 12):
            ent_t = TokenMask(t, tuple(i for i in ent.masked if i < t), "entity")
            trunc = decoder_outputs(e_rep[:t], ent_t, enc_cfg, dec_cfg, params, e_img)
            assert np.abs(trunc - full[:t]).max() < 1e-9
