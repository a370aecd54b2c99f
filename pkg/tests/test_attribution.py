import numpy as np
import pytest

from maskfew import tensor as T
from maskfew.attribution import (AttributionScores, baseline_embedding,
                                 integrated_gradients)
from maskfew.encoder import (CLS_ID, EncoderConfig, PAD_ID, TokenSequence,
                             init_params)
from maskfew.errors import ClassError, ContractError


def seq_of(ids, active=None):
    return TokenSequence(np.array(ids, dtype=np.int64),
                         None if active is None else np.array(active, dtype=bool))


def random_seq(rng, tok, n_words=8):
    ids = [CLS_ID] + list(rng.integers(4, tok, size=n_words))
    return seq_of(ids)


class TestBaseline:
    def test_pad_content_positions_kept(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 7, 9, 12])
        base = baseline_embedding(seq, tiny_params, tiny_cfg).data
        emb = tiny_params["tok_emb"].data
        pos = tiny_params["pos_emb"].data
        assert np.array_equal(base[0], emb[CLS_ID] + pos[0])
        for i in range(1, 4):
            assert np.array_equal(base[i], emb[PAD_ID] + pos[i])


class TestLinearExactness:
    def test_zero_depth_zero_baseline_is_closed_form(self):
        cfg = EncoderConfig(vocab_size=40, max_len=10, d_model=16, n_layers=0,
                            n_heads=2, d_ff=24, n_classes=3)
        params = init_params(cfg, seed=5)
        seq = seq_of([CLS_ID, 6, 11, 30])
        target = 2
        result = integrated_gradients(seq, target, params, steps=13,
                                      baseline="zero")
        x = params["tok_emb"].data[seq.ids] + params["pos_emb"].data[:len(seq)]
        w = params["head.w"].data[:, target]
        # only the CLS row feeds the head; its path weight is w, others zero
        assert abs(result.scores[0] - x[0] @ w) < 1e-10
        assert np.all(np.abs(result.scores[1:]) < 1e-10)
        assert result.completeness_gap < 1e-10


class TestCompleteness:
    def test_gap_small_on_trained_model(self, trained_toy):
        params, tok, enc_cfg, base_train = trained_toy
        rng = np.random.default_rng(2)
        for _ in range(5):
            seq = random_seq(rng, enc_cfg.vocab_size)
            target = int(rng.integers(enc_cfg.n_classes))
            r = integrated_gradients(seq, target, params, steps=256)
            assert r.completeness_gap < 1e-3 * abs(r.delta) + 1e-6

    def test_gap_shrinks_as_steps_double(self, trained_toy):
        params, tok, enc_cfg, _ = trained_toy
        rng = np.random.default_rng(3)
        seq = random_seq(rng, enc_cfg.vocab_size)
        gaps = [integrated_gradients(seq, 1, params, steps=m).completeness_gap
                for m in (32, 64, 128, 256)]
        for small, big in zip(gaps[1:], gaps[:-1]):
            assert small <= big * 1.1

    def test_matches_high_resolution_quadrature(self, trained_toy):
        params, tok, enc_cfg, _ = trained_toy
        rng = np.random.default_rng(4)
        seq = random_seq(rng, enc_cfg.vocab_size, n_words=6)
        coarse = integrated_gradients(seq, 0, params, steps=256)
        fine = integrated_gradients(seq, 0, params, steps=4096)
        assert np.allclose(coarse.scores, fine.scores, atol=1e-5)
        assert fine.completeness_gap <= coarse.completeness_gap + 1e-12


class TestSensitivityAndMasks:
    def test_inactive_positions_score_zero(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 5, 9, 13],
                     [True, True, False, False])
        r = integrated_gradients(seq, 0, tiny_params, steps=16)
        assert np.all(np.abs(r.scores[2:]) < 1e-9)

    def test_pad_token_scores_zero(self, tiny_cfg, tiny_params):
        # a PAD id in the content equals the baseline at its position
        seq = seq_of([CLS_ID, 5, PAD_ID, 13])
        r = integrated_gradients(seq, 1, tiny_params, steps=16)
        assert abs(r.scores[2]) < 1e-9

    def test_cls_scores_zero_with_pad_baseline(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 5, 9])
        r = integrated_gradients(seq, 1, tiny_params, steps=16)
        assert abs(r.scores[0]) < 1e-9


class TestContracts:
    def test_target_out_of_range(self, tiny_cfg, tiny_params):
        with pytest.raises(ClassError):
            integrated_gradients(seq_of([CLS_ID, 5]), tiny_cfg.n_classes,
                                 tiny_params, steps=4)

    def test_steps_positive(self, tiny_cfg, tiny_params):
        with pytest.raises(ContractError):
            integrated_gradients(seq_of([CLS_ID, 5]), 0, tiny_params, steps=0)

    def test_scores_aligned_with_sequence(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 5, 6])
        with pytest.raises(ContractError):
            AttributionScores(seq_ref=seq, target_class=0,
                              scores=np.zeros(2), steps=1, completeness_gap=0.0)

    def test_deterministic(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 5, 9, 13])
        a = integrated_gradients(seq, 1, tiny_params, steps=32)
        b = integrated_gradients(seq, 1, tiny_params, steps=32)
        assert np.array_equal(a.scores, b.scores)
        assert a.completeness_gap == b.completeness_gap

    def test_leaves_param_grads_untouched(self, tiny_cfg, tiny_params):
        tiny_params.zero_grads()
        integrated_gradients(seq_of([CLS_ID, 5, 9]), 1, tiny_params, steps=8)
        assert all(p.grad is None for p in tiny_params.all())
