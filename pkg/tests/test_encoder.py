import numpy as np
import pytest

from maskfew import tensor as T
from maskfew.encoder import (CLS_ID, EncoderConfig, ModelParams, TokenSequence,
                             classify, cls_features, embed, encode,
                             encode_batch, init_params)
from maskfew.errors import ConfigError, ContractError, VocabError
from maskfew.tensor import Tensor

from helpers import central_diff, grads_close


def seq_of(ids, active=None):
    return TokenSequence(np.array(ids, dtype=np.int64),
                         None if active is None else np.array(active, dtype=bool))


class TestConfigAndSequence:
    def test_heads_must_divide_d_model(self):
        with pytest.raises(ConfigError):
            EncoderConfig(d_model=10, n_heads=3)

    def test_cls_required_first(self):
        with pytest.raises(ContractError):
            seq_of([5, 1])

    def test_cls_never_inactive(self):
        with pytest.raises(ContractError):
            seq_of([0, 5], [False, True])

    def test_minimum_length_one(self):
        with pytest.raises(ContractError):
            TokenSequence(np.array([], dtype=np.int64))


class TestEmbed:
    def test_cls_only(self, tiny_cfg, tiny_params):
        out = embed(seq_of([CLS_ID]), tiny_params)
        expected = tiny_params["tok_emb"].data[CLS_ID] + tiny_params["pos_emb"].data[0]
        assert np.array_equal(out.data, expected[None, :])

    def test_positions_are_additive(self, tiny_params):
        out = embed(seq_of([CLS_ID, 9, 9]), tiny_params)
        pos = tiny_params["pos_emb"].data
        assert np.allclose(out.data[1] - out.data[2], pos[1] - pos[2], atol=1e-15)

    def test_zero_tables_give_zero(self, tiny_cfg):
        params = init_params(tiny_cfg, seed=0)
        params["tok_emb"].data[:] = 0.0
        params["pos_emb"].data[:] = 0.0
        out = embed(seq_of([CLS_ID, 3, 4]), params)
        assert np.all(out.data == 0.0)

    def test_id_out_of_range(self, tiny_cfg, tiny_params):
        with pytest.raises(VocabError):
            embed(seq_of([CLS_ID, tiny_cfg.vocab_size]), tiny_params)

    def test_too_long(self, tiny_cfg, tiny_params):
        with pytest.raises(ContractError):
            embed(seq_of([CLS_ID] + [4] * tiny_cfg.max_len), tiny_params)


class TestEncode:
    def test_inactive_keys_get_no_attention(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 4, 5, 6, 7], [True, True, False, True, False])
        attn = []
        encode(seq, tiny_params, tiny_cfg, collect_attn=attn)
        assert len(attn) == tiny_cfg.n_layers
        for weights in attn:  # (1, heads, len, len)
            assert weights[..., 2].max() < 1e-9
            assert weights[..., 4].max() < 1e-9
            assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_depth_is_embed(self, tiny_cfg):
        cfg0 = EncoderConfig(**{**tiny_cfg.to_dict(), "n_layers": 0})
        params = init_params(cfg0, seed=3)
        seq = seq_of([CLS_ID, 4, 9, 2])
        assert np.array_equal(encode(seq, params, cfg0).data,
                              embed(seq, params).data)

    def test_permutation_equivariance_without_positions(self, tiny_cfg):
        params = init_params(tiny_cfg, seed=9)
        params["pos_emb"].data[:] = 0.0
        a = seq_of([CLS_ID, 4, 5, 6, 7])
        b = seq_of([CLS_ID, 4, 6, 5, 7])  # swap positions 2 and 3
        za = encode(a, params, tiny_cfg).data
        zb = encode(b, params, tiny_cfg).data
        assert np.allclose(za[0], zb[0], atol=1e-9)
        assert np.allclose(za[2], zb[3], atol=1e-9)
        assert np.allclose(za[3], zb[2], atol=1e-9)

    def test_batch_matches_single(self, tiny_cfg, tiny_params):
        seqs = [seq_of([CLS_ID, 4, 5]), seq_of([CLS_ID, 7, 8, 9, 2])]
        with T.no_grad():
            batched = encode_batch(seqs, tiny_params, tiny_cfg)
            singles = [encode(s, tiny_params, tiny_cfg) for s in seqs]
        for r, s in enumerate(seqs):
            assert np.allclose(batched.data[r, :len(s)], singles[r].data,
                               atol=1e-10)


class TestClassify:
    def test_constant_head(self, tiny_cfg, tiny_params):
        tiny_params["head.w"].data[:] = 0.0
        tiny_params["head.b"].data[:] = [0.5, -1.0, 2.0]
        out = classify(seq_of([CLS_ID, 4, 5]), tiny_params)
        assert np.array_equal(out.data, [0.5, -1.0, 2.0])

    def test_deterministic(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 8, 3, 4])
        a = classify(seq, tiny_params).data
        b = classify(seq_of([CLS_ID, 8, 3, 4]), tiny_params).data
        assert np.array_equal(a, b)

    def test_cls_features_is_row_zero(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 5, 6])
        assert np.array_equal(cls_features(seq, tiny_params).data,
                              encode(seq, tiny_params).data[0])

    def test_deactivating_a_token_changes_logits(self, trained_toy):
        params, tok, enc_cfg, base_train = trained_toy
        seq = tok.encode(base_train.records[0]["text"])
        with T.no_grad():
            full = classify(seq, params).data
            # attribution-free perturbation: drop the last content token
            active = seq.active.copy()
            active[-1] = False
            dropped = classify(TokenSequence(seq.ids, active), params).data
        assert not np.allclose(full, dropped)


class TestParamGradients:
    def test_every_parameter_matches_fd(self, tiny_cfg, tiny_params):
        """Spot-check all parameter tensors of a 2-layer d16 model."""
        rng = np.random.default_rng(0)
        seq = seq_of([CLS_ID, 4, 9, 17, 3])
        weights = rng.normal(size=tiny_cfg.n_classes)

        with T.fresh_tape():
            logits = classify(seq, tiny_params, tiny_cfg)
            loss = T.sum(T.mul(logits, Tensor(weights)))
            tiny_params.zero_grads()
            T.backward(loss)

        def f():
            with T.no_grad():
                return float((classify(seq, tiny_params, tiny_cfg).data * weights).sum())

        for name, p in tiny_params.named():
            if name == "tok_emb":
                # only the looked-up rows carry gradient
                used = np.unique(seq.ids)
                unused = np.setdiff1d(np.arange(tiny_cfg.vocab_size), used)
                assert np.all(p.grad[unused] == 0.0)
                for row in used:
                    for col in range(0, tiny_cfg.d_model, 5):
                        orig = p.data[row, col]
                        p.data[row, col] = orig + 1e-5
                        fp = f()
                        p.data[row, col] = orig - 1e-5
                        fm = f()
                        p.data[row, col] = orig
                        fd = (fp - fm) / 2e-5
                        assert grads_close(p.grad[row, col], fd), \
                            f"FD mismatch on tok_emb[{row},{col}]"
                continue
            if p.data.size > 96:
                flat_idx = rng.choice(p.data.size, size=48, replace=False)
                numeric = np.zeros(len(flat_idx))
                for k, fi in enumerate(flat_idx):
                    idx = np.unravel_index(fi, p.data.shape)
                    orig = p.data[idx]
                    p.data[idx] = orig + 1e-5
                    fp = f()
                    p.data[idx] = orig - 1e-5
                    fm = f()
                    p.data[idx] = orig
                    numeric[k] = (fp - fm) / 2e-5
                analytic = p.grad.ravel()[flat_idx]
            else:
                numeric = central_diff(f, p.data).ravel()
                analytic = p.grad.ravel()
            assert grads_close(analytic, numeric), f"FD mismatch on {name}"

    def test_masked_positions_get_no_embedding_grad(self, tiny_cfg, tiny_params):
        seq = seq_of([CLS_ID, 4, 9, 17], [True, True, False, True])
        with T.fresh_tape():
            logits = classify(seq, tiny_params, tiny_cfg)
            tiny_params.zero_grads()
            T.backward(T.sum(logits))
        assert np.all(tiny_params["tok_emb"].grad[9] == 0.0)
        assert np.any(tiny_params["tok_emb"].grad[4] != 0.0)


def test_clone_is_independent(tiny_cfg, tiny_params):
    other = tiny_params.clone()
    other["head.b"].data[:] = 99.0
    assert not np.array_equal(tiny_params["head.b"].data, other["head.b"].data)


def test_head_shape_validated(tiny_cfg):
    params = init_params(tiny_cfg, seed=0)
    bad = {k: v for k, v in params.tensors.items()}
    bad["head.w"] = Tensor(np.zeros((tiny_cfg.d_model, tiny_cfg.n_classes + 1)),
                           requires_grad=True)
    from maskfew.errors import ShapeError
    with pytest.raises(ShapeError):
        ModelParams(bad, tiny_cfg)
