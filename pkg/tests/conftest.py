import numpy as np
import pytest

from maskfew.data import Corpus, build_tokenizer, split_base_novel, synth_corpus
from maskfew.encoder import EncoderConfig, init_params
from maskfew.pipeline import ExperimentData, TrainConfig, train_base


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    return EncoderConfig(vocab_size=30, max_len=12, d_model=16, n_layers=2,
                         n_heads=2, d_ff=24, n_classes=3)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=7)


def _corpus_pair(seed=7, signal_prob=0.65, **kw):
    train_recs, test_recs, novel = synth_corpus(seed=seed, signal_prob=signal_prob, **kw)
    labels = sorted({r["label"] for r in train_recs})
    label_map = {l: i for i, l in enumerate(labels)}
    return (Corpus(train_recs, label_map, "train"),
            Corpus(test_recs, dict(label_map), "test"), novel)


# The exact benchmark configuration for the end-to-end checks: separable
# synthetic corpus, 4 base + 2 novel classes, desk-scale encoder.
BENCH_ENCODER = dict(vocab_size=200, max_len=20, d_model=32, n_layers=2,
                     n_heads=4, d_ff=64)
BENCH_TRAIN = dict(epoch_b=8, epoch_f=40, ratio=0.45, base_lr=3e-3, fsl_lr=4e-3,
                   batch_size_base=32, K=5, ig_steps=8)


@pytest.fixture(scope="session")
def bench_data():
    train, test, novel = _corpus_pair(seed=7, signal_prob=0.65)
    base_train, novel_train = split_base_novel(train, novel)
    base_test, novel_test = split_base_novel(test, novel)
    enc_cfg = EncoderConfig(
        n_classes=len(base_train.label_map) + len(novel_train.label_map),
        **BENCH_ENCODER)
    tok = build_tokenizer(train, enc_cfg.vocab_size, max_len=enc_cfg.max_len)
    return ExperimentData(base_train=base_train, novel_train=novel_train,
                          base_test=base_test, novel_test=novel_test,
                          tokenizer=tok, enc_cfg=enc_cfg)


@pytest.fixture(scope="session")
def bench_cfg():
    return TrainConfig(seed=1, **BENCH_TRAIN)


@pytest.fixture(scope="session")
def trained_toy():
    """A small encoder base-trained on a 3+1-class corpus, for attribution."""
    train, test, novel = _corpus_pair(seed=11, signal_prob=0.6, n_base=3,
                                      n_novel=1, train_per_class=20,
                                      test_per_class=10)
    base_train, novel_train = split_base_novel(train, novel)
    enc_cfg = EncoderConfig(vocab_size=120, max_len=16, d_model=24, n_layers=2,
                            n_heads=4, d_ff=48, n_classes=4)
    tok = build_tokenizer(train, enc_cfg.vocab_size, max_len=enc_cfg.max_len)
    cfg = TrainConfig(epoch_b=6, epoch_f=1, base_lr=3e-3, batch_size_base=16,
                      seed=3)
    params = train_base(base_train, tok, enc_cfg, cfg)
    return params, tok, enc_cfg, base_train
