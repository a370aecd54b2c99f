"""Mini pre-norm transformer encoder and its linear classification head.

Layer l applies, in order:

    h = MHSA(LN(z)) + z
    z = MLP(LN(h)) + h

The sentence feature is row 0 (the CLS token) of the top layer, and the
head maps it to one logit per class of the joint base+novel label space.
Inactive positions are excluded from attention by adding a large
negative bias to their key logits; their own rows are still computed
but nothing downstream reads them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from maskfew import tensor as T
from maskfew.errors import ConfigError, ContractError, ShapeError, VocabError
from maskfew.tensor import Tensor

# Reserved token ids, fixed across the whole package.
CLS_ID = 0
PAD_ID = 1
UNK_ID = 2
MASK_ID = 3

_NEG_BIAS = -1e30  # exp() underflows to exactly 0.0 after max subtraction


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 2000
    max_len: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    n_classes: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.vocab_size, self.max_len, self.d_model, self.n_heads,
               self.d_ff, self.n_classes) < 1 or self.n_layers < 0:
            raise ConfigError("encoder extents must be positive (n_layers may be 0)")

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size, "max_len": self.max_len,
            "d_model": self.d_model, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "n_classes": self.n_classes,
        }


@dataclass
class TokenSequence:
    """Encoded sentence: CLS id first, plus an active-position mask."""

    ids: np.ndarray
    active: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.active is None:
            self.active = np.ones(self.ids.shape, dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool)
        if self.ids.ndim != 1 or len(self.ids) < 1:
            raise ContractError("TokenSequence needs at least the CLS token")
        if self.ids[0] != CLS_ID:
            raise ContractError(f"TokenSequence must start with CLS id {CLS_ID}")
        if self.active.shape != self.ids.shape:
            raise ContractError("active mask length differs from ids length")
        if not self.active[0]:
            raise ContractError("the CLS position can never be inactive")

    def __len__(self):
        return len(self.ids)

    def copy(self) -> "TokenSequence":
        return TokenSequence(self.ids.copy(), self.active.copy())


class ModelParams:
    """Named parameter tensors, insertion-ordered for checkpointing."""

    def __init__(self, tensors: dict, cfg: EncoderConfig):
        self.tensors = tensors
        self.cfg = cfg
        hw = tensors["head.w"].data.shape
        hb = tensors["head.b"].data.shape
        if hw != (cfg.d_model, cfg.n_classes) or hb != (cfg.n_classes,):
            raise ShapeError(f"head shapes {hw}/{hb} do not match "
                             f"(d_model={cfg.d_model}, C={cfg.n_classes})")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def all(self):
        return list(self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def clone(self) -> "ModelParams":
        fresh = {k: Tensor(v.data.copy(), requires_grad=True)
                 for k, v in self.tensors.items()}
        return ModelParams(fresh, self.cfg)


def init_params(cfg: EncoderConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
    """Gaussian init for embeddings and projections, identity layer norms."""
    rng = np.random.default_rng(seed)

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    d, f = cfg.d_model, cfg.d_ff
    p = {"tok_emb": w(cfg.vocab_size, d), "pos_emb": w(cfg.max_len, d)}
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.gain"] = ones(d)
        p[pre + "ln1.bias"] = zeros(d)
        for proj in ("q", "k", "v", "o"):
            p[pre + f"attn.w{proj}"] = w(d, d)
            p[pre + f"attn.b{proj}"] = zeros(d)
        p[pre + "ln2.gain"] = ones(d)
        p[pre + "ln2.bias"] = zeros(d)
        p[pre + "mlp.w1"] = w(d, f)
        p[pre + "mlp.b1"] = zeros(f)
        p[pre + "mlp.w2"] = w(f, d)
        p[pre + "mlp.b2"] = zeros(d)
    p["head.w"] = w(d, cfg.n_classes)
    p["head.b"] = zeros(cfg.n_classes)
    return ModelParams(p, cfg)


def _check_sequence(seq: TokenSequence, cfg: EncoderConfig):
    if len(seq) > cfg.max_len:
        raise ContractError(f"sequence length {len(seq)} exceeds max_len {cfg.max_len}")
    bad = seq.ids[(seq.ids < 0) | (seq.ids >= cfg.vocab_size)]
    if bad.size:
        raise VocabError(f"token id {int(bad[0])} outside vocabulary of size {cfg.vocab_size}")


def embed(seq: TokenSequence, params: ModelParams) -> Tensor:
    """Token embedding plus position embedding; the layer-0 representation."""
    cfg = params.cfg
    _check_sequence(seq, cfg)
    tok = T.embedding_lookup(params["tok_emb"], seq.ids)
    pos = T.tslice(params["pos_emb"], slice(0, len(seq)))
    return T.add(tok, pos)


def _attention_bias(active: np.ndarray) -> np.ndarray:
    # (B, 1, 1, len): broadcast over heads and query rows
    bias = np.where(active, 0.0, _NEG_BIAS)
    return bias[:, None, None, :]


def encode_from_embeddings(z: Tensor, active: np.ndarray, params: ModelParams,
                           cfg: EncoderConfig, collect_attn: list | None = None) -> Tensor:
    """Run the residual blocks on (B, len, d) embeddings.

    ``active`` is (B, len) bool; inactive keys get the negative attention
    bias.  ``collect_attn`` receives each layer's softmax weights
    (B, heads, len, len) when provided.
    """
    B, n, d = z.data.shape
    h = cfg.n_heads
    dh = d // h
    bias = Tensor(_attention_bias(active))
    inv_sqrt_dh = 1.0 / math.sqrt(dh)

    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        x = T.layer_norm(z, params[pre + "ln1.gain"], params[pre + "ln1.bias"])
        heads = []
        for name in ("q", "k", "v"):
            proj = T.add(T.matmul(x, params[pre + f"attn.w{name}"]),
                         params[pre + f"attn.b{name}"])
            # (B, n, d) -> (B, h, n, dh)
            heads.append(T.swapaxes(T.reshape(proj, (B, n, h, dh)), 1, 2))
        q, k, v = heads
        scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), inv_sqrt_dh)
        weights = T.softmax(T.add(scores, bias), axis=-1)
        if collect_attn is not None:
            collect_attn.append(weights.data)
        ctx = T.matmul(weights, v)  # (B, h, n, dh)
        merged = T.reshape(T.swapaxes(ctx, 1, 2), (B, n, d))
        attn_out = T.add(T.matmul(merged, params[pre + "attn.wo"]),
                         params[pre + "attn.bo"])
        z = T.add(attn_out, z)

        x = T.layer_norm(z, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
        hmid = T.gelu(T.add(T.matmul(x, params[pre + "mlp.w1"]), params[pre + "mlp.b1"]))
        mlp_out = T.add(T.matmul(hmid, params[pre + "mlp.w2"]), params[pre + "mlp.b2"])
        z = T.add(mlp_out, z)
    return z


def encode(seq: TokenSequence, params: ModelParams, cfg: EncoderConfig | None = None,
           collect_attn: list | None = None) -> Tensor:
    """Top-layer representations (len, d) for one sequence."""
    cfg = cfg or params.cfg
    z0 = embed(seq, params)
    n, d = z0.data.shape
    z = T.reshape(z0, (1, n, d))
    z = encode_from_embeddings(z, seq.active[None, :], params, cfg, collect_attn)
    return T.reshape(z, (n, d))


def encode_batch(seqs: list, params: ModelParams, cfg: EncoderConfig | None = None) -> Tensor:
    """Pad a batch to a common length and encode it in one graph.

    Padding uses PAD ids flagged inactive, so padded slots carry no
    attention weight and no gradient.  Returns (B, max_n, d).
    """
    cfg = cfg or params.cfg
    if not seqs:
        raise ContractError("encode_batch of an empty batch")
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    active = np.zeros((len(seqs), n), dtype=bool)
    for r, s in enumerate(seqs):
        _check_sequence(s, cfg)
        ids[r, :len(s)] = s.ids
        active[r, :len(s)] = s.active
    tok = T.embedding_lookup(params["tok_emb"], ids)
    pos = T.tslice(params["pos_emb"], slice(0, n))
    z0 = T.add(tok, pos)
    return encode_from_embeddings(z0, active, params, cfg)


def cls_features(seq: TokenSequence, params: ModelParams,
                 cfg: EncoderConfig | None = None) -> Tensor:
    """Row 0 of the top layer: the (d,) sentence feature."""
    return T.tslice(encode(seq, params, cfg), 0)


def head_logits(features: Tensor, params: ModelParams) -> Tensor:
    """Linear head on (B, d) features -> (B, C) raw logits."""
    return T.add(T.matmul(features, params["head.w"]), params["head.b"])


def classify(seq: TokenSequence, params: ModelParams,
             cfg: EncoderConfig | None = None) -> Tensor:
    """Raw logits (C,) for one sequence; softmax lives in the loss."""
    feats = T.reshape(cls_features(seq, params, cfg), (1, -1))
    return T.reshape(head_logits(feats, params), (-1,))
