"""Integrated Gradients over the encoder's input embeddings.

The path integral from a baseline embedding to the real embedding is
approximated with a midpoint Riemann sum; all interpolation points run
through the encoder as one batch.  Per-token scores are the sum over
embedding dimensions, which keeps the completeness axiom testable at
token granularity: sum(scores) ~= F_target(x) - F_target(baseline).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from maskfew import encoder as enc
from maskfew import tensor as T
from maskfew.encoder import EncoderConfig, ModelParams, PAD_ID, TokenSequence
from maskfew.errors import ClassError, ContractError
from maskfew.tensor import Tensor


@dataclass
class AttributionScores:
    """Per-position relevance of one sequence for one target class."""

    seq_ref: TokenSequence
    target_class: int
    scores: np.ndarray  # (len,), position 0 = CLS
    steps: int
    completeness_gap: float
    delta: float = 0.0  # F_target(x) - F_target(baseline) at creation

    def __post_init__(self):
        if len(self.scores) != len(self.seq_ref.ids):
            raise ContractError("scores length differs from sequence length")


@contextlib.contextmanager
def frozen(params: ModelParams):
    """Temporarily stop recording gradients into the model parameters."""
    flags = [(t, t.requires_grad) for t in params.tensors.values()]
    for t, _ in flags:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, was in flags:
            t.requires_grad = was


def baseline_embedding(seq: TokenSequence, params: ModelParams,
                       cfg: EncoderConfig | None = None) -> Tensor:
    """Embedding of the sequence with every non-CLS id replaced by PAD.

    Position embeddings are preserved, so the baseline keeps the
    sequence geometry and differs from the input only in content.
    """
    ids = np.full_like(seq.ids, PAD_ID)
    ids[0] = seq.ids[0]
    ref = TokenSequence(ids, seq.active.copy())
    return enc.embed(ref, params)


def _target_logit(z0: np.ndarray, seq: TokenSequence, target: int,
                  params: ModelParams, cfg: EncoderConfig) -> float:
    with T.no_grad():
        z = Tensor(z0[None, :, :])
        top = enc.encode_from_embeddings(z, seq.active[None, :], params, cfg)
        feats = T.tslice(top, (slice(None), 0))
        logits = enc.head_logits(feats, params)
    return float(logits.data[0, target])


def integrated_gradients(seq: TokenSequence, target: int, params: ModelParams,
                         cfg: EncoderConfig | None = None, steps: int = 64,
                         baseline: str = "pad") -> AttributionScores:
    """Midpoint-rule Integrated Gradients for one sequence and class.

    ``baseline`` selects the reference point: "pad" (PAD-token content,
    positions kept) or "zero" (all-zero embedding matrix).
    """
    cfg = cfg or params.cfg
    if not 0 <= target < cfg.n_classes:
        raise ClassError(f"target class {target} outside label space of size {cfg.n_classes}")
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if baseline not in ("pad", "zero"):
        raise ContractError(f"unknown baseline {baseline!r}")

    with T.no_grad():
        x = enc.embed(seq, params).data
        if baseline == "pad":
            x_base = baseline_embedding(seq, params, cfg).data
        else:
            x_base = np.zeros_like(x)

    diff = x - x_base
    alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    interp = x_base[None, :, :] + alphas[:, None, None] * diff[None, :, :]

    with frozen(params), T.fresh_tape():
        z = Tensor(interp, requires_grad=True)
        active = np.broadcast_to(seq.active, (steps, len(seq)))
        top = enc.encode_from_embeddings(z, active, params, cfg)
        feats = T.tslice(top, (slice(None), 0))
        logits = enc.head_logits(feats, params)
        total = T.sum(T.tslice(logits, (slice(None), target)))
        T.backward(total)
        grad_sum = z.grad.sum(axis=0)

    scores = (diff * grad_sum / steps).sum(axis=1)
    delta = (_target_logit(x, seq, target, params, cfg)
             - _target_logit(x_base, seq, target, params, cfg))
    gap = abs(float(scores.sum()) - delta)
    return AttributionScores(seq_ref=seq, target_class=target, scores=scores,
                             steps=steps, completeness_gap=gap, delta=delta)
