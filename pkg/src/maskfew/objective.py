"""Losses for the mixed fine-tuning batches, plus the two optimizers.

The classification loss is a batch-mean cross entropy over the joint
base+novel label space.  The contrastive loss works on batch pairs of
CLS features: with sp = sum of e^cos over same-label pairs and sn the
same over different-label pairs, it is -log(sp / (sp + sn)); pulling
same-class features together, pushing the rest apart.  The training
objective is their unweighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from maskfew import tensor as T
from maskfew.encoder import TokenSequence
from maskfew.errors import ClassError, ContractError, NumericError
from maskfew.tensor import Tensor

ORIGIN_NOVEL = "novel"
ORIGIN_ANCHOR = "base-anchor"


@dataclass
class Batch:
    """Mixed mini-batch: masked anchors and untouched novel shots."""

    sequences: list  # list[TokenSequence]
    labels: np.ndarray  # class indices in the joint label space
    origin: list = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.sequences:
            raise ContractError("empty batch")
        if len(self.sequences) != len(self.labels):
            raise ContractError("batch sequences and labels disagree in length")
        if self.origin is None:
            self.origin = [ORIGIN_NOVEL] * len(self.sequences)

    def __len__(self):
        return len(self.sequences)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.data.shape
    if labels.shape != (B,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= C:
        raise ClassError(f"label outside the {C}-class label space")
    # logsumexp with a detached shift: gradient is exactly softmax
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = T.sum(T.exp(T.sub(logits, shift)), axis=1, keepdims=True)
    lse = T.add(T.log(z), shift)  # (B, 1)
    onehot = Tensor(np.eye(C)[labels])
    picked = T.sum(T.mul(logits, onehot), axis=1, keepdims=True)
    return T.mean(T.sub(lse, picked))


def pair_masks(labels: np.ndarray):
    """0/1 matrices over unordered distinct pairs (upper triangle)."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones((len(labels), len(labels)), dtype=bool), k=1)
    return (same & upper).astype(np.float64), (~same & upper).astype(np.float64)


def contrastive_from_pairs(pos_cosines, neg_cosines) -> float:
    """The pair-level form of the loss, for hand-checkable fixtures."""
    sp = math.fsum(math.exp(c) for c in pos_cosines)
    sn = math.fsum(math.exp(c) for c in neg_cosines)
    if sp == 0.0 or sn == 0.0:
        return 0.0
    return -math.log(sp / (sp + sn))


def contrastive_loss(features: Tensor, labels) -> Tensor:
    """Batch contrastive loss over all unordered distinct feature pairs.

    Returns a constant 0 when the batch has no same-label pair or no
    different-label pair, where the ratio is undefined.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B = features.data.shape[0]
    if B < 2:
        raise ContractError(f"contrastive loss needs a batch of >= 2, got {B}")
    if labels.shape != (B,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {B}")
    norms_sq = np.square(features.data).sum(axis=1)
    if np.any(norms_sq == 0.0):
        raise NumericError("zero-norm feature vector; cosine similarity undefined")
    pos, neg = pair_masks(labels)
    if pos.sum() == 0.0 or neg.sum() == 0.0:
        return Tensor(0.0)
    inv_norm = T.div(Tensor(1.0), T.sqrt(T.sum(T.mul(features, features), axis=1, keepdims=True)))
    unit = T.mul(features, inv_norm)
    cos = T.matmul(unit, T.swapaxes(unit, 0, 1))
    e = T.exp(cos)
    sp = T.sum(T.mul(e, Tensor(pos)))
    sn = T.sum(T.mul(e, Tensor(neg)))
    total = T.add(sp, sn)
    return T.sub(T.log(total), T.log(sp))


def total_loss(logits: Tensor, features: Tensor, labels,
               use_contrastive: bool = True) -> Tensor:
    """Unweighted sum of the cross-entropy and contrastive terms."""
    ce = cross_entropy(logits, labels)
    if not use_contrastive:
        return ce
    return T.add(ce, contrastive_loss(features, labels))


# ---------------------------------------------------------------------------
# optimizers


class SignSGD:
    """p -= lr * sign(grad); every nonzero-gradient coordinate moves by lr."""

    kind = "signsgd"

    def __init__(self, params, lr: float = 4e-5):
        self.params = params
        self.lr = lr
        self.step_count = 0

    def step(self):
        for name, p in self.params.named():
            if p.grad is None:
                raise ContractError(f"signsgd step with missing grad on {name}")
            p.data -= self.lr * np.sign(p.grad)
        self.step_count += 1


class AdamW:
    """Adam with decoupled weight decay (decay applied outside the moments)."""

    kind = "adamw"

    def __init__(self, params, lr: float = 2e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.named()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.named()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.named():
            if p.grad is None:
                raise ContractError(f"adamw step with missing grad on {name}")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
