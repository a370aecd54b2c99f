"""Anchor selection from the base dataset.

A good anchor sits close to its own class center (small d_b) and far
from the novel few-shot samples (large d_n), so per class we keep the
K samples with the smallest d_b - d_n.  Distances are Euclidean; d_n
aggregates the per-novel-shot distances by mean (default) or min.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskfew.errors import ContractError, DataError


@dataclass
class FeatureMatrix:
    """Sentence features with labels and original dataset row ids."""

    features: np.ndarray  # (N, d)
    labels: np.ndarray    # (N,)
    sample_refs: np.ndarray  # (N,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_refs = np.asarray(self.sample_refs, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.sample_refs.shape != (n,):
            raise ContractError("feature matrix rows, labels and refs disagree")
        if not np.isfinite(self.features).all():
            raise DataError("feature matrix contains non-finite values")


@dataclass
class AnchorSet:
    """Per base class: the selected sample refs with their d_b - d_n scores."""

    by_class: dict  # class index -> list[(ref, score)]

    def refs(self) -> list:
        out = []
        for cls in sorted(self.by_class):
            out.extend(ref for ref, _ in self.by_class[cls])
        return out

    def to_jsonable(self, label_names: dict | None = None) -> dict:
        out = {}
        for cls in sorted(self.by_class):
            key = label_names[cls] if label_names else str(cls)
            out[key] = [{"row_id": int(r), "score": float(s)}
                        for r, s in self.by_class[cls]]
        return out


def class_centers(base: FeatureMatrix, classes: list | None = None):
    """Arithmetic mean feature per class.

    Returns (classes, centers) with classes sorted ascending.  Passing
    an explicit class list makes a missing (empty) class an error.
    """
    present = sorted(int(c) for c in np.unique(base.labels))
    if classes is None:
        classes = present
    else:
        classes = sorted(int(c) for c in classes)
        missing = set(classes) - set(present)
        if missing:
            raise DataError(f"classes without any sample: {sorted(missing)}")
    centers = np.stack([base.features[base.labels == c].mean(axis=0) for c in classes])
    return classes, centers


def anchor_scores(base: FeatureMatrix, novel: FeatureMatrix,
                  d_n_mode: str = "mean") -> np.ndarray:
    """d_b - d_n per base sample."""
    if novel.features.shape[0] == 0:
        raise ContractError("anchor selection needs at least one novel sample")
    if d_n_mode not in ("mean", "min"):
        raise ContractError(f"unknown d_n aggregation {d_n_mode!r}")
    classes, centers = class_centers(base)
    index_of = {c: i for i, c in enumerate(classes)}
    own_center = centers[[index_of[int(c)] for c in base.labels]]
    d_b = np.sqrt(np.square(base.features - own_center).sum(axis=1))
    pair = np.sqrt(np.square(base.features[:, None, :] - novel.features[None, :, :]).sum(axis=2))
    d_n = pair.mean(axis=1) if d_n_mode == "mean" else pair.min(axis=1)
    return d_b - d_n


def select_anchors(base: FeatureMatrix, novel: FeatureMatrix, K: int,
                   d_n_mode: str = "mean") -> AnchorSet:
    """K lowest-scoring samples per base class, ties by row id ascending."""
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    scores = anchor_scores(base, novel, d_n_mode)
    by_class = {}
    for cls in sorted(int(c) for c in np.unique(base.labels)):
        idx = np.flatnonzero(base.labels == cls)
        order = idx[np.lexsort((base.sample_refs[idx], scores[idx]))]
        chosen = order[:K]
        by_class[cls] = [(int(base.sample_refs[i]), float(scores[i])) for i in chosen]
    return AnchorSet(by_class)
