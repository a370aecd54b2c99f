"""Shared oracles: finite differences and brute-force references."""

import math

import numpy as np


def central_diff(f, x, h=1e-5):
    """Gradient of the scalar f() w.r.t. the array x, perturbed in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all(np.abs(analytic - numeric) <= rtol * scale + atol))


def best_window_bruteforce(scores, keep_len):
    """All-windows search over positions 1..n; naive left-to-right sums.

    ``scores`` includes the CLS score at index 0, which is excluded.
    Returns (start, sum) with ties broken by the smallest start.
    """
    n = len(scores) - 1
    best = None
    for start in range(1, n - keep_len + 2):
        total = 0.0
        for p in range(start, start + keep_len):
            total += float(scores[p])
        if best is None or total > best[1]:
            best = (start, total)
    return best


def select_anchors_bruteforce(base_feats, base_labels, base_refs,
                              novel_feats, K, d_n_mode="mean"):
    """Per-sample loops over every (base, novel) pair; python sorted()."""
    classes = sorted(set(int(c) for c in base_labels))
    centers = {c: base_feats[base_labels == c].mean(axis=0) for c in classes}
    rows = []
    for i in range(len(base_feats)):
        d_b = np.sqrt(np.square(base_feats[i] - centers[int(base_labels[i])]).sum())
        dists = np.array([np.sqrt(np.square(base_feats[i] - novel_feats[j]).sum())
                          for j in range(len(novel_feats))])
        d_n = dists.mean() if d_n_mode == "mean" else dists.min()
        rows.append((int(base_labels[i]), int(base_refs[i]), float(d_b - d_n)))
    out = {}
    for c in classes:
        mine = [(score, ref) for lab, ref, score in rows if lab == c]
        mine.sort()
        out[c] = [(ref, score) for score, ref in mine[:K]]
    return out


def contrastive_bruteforce(features, labels):
    """Explicit pair loops with python floats, straight from the formula."""
    b = len(labels)
    pos, neg = [], []
    for i in range(b):
        for j in range(i + 1, b):
            ci = np.dot(features[i], features[j]) / (
                np.linalg.norm(features[i]) * np.linalg.norm(features[j]))
            (pos if labels[i] == labels[j] else neg).append(math.exp(ci))
    if not pos or not neg:
        return 0.0
    sp, sn = math.fsum(pos), math.fsum(neg)
    return -math.log(sp / (sp + sn))
