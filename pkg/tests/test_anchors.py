import numpy as np
import pytest

from maskfew.anchors import (AnchorSet, FeatureMatrix, anchor_scores,
                             class_centers, select_anchors)
from maskfew.errors import ContractError, DataError

from helpers import select_anchors_bruteforce


def fm(features, labels, refs=None):
    features = np.asarray(features, dtype=np.float64)
    if refs is None:
        refs = np.arange(len(features))
    return FeatureMatrix(features, np.asarray(labels), np.asarray(refs))


class TestClassCenters:
    def test_singleton_classes(self):
        m = fm([[1.0, 2.0], [3.0, -1.0]], [0, 1])
        classes, centers = class_centers(m)
        assert classes == [0, 1]
        assert np.array_equal(centers, m.features)

    def test_symmetric_pair_cancels(self):
        m = fm([[2.0, -3.0], [-2.0, 3.0]], [0, 0])
        _, centers = class_centers(m)
        assert np.allclose(centers, 0.0, atol=1e-15)

    def test_random_matches_direct_average(self, rng):
        feats = rng.normal(size=(50, 8))
        labels = rng.integers(0, 3, size=50)
        classes, centers = class_centers(fm(feats, labels))
        for c in classes:
            direct = feats[labels == c].mean(axis=0)
            assert np.allclose(centers[classes.index(c)], direct, atol=1e-12)

    def test_missing_class_is_data_error(self):
        m = fm([[1.0, 0.0]], [0])
        with pytest.raises(DataError):
            class_centers(m, classes=[0, 1])

    def test_nonfinite_rejected(self):
        with pytest.raises(DataError):
            fm([[np.inf, 0.0]], [0])


class TestSelectAnchors:
    def test_hand_case_score(self):
        # class center at the origin via a symmetric pair; s=(1,0) has
        # d_b=1; a single novel shot at (3,0) gives d_n=2; score -1
        base = fm([[1.0, 0.0], [-1.0, 0.0]], [0, 0])
        novel = fm([[3.0, 0.0]], [1])
        scores = anchor_scores(base, novel)
        assert scores[0] == pytest.approx(-1.0, abs=1e-15)
        chosen = select_anchors(base, novel, K=1)
        assert chosen.by_class[0][0] == (0, pytest.approx(-1.0, abs=1e-15))

    def test_small_class_returns_all(self, rng):
        base = fm(rng.normal(size=(3, 4)), [0, 0, 1])
        novel = fm(rng.normal(size=(2, 4)), [2, 2])
        chosen = select_anchors(base, novel, K=5)
        assert len(chosen.by_class[0]) == 2
        assert len(chosen.by_class[1]) == 1

    def test_exactly_k_selected_distinct(self, rng):
        base = fm(rng.normal(size=(40, 6)), rng.integers(0, 4, size=40))
        novel = fm(rng.normal(size=(5, 6)), [9] * 5)
        chosen = select_anchors(base, novel, K=3)
        for cls, rows in chosen.by_class.items():
            refs = [r for r, _ in rows]
            assert len(refs) == len(set(refs)) == 3

    @pytest.mark.parametrize("mode", ["mean", "min"])
    def test_matches_bruteforce(self, mode):
        rng = np.random.default_rng(17 if mode == "mean" else 18)
        for _ in range(20):
            nb = int(rng.integers(10, 120))
            nn = int(rng.integers(1, 15))
            nc = int(rng.integers(1, 6))
            d = int(rng.integers(2, 8))
            base = fm(rng.normal(size=(nb, d)), rng.integers(0, nc, size=nb))
            novel = fm(rng.normal(size=(nn, d)), np.full(nn, nc))
            got = select_anchors(base, novel, K=5, d_n_mode=mode)
            want = select_anchors_bruteforce(base.features, base.labels,
                                             base.sample_refs, novel.features,
                                             5, d_n_mode=mode)
            assert {c: rows for c, rows in got.by_class.items()} == want

    def test_translation_invariance(self, rng):
        base_feats = rng.normal(size=(30, 5))
        labels = rng.integers(0, 3, size=30)
        novel_feats = rng.normal(size=(4, 5))
        shift = rng.normal(size=5) * 10
        a = select_anchors(fm(base_feats, labels), fm(novel_feats, [3] * 4), K=4)
        b = select_anchors(fm(base_feats + shift, labels),
                           fm(novel_feats + shift, [3] * 4), K=4)
        assert [r for c in sorted(a.by_class) for r, _ in a.by_class[c]] == \
               [r for c in sorted(b.by_class) for r, _ in b.by_class[c]]

    def test_selected_scores_dominate_unselected(self, rng):
        base = fm(rng.normal(size=(60, 4)), rng.integers(0, 3, size=60))
        novel = fm(rng.normal(size=(6, 4)), [5] * 6)
        scores = anchor_scores(base, novel)
        chosen = select_anchors(base, novel, K=7)
        for cls, rows in chosen.by_class.items():
            picked = {r for r, _ in rows}
            cls_rows = np.flatnonzero(base.labels == cls)
            worst_picked = max(s for _, s in rows)
            for i in cls_rows:
                if int(base.sample_refs[i]) not in picked:
                    assert scores[i] >= worst_picked - 1e-15

    def test_tie_break_by_row_id(self):
        # two identical samples in one class tie exactly; lower ref wins
        base = fm([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], [0, 0, 0],
                  refs=[10, 3, 7])
        novel = fm([[0.0, 5.0]], [1])
        chosen = select_anchors(base, novel, K=1)
        assert chosen.by_class[0][0][0] == 3

    def test_empty_novel_rejected(self, rng):
        base = fm(rng.normal(size=(4, 3)), [0] * 4)
        novel = FeatureMatrix(np.zeros((0, 3)), np.zeros(0, dtype=int),
                              np.zeros(0, dtype=int))
        with pytest.raises(ContractError):
            select_anchors(base, novel, K=1)

    def test_k_positive(self, rng):
        base = fm(rng.normal(size=(4, 3)), [0] * 4)
        novel = fm(rng.normal(size=(1, 3)), [1])
        with pytest.raises(ContractError):
            select_anchors(base, novel, K=0)


def test_anchor_set_jsonable():
    s = AnchorSet({1: [(4, -0.25)], 0: [(2, 0.5)]})
    out = s.to_jsonable({0: "alpha", 1: "beta"})
    assert list(out) == ["alpha", "beta"]
    assert out["beta"] == [{"row_id": 4, "score": -0.25}]
    assert s.refs() == [2, 4]
