import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mjkd_adapt.data_synth import LabeledDataset
from mjkd_adapt.network import init_model
from mjkd_adapt.selection import (
    PROMOTED,
    SelectionError,
    SelectionReport,
    apply_selection,
    initial_split,
    load_report,
    pseudo_label,
    save_report,
    select_balanced,
    update_split,
)


def datasets(n_s=8, n_t=12, c=2, seed=0):
    rng = np.random.default_rng(seed)
    src = LabeledDataset(rng.normal(size=(n_s, 2)), np.arange(n_s) % c, ["source"] * n_s, c)
    tgt = LabeledDataset(rng.normal(size=(n_t, 2)), None, ["target"] * n_t, c,
                         ground_truth=rng.integers(0, c, size=n_t))
    return src, tgt


def empty_report(n_t, c=2):
    return SelectionReport(c, 0.25, 0, n_t, [(np.zeros(0, int), np.zeros(0))] * c,
                           np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


class TestPseudoLabel:
    def test_uniform_tie_goes_to_zero(self):
        model = init_model(2, 3, rng=np.random.default_rng(0))
        model.classifier.weight[:] = 0
        pred, probs = pseudo_label(model, np.ones((4, 2)))
        assert pred.tolist() == [0, 0, 0, 0]
        np.testing.assert_allclose(probs, 1 / 3)

    def test_one_hot_and_partition(self):
        model = init_model(2, 3, rng=np.random.default_rng(0))
        model.classifier.weight[:] = 0
        model.classifier.bias[:] = [0.0, 500.0, 0.0]
        pred, _ = pseudo_label(model, np.zeros((5, 2)))
        assert pred.tolist() == [1] * 5
        model = init_model(2, 4, rng=np.random.default_rng(1))
        pred, _ = pseudo_label(model, np.random.default_rng(2).normal(size=(50, 2)))
        assert sum((pred == m).sum() for m in range(4)) == 50


class TestSelectBalanced:
    def test_argmin_per_class(self):
        # n_t=4, c=2, proportion=0.5 -> k=1
        pred = [0, 0, 1, 1]
        r = [1.3, 1.1, 2.0, 1.9]
        rep = select_balanced(pred, r, 0.5, 2)
        assert rep.k == 1
        assert sorted(rep.promoted_indices.tolist()) == [1, 3]

    def test_floor_k(self):
        rep = select_balanced(np.arange(10) % 3, np.arange(10.0), 0.25, 3)
        assert rep.k == 0  # floor(2.5 / 3)
        rep = select_balanced(np.arange(100) % 3, np.arange(100.0), 0.25, 3)
        assert rep.k == 8

    def test_empty_class_no_failure(self):
        rep = select_balanced([0, 0, 0, 0], [1.0, 2.0, 3.0, 4.0], 1.0, 2)
        assert rep.k == 2
        assert rep.counts.tolist() == [2, 0]
        assert rep.shortfall.tolist() == [0, 2]

    def test_no_backfill(self):
        pred = [0] * 9 + [1]
        rep = select_balanced(pred, np.arange(10.0), 0.8, 2)
        assert rep.k == 4 and rep.counts.tolist() == [4, 1]

    def test_ties_broken_by_index(self):
        rep = select_balanced([0, 0, 0, 0], [1.0, 1.0, 1.0, 1.0], 0.5, 1)
        assert rep.promoted_indices.tolist() == [0, 1]

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
    def test_proportion_range(self, p):
        with pytest.raises(SelectionError):
            select_balanced([0, 1], [1.0, 2.0], p, 2)

    @given(st.integers(1, 5), st.integers(1, 80), st.floats(0.01, 1.0), st.integers(0, 10**6))
    @settings(max_examples=100, deadline=None)
    def test_report_invariants(self, c, n, prop, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, c, size=n)
        r = rng.uniform(0, 5, size=n)
        rep = select_balanced(pred, r, prop, c)
        idx = rep.promoted_indices
        assert np.unique(idx).size == idx.size
        assert np.all(rep.counts <= rep.k)
        np.testing.assert_array_equal(pred[idx], rep.promoted_labels)
        full = [m for m in range(c) if (pred == m).sum() >= rep.k]
        assert len({int(rep.counts[m]) for m in full}) <= 1

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        pred = rng.integers(0, 3, size=60)
        r = rng.uniform(size=60)
        perm = rng.permutation(60)
        a = select_balanced(pred, r, 0.3, 3)
        b = select_balanced(pred[perm], r[perm], 0.3, 3)
        assert set(a.promoted_indices.tolist()) == set(perm[b.promoted_indices].tolist())

    def test_precision(self):
        rep = select_balanced([0, 0, 1, 1], [1.0, 2.0, 1.0, 2.0], 0.5, 2)
        assert rep.precision([0, 1, 0, 1]) == 0.5
        assert np.isnan(empty_report(4).precision([0, 1, 0, 1]))


class TestApplySelection:
    def test_empty_report_identity(self):
        src, tgt = datasets()
        split = apply_selection(src, tgt, empty_report(tgt.n))
        np.testing.assert_array_equal(split.labeled_x, src.features)
        np.testing.assert_array_equal(split.unlabeled_x, tgt.features)

    def test_promote_everything(self):
        src, tgt = datasets(n_t=6)
        rep = select_balanced([0, 1, 0, 1, 0, 1], np.zeros(6), 1.0, 2)
        split = apply_selection(src, tgt, rep)
        assert split.unlabeled_x.shape[0] == 0
        assert split.labeled_x.shape[0] == src.n + 6

    def test_promoted_rows_carry_pseudo_labels(self):
        src, tgt = datasets()
        pred = np.arange(12) % 2
        rep = select_balanced(pred, np.arange(12.0), 0.5, 2)
        split = apply_selection(src, tgt, rep)
        rows = split.promoted_rows
        assert set(split.provenance[rows]) == {PROMOTED}
        np.testing.assert_array_equal(split.labeled_y[rows], pred[split.labeled_origin[rows]])
        np.testing.assert_array_equal(split.labeled_x[rows], tgt.features[split.labeled_origin[rows]])
        assert np.all(split.domain_labels == 1)
        assert not set(split.unlabeled_index.tolist()) & set(rep.promoted_indices.tolist())

    @given(st.integers(0, 10**6), st.floats(0.05, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_conservation(self, seed, prop):
        src, tgt = datasets(n_s=10, n_t=30, c=3, seed=seed % 100)
        rng = np.random.default_rng(seed)
        rep = select_balanced(rng.integers(0, 3, size=30), rng.uniform(size=30), prop, 3)
        split = apply_selection(src, tgt, rep)
        assert split.labeled_x.shape[0] + split.unlabeled_x.shape[0] == src.n + tgt.n

    def test_second_application_rejected(self):
        src, tgt = datasets()
        rep = select_balanced(np.arange(12) % 2, np.arange(12.0), 0.5, 2)
        split = apply_selection(src, tgt, rep)
        with pytest.raises(SelectionError, match="already moved"):
            update_split(split, rep)

    def test_index_out_of_range(self):
        src, tgt = datasets()
        rep = select_balanced([0, 1], [1.0, 1.0], 1.0, 2)
        rep.promoted_indices = np.array([0, 99])
        with pytest.raises(SelectionError, match="out of range"):
            apply_selection(src, tgt, rep)

    def test_initial_split_requires_labels(self):
        _, tgt = datasets()
        with pytest.raises(SelectionError):
            initial_split(tgt, tgt)


def test_report_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rep = select_balanced(rng.integers(0, 3, size=40), rng.uniform(size=40), 0.25, 3)
    save_report(rep, tmp_path / "r.csv")
    back = load_report(tmp_path / "r.csv")
    assert back.k == rep.k and back.proportion == rep.proportion and back.n_targets == 40
    assert sorted(back.promoted_indices.tolist()) == sorted(rep.promoted_indices.tolist())
    for (i1, r1), (i2, r2) in zip(rep.ranked, back.ranked):
        np.testing.assert_array_equal(i1, i2)
        np.testing.assert_array_equal(r1, r2)
    header = (tmp_path / "r.csv").read_text().splitlines()[1]
    assert header == "class,index,R,rank,selected"
