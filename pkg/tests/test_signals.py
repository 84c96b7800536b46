import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tapnet.errors import LabelingError, ShapeError, StratificationError
from tapnet.signals import (
    SIGNAL_LENGTH,
    REFERENCE_COUNTS,
    UNLABELED,
    Dataset,
    DefectClass,
    DomainTag,
    Signal,
    apportion,
    label_fraction_mask,
    stratified_folds,
    reference_counts,
)


def make_dataset(counts, seed=0, domain="acrylic"):
    labels = np.concatenate([np.full(n, c, dtype=np.int16) for c, n in enumerate(counts)])
    rng = np.random.default_rng(seed)
    samples = rng.standard_normal((len(labels), SIGNAL_LENGTH)).astype(np.float32)
    return Dataset(samples, labels, np.zeros(len(labels)), (domain,))


class TestDefectClass:
    def test_seven_codes(self):
        assert len(DefectClass) == 7
        assert sorted(int(c) for c in DefectClass) == list(range(7))

    def test_short_names(self):
        assert [c.name for c in DefectClass] == ["N", "LC", "BC", "LTD", "BTD", "LBD", "BBD"]

    @pytest.mark.parametrize("c", list(DefectClass))
    def test_round_trip(self, c):
        assert DefectClass.parse(str(c)) is c
        assert DefectClass(int(c)) is c

    def test_unknown(self):
        with pytest.raises(ValueError):
            DefectClass.parse("XYZ")


class TestSignal:
    def test_length_enforced(self):
        with pytest.raises(ShapeError):
            Signal(np.zeros(2047), DomainTag("GFRP"))

    def test_finite(self):
        x = np.zeros(SIGNAL_LENGTH)
        x[3] = np.nan
        with pytest.raises(ValueError):
            Signal(x, DomainTag("GFRP"))

    def test_immutable(self):
        s = Signal(np.zeros(SIGNAL_LENGTH), "GFRP", DefectClass.LC, (3, 4))
        with pytest.raises(ValueError):
            s.samples[0] = 1.0
        assert s.domain == DomainTag("GFRP")

    def test_domain_tag(self):
        with pytest.raises(ValueError):
            DomainTag("")
        assert DomainTag("Al") != DomainTag("al")


class TestDataset:
    def test_from_signals_round_trip(self):
        sigs = [
            Signal(np.full(SIGNAL_LENGTH, i, np.float32), ["GFRP", "Al"][i % 2], DefectClass(i % 7), (i, 2 * i))
            for i in range(6)
        ]
        ds = Dataset.from_signals(sigs)
        assert ds.domains == ("GFRP", "Al")
        assert list(ds) == sigs

    def test_reference_bookkeeping(self, reference_dataset):
        counts = reference_dataset.class_counts()
        assert len(reference_dataset) == 33690
        assert counts[DefectClass.N] == 15978
        assert counts[DefectClass.LC] == counts[DefectClass.LTD] == counts[DefectClass.LBD] == 4434
        assert counts[DefectClass.BC] == counts[DefectClass.BTD] == counts[DefectClass.BBD] == 1470
        assert sum(counts.values()) == len(reference_dataset)

    def test_reference_counts_scaled(self):
        c = reference_counts(3500)
        assert sum(c.values()) == 3500
        assert c[DefectClass.N] == round(3500 * 15978 / 33690)

    def test_subset_and_concat(self):
        a = make_dataset([3, 3], domain="a")
        b = make_dataset([2, 0, 2], domain="b")
        both = Dataset.concat([a, b])
        assert len(both) == 10 and both.domains == ("a", "b")
        assert both.subset(range(6)) == a.replace(domain_ids=np.zeros(6), domains=("a", "b"))


class TestApportion:
    @given(st.integers(0, 10_000), st.lists(st.integers(0, 500), min_size=1, max_size=10))
    def test_sums_exactly(self, total, weights):
        parts = apportion(total, weights)
        if sum(weights) == 0:
            assert parts == [0] * len(weights)
        else:
            assert sum(parts) == total
            for p, w in zip(parts, weights):
                assert abs(p - total * w / sum(weights)) < 1


class TestStratifiedFolds:
    def test_reference_three_folds(self, reference_dataset):
        ds = stratified_folds(reference_dataset, 3, seed=0)
        sizes = np.bincount(ds.folds)
        assert sizes.tolist() == [11230, 11230, 11230]

    def test_one_per_fold(self):
        ds = stratified_folds(make_dataset([3]), 3, seed=1)
        assert sorted(ds.folds.tolist()) == [0, 1, 2]

    def test_deterministic(self):
        ds = make_dataset([10, 7, 5])
        assert np.array_equal(stratified_folds(ds, 3, 5).folds, stratified_folds(ds, 3, 5).folds)
        assert not np.array_equal(stratified_folds(ds, 3, 5).folds, stratified_folds(ds, 3, 6).folds)

    def test_unlabeled(self):
        ds = make_dataset([5, 5])
        ds = ds.replace(labels=np.where(np.arange(10) == 0, UNLABELED, ds.labels))
        with pytest.raises(LabelingError):
            stratified_folds(ds, 3, 0)

    def test_too_few_per_class(self):
        with pytest.raises(StratificationError):
            stratified_folds(make_dataset([5, 2]), 3, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=7), st.integers(2, 5), st.integers(0, 2**31))
    def test_partition_properties(self, counts, folds, seed):
        counts = [c if c == 0 else max(c, folds) for c in counts]
        if sum(counts) == 0:
            counts[0] = folds
        ds = stratified_folds(make_dataset(counts), folds, seed)
        # disjoint and exhaustive: one fold id per index
        assert ds.folds.shape == (len(ds),)
        assert set(np.unique(ds.folds)) <= set(range(folds))
        union = np.concatenate([ds.fold_indices(f) for f in range(folds)])
        assert sorted(union.tolist()) == list(range(len(ds)))
        for c in range(len(counts)):
            per = np.bincount(ds.folds[ds.labels == c], minlength=folds)
            assert per.max() - per.min() <= 1
        total = np.bincount(ds.folds, minlength=folds)
        assert total.max() - total.min() <= 1


class TestLabelFractionMask:
    def test_zero(self):
        ds = label_fraction_mask(make_dataset([10, 10]), 0.0, 0)
        assert not ds.labeled_mask.any()
        assert np.array_equal(ds.ground_truth, make_dataset([10, 10]).labels)

    def test_one(self):
        ds = make_dataset([10, 10])
        assert label_fraction_mask(ds, 1.0, 0) == ds

    def test_reference_ten_percent(self, reference_dataset):
        ds = label_fraction_mask(reference_dataset, 0.10, seed=0)
        assert int(ds.labeled_mask.sum()) == 3369 == round(0.10 * 33690)
        kept = ds.class_counts()
        for c, n in REFERENCE_COUNTS.items():
            assert abs(kept[c] - 0.1 * n) < 1

    def test_idempotent(self):
        ds = make_dataset([17, 9, 4])
        once = label_fraction_mask(ds, 0.3, 7)
        twice = label_fraction_mask(once, 0.3, 7)
        assert once == twice
        assert int(once.labeled_mask.sum()) == math.floor(0.3 * 30 + 0.5)

    def test_needs_labels(self):
        ds = make_dataset([4])
        ds = ds.replace(labels=np.full(4, UNLABELED))
        with pytest.raises(LabelingError):
            label_fraction_mask(ds, 0.5, 0)
