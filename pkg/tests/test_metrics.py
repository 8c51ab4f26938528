import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import confusion_loop, pairwise_auc
from tabcascade.errors import InputError, MetricError, StratificationError
from tabcascade.metrics import (accuracy, binary_summary, class_f1, classification_summary,
                                confusion, macro_f1, precision, recall, roc_auc, sens_spec,
                                stratified_kfold)


def test_ninety_ten_split_deals_evenly():
    labels = np.array([0] * 90 + [1] * 10)
    folds = stratified_kfold(labels, 5, seed=3)
    for _, held in folds:
        assert np.bincount(labels[held], minlength=2).tolist() == [18, 2]


def test_single_fold_holds_everything():
    folds = stratified_kfold(np.arange(6) % 2, 1)
    train, held = folds.split(0)
    assert train.size == 0 and held.tolist() == list(range(6))


def test_same_seed_same_assignment():
    y = np.random.default_rng(0).integers(0, 4, 200)
    a, b = stratified_kfold(y, 5, 11), stratified_kfold(y, 5, 11)
    np.testing.assert_array_equal(a.fold, b.fold)
    assert not np.array_equal(a.fold, stratified_kfold(y, 5, 12).fold)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(5, 60), min_size=2, max_size=5), st.integers(2, 5),
       st.integers(0, 2**31))
def test_every_fold_within_one_per_class(sizes, k, seed):
    y = np.repeat(np.arange(len(sizes)), sizes)
    folds = stratified_kfold(y, k, seed)
    counts = np.array([np.bincount(y[h], minlength=len(sizes)) for _, h in folds])
    assert (counts.max(axis=0) - counts.min(axis=0) <= 1).all()
    assert counts.sum() == y.size
    sizes_per_fold = counts.sum(axis=1)
    assert sizes_per_fold.max() - sizes_per_fold.min() <= 1


def test_too_few_rows_for_k():
    with pytest.raises(StratificationError):
        stratified_kfold([0, 0, 0, 1, 1], 3)
    with pytest.raises(InputError):
        stratified_kfold([0, 1], 0)
    with pytest.raises(InputError):
        stratified_kfold([0, 0, 1, 1], 2).split(2)


def test_confusion_fixture():
    assert confusion([0, 0, 1, 1], [0, 1, 1, 1], 2).tolist() == [[1, 1], [0, 2]]
    np.testing.assert_array_equal(confusion([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=int))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_confusion_matches_loop(n, seed):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, n, 40), rng.integers(0, n, 40)
    cm = confusion(t, p, n)
    np.testing.assert_array_equal(cm, confusion_loop(t, p, n))
    assert cm.sum() == 40


def test_confusion_rejects_bad_labels():
    with pytest.raises(InputError):
        confusion([0, 1], [0], 2)
    with pytest.raises(InputError):
        confusion([0, 2], [0, 1], 2)


def test_f1_hand_fixture():
    # class 1: TP=8, FP=2, FN=2
    cm = np.array([[10, 2], [2, 8]])
    assert class_f1(cm, 1) == pytest.approx(0.8, abs=0)
    assert precision(cm, 1) == 0.8 and recall(cm, 1) == 0.8
    assert accuracy(cm) == 18 / 22


def test_absent_class_scores_zero():
    cm = np.array([[5, 0], [0, 0]])
    assert class_f1(cm, 1) == 0.0
    assert precision(cm, 1) == 0.0 and recall(cm, 1) == 0.0
    assert macro_f1(cm) == 0.5


def test_diagonal_is_perfect():
    cm = np.diag([3, 4, 5])
    assert [class_f1(cm, c) for c in range(3)] == [1.0, 1.0, 1.0]
    assert accuracy(cm) == 1.0
    assert sens_spec(np.array([[50, 0], [0, 50]])) == (1.0, 1.0)


def test_sensitivity_specificity_orientation():
    # rows are truth; class 1 is the positive class
    cm = np.array([[6, 4], [1, 9]])
    assert sens_spec(cm) == (0.9, 0.6)
    with pytest.raises(InputError):
        sens_spec(np.eye(3))


def test_auc_fixtures():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.9, 0.2, 0.8, 0.1], [1, 1, 0, 0]) == 0.75
    assert roc_auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0


def test_auc_single_class_is_an_error():
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(InputError):
        roc_auc([0.1, 0.2], [1])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_auc_matches_pair_count_and_is_rank_invariant(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.integers(0, 5, n).astype(float)  # coarse grid forces ties
    auc = roc_auc(scores, labels)
    assert auc == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
    assert roc_auc(np.exp(scores) * 3 - 1, labels) == pytest.approx(auc, abs=1e-12)


def test_summaries():
    s = classification_summary([0, 1, 2, 3], [0, 1, 2, 2], 4)
    assert s["f1"] == [1.0, 1.0, pytest.approx(2 / 3), 0.0]
    assert s["accuracy"] == 0.75
    b = binary_summary([0, 0, 1, 1], [0, 1, 1, 1], [0.1, 0.6, 0.7, 0.9])
    assert b["sensitivity"] == 1.0 and b["specificity"] == 0.5
    assert b["f1_positive"] == pytest.approx(0.8)
    assert b["auc"] == 1.0
    assert binary_summary([0, 0], [0, 1], [0.2, 0.3])["auc"] is None
