import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idm import IGNORE_INDEX
from idm.errors import ContractError, EvaluationError
from idm.evaluation import ConfusionMatrix, accumulate, evaluate_predictions, miou


def test_perfect_prediction_is_diagonal(rng):
    t = rng.integers(0, 4, size=(6, 6))
    cm = accumulate(ConfusionMatrix(4), t, t)
    assert np.array_equal(cm.counts, np.diag(np.bincount(t.ravel(), minlength=4)))
    assert miou(cm).miou == 1.0


def test_all_ignore_truth_leaves_cm_unchanged(rng):
    cm = accumulate(ConfusionMatrix(3), rng.integers(0, 3, size=(4, 4)), np.full((4, 4), IGNORE_INDEX))
    assert cm.total == 0


def test_two_by_two_case():
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    cm = accumulate(ConfusionMatrix(2), pred, truth)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    rep = miou(cm)
    # IoU_0 = 1 / (1 + 0 + 1), IoU_1 = 2 / (2 + 1 + 0)
    np.testing.assert_allclose(rep.per_class_iou, [0.5, 2 / 3])
    assert rep.miou == pytest.approx(7 / 12)
    assert rep.pixel_acc == pytest.approx(0.75)


def test_complement_prediction():
    truth = np.array([[0, 1], [0, 1]])
    assert miou(accumulate(ConfusionMatrix(2), 1 - truth, truth)).miou == 0.0


def test_absent_classes_excluded():
    truth = np.array([[0, 0, 2, 2]])
    rep = miou(accumulate(ConfusionMatrix(4), truth, truth))
    assert rep.present.tolist() == [True, False, True, False]
    assert np.isnan(rep.per_class_iou[1])
    assert rep.miou == 1.0


def test_empty_cm_is_error():
    with pytest.raises(EvaluationError):
        miou(ConfusionMatrix(3))


def test_shape_mismatch():
    with pytest.raises(ContractError):
        accumulate(ConfusionMatrix(2), np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_batch_equals_per_image_and_order_invariant(seed):
    rng = np.random.default_rng(seed)
    preds = rng.integers(0, 5, size=(4, 6, 6))
    truths = rng.integers(0, 5, size=(4, 6, 6))
    whole = accumulate(ConfusionMatrix(5), preds, truths)
    per = ConfusionMatrix(5)
    for p, t in zip(preds[::-1], truths[::-1]):
        per = per + accumulate(ConfusionMatrix(5), p, t)
    assert np.array_equal(whole.counts, per.counts)
    assert evaluate_predictions(preds, truths, 5).miou == pytest.approx(miou(whole).miou)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    preds = rng.integers(0, 5, size=(3, 5, 5))
    truths = rng.integers(0, 5, size=(3, 5, 5))
    perm = rng.permutation(5)
    a = evaluate_predictions(preds, truths, 5)
    b = evaluate_predictions(perm[preds], perm[truths], 5)
    assert a.miou == pytest.approx(b.miou)
    np.testing.assert_allclose(b.per_class_iou[perm], a.per_class_iou)
