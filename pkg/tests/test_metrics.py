import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrmatch import metrics as Me
from corrmatch.errors import ShapeError
from corrmatch.tensor import IGNORE


def brute_miou(pred, gt, K):
    ious = []
    for k in range(K):
        inter = union = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == IGNORE:
                continue
            inter += p == k and g == k
            union += p == k or g == k
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def test_miou_cases():
    gt = np.random.default_rng(0).integers(0, 3, (4, 4))
    assert Me.miou(gt, gt, 3) == 1.0
    assert Me.miou(np.zeros((2, 2), int), np.ones((2, 2), int), 3) == 0.0
    pred = np.array([[0, 0, 1, 1], [0, 1, 1, 1], [0, 0, 0, 1], [1, 1, 0, 0]])
    gt = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [0, 0, 1, 1], [0, 0, 1, 1]])
    assert abs(Me.miou(pred, gt, 2) - brute_miou(pred, gt, 2)) < 1e-15
    with pytest.raises(ShapeError):
        Me.miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


def test_miou_ignores_ignore_pixels():
    gt = np.array([[0, IGNORE], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    assert Me.miou(pred, gt, 2) == 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (5, 5), elements=st.integers(0, 3)), arrays(np.int64, (5, 5), elements=st.integers(0, 3)),
       st.permutations(range(4)))
def test_miou_oracle_and_relabel_equivariance(pred, gt, perm):
    perm = np.array(perm)
    assert abs(Me.miou(pred, gt, 4) - brute_miou(pred, gt, 4)) < 1e-12
    assert abs(Me.miou(perm[pred], perm[gt], 4) - Me.miou(pred, gt, 4)) < 1e-12


def test_mask_and_mining_ratio():
    assert Me.mask_ratio(np.ones((2, 2))) == 1.0
    assert Me.mask_ratio(np.zeros((2, 2))) == 0.0
    assert Me.mask_ratio(np.array([1, 1, 1, 0, 0, 0, 0, 0])) == 0.375
    pseudo = np.array([[0, 1], [1, 2]])
    gt = np.array([[0, 1], [0, 2]])
    assert Me.mining_ratio(np.ones((2, 2)), pseudo, gt) == 1.0
    assert Me.mining_ratio(np.zeros((2, 2)), pseudo, gt) == 0.0
    mask = np.array([[1, 0], [1, 1]])
    # Correct pixels: (0,0), (0,1), (1,1); of those, (0,0) and (1,1) are masked.
    assert Me.mining_ratio(mask, pseudo, gt) == 2 / 3
    assert Me.mining_ratio(np.ones((2, 2)), np.zeros((2, 2), int), np.ones((2, 2), int)) == 0.0


def test_diagnostic_ratios_cases():
    gt = np.array([[0, 1], [2, 3]])
    d = Me.diagnostic_ratios(np.ones((2, 2)), gt, gt)
    assert d == {"filter_ratio": 1.0, "correct_pseudo_ratio": 1.0, "pixel_accuracy": 1.0}
    d = Me.diagnostic_ratios(np.zeros((2, 2)), gt, gt)
    assert d["filter_ratio"] == 0.0 and d["correct_pseudo_ratio"] == 0.0 and d["pixel_accuracy"] == 1.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, (4, 4)), arrays(np.int64, (4, 4), elements=st.integers(0, 2)),
       arrays(np.int64, (4, 4), elements=st.integers(0, 2)))
def test_diagnostic_ratio_oracle_and_bounds(mask, pseudo, gt):
    d = Me.diagnostic_ratios(mask, pseudo, gt)
    n = mask.size
    flt = sum(bool(m) for m in mask.ravel()) / n
    cor = sum(bool(m) and p == g for m, p, g in zip(mask.ravel(), pseudo.ravel(), gt.ravel())) / n
    acc = sum(p == g for p, g in zip(pseudo.ravel(), gt.ravel())) / n
    assert d == pytest.approx({"filter_ratio": flt, "correct_pseudo_ratio": cor, "pixel_accuracy": acc}, abs=1e-15)
    assert d["correct_pseudo_ratio"] <= min(d["filter_ratio"], d["pixel_accuracy"])
    assert 0.0 <= Me.mining_ratio(mask, pseudo, gt) <= 1.0
