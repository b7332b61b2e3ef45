import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from store3d.assignment import Assignment
from store3d.errors import DomainError, MissingLabels, ShapeMismatch
from store3d.losses import (
    LossConfig,
    aux_roi_loss,
    focal_loss,
    gaussian_focal_loss,
    joint_loss,
    l1_box_loss,
    match_cost,
    relevance_heatmap,
    relevance_targets,
    set_matching_loss,
)
from store3d.numeric import finite_diff_check

CFG = LossConfig()


def test_focal_loss_fixture():
    loss, _ = focal_loss(np.array([0.8, 0.3]), np.array([1.0, 0.0]))
    expected = (-0.25 * 0.2**2 * math.log(0.8) - 0.25 * 0.3**2 * math.log(0.7)) / 2
    assert loss == pytest.approx(expected, rel=1e-14)


def test_focal_gamma_zero_is_weighted_cross_entropy():
    p, y = np.array([0.9, 0.2, 0.6]), np.array([1.0, 0.0, 1.0])
    loss, _ = focal_loss(p, y, alpha=1.0, gamma=0.0)
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert loss == pytest.approx(bce)


def test_losses_reject_unclamped_probabilities():
    with pytest.raises(DomainError):
        focal_loss(np.array([1.0]), np.array([1.0]))
    with pytest.raises(DomainError):
        gaussian_focal_loss(np.array([0.0]), np.array([0.0]))
    with pytest.raises(ShapeMismatch):
        focal_loss(np.array([0.5]), np.array([1.0, 0.0]))


@pytest.mark.parametrize("loss_fn", [focal_loss, gaussian_focal_loss])
def test_gradients_match_finite_differences(loss_fn):
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, 12)
    y = np.where(rng.random(12) < 0.3, 1.0, rng.uniform(0, 0.9, 12))
    assert finite_diff_check(lambda x: loss_fn(x, y), p) < 1e-4


def test_gaussian_focal_soft_negatives():
    p = np.array([0.5, 0.5])
    # a negative right next to a peak (y near 1) costs far less than a far one
    near, _ = gaussian_focal_loss(p[:1], np.array([0.9]))
    far, _ = gaussian_focal_loss(p[:1], np.array([0.0]))
    assert near == pytest.approx(far * 0.1**4)


def test_l1_loss_and_subgradient():
    loss, g = l1_box_loss([[1.0, 2.0], [3.0, 3.0]], [[0.0, 2.0], [4.0, 3.0]])
    assert loss == 0.5
    assert g.tolist() == [[0.25, 0.0], [-0.25, 0.0]]


def brute_match_total(probs, boxes, gt_cls, gt_boxes):
    c = match_cost(probs, boxes, gt_cls, gt_boxes, CFG)
    return min(math.fsum(c[p[j], j] for j in range(len(gt_cls))) for p in itertools.permutations(range(len(probs)), len(gt_cls)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 10_000))
def test_set_loss_matches_brute_force_and_is_permutation_invariant(q, g, seed):
    g = min(g, q)
    rng = np.random.default_rng(seed)
    probs = rng.uniform(0.01, 0.99, (q, 3))
    boxes = rng.normal(size=(q, 4))
    gt_cls = rng.integers(0, 3, g)
    gt_boxes = rng.normal(size=(g, 4))
    res = set_matching_loss(probs, boxes, gt_cls, gt_boxes, CFG)
    if g:
        assert res.assignment.total_cost == pytest.approx(brute_match_total(probs, boxes, gt_cls, gt_boxes), abs=1e-9)
    perm = rng.permutation(q)
    res_p = set_matching_loss(probs[perm], boxes[perm], gt_cls, gt_boxes, CFG)
    assert res_p.det_class == pytest.approx(res.det_class, rel=1e-12)
    assert res_p.det_l1 == pytest.approx(res.det_l1, rel=1e-12)


def test_set_loss_without_gt_pushes_everything_to_background():
    res = set_matching_loss(np.full((3, 2), 0.5), np.zeros((3, 4)), [], np.zeros((0, 4)), CFG)
    assert res.det_l1 == 0.0 and res.assignment.pairs == []
    assert np.all(res.grad_probs > 0)


def test_plan_targets_fixture():
    ref = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0], [9.0, 9.0, 0.0]])
    asg = Assignment([(0, 0), (1, 1)], 0.0)
    centers = np.array([[0.0, 0.0], [0.0, 0.0]])
    # distance 5 with diagonal 10 (sigma 5): exp(-1/2); second GT is irrelevant
    t = relevance_targets(ref, asg, centers, [10.0, 10.0], [True, False])
    assert t.tolist() == pytest.approx([math.exp(-0.5), 0.0, 0.0])
    assert relevance_targets(ref, asg, centers, [10.0, 10.0], None, "det").tolist() == [1.0, 1.0, 0.0]
    with pytest.raises(MissingLabels):
        relevance_targets(ref, asg, centers, [10.0, 10.0], None)
    with pytest.raises(MissingLabels):
        relevance_targets(ref, asg, centers, [10.0, 10.0], [True])


def test_heatmap_peaks_at_matched_query():
    ref = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [50.0, 0.0, 0.0]])
    t = relevance_heatmap(ref, Assignment([(0, 0)], 0.0), np.zeros((1, 2)), [4.0], [True])
    assert t[0] == 1.0 and t[1] == 1.0  # closer than the matched query clips to the peak
    assert 0.0 < t[2] < 1.0 and t[3] < 1e-12
    assert np.all(relevance_heatmap(ref, Assignment([(0, 0)], 0.0), np.zeros((1, 2)), [4.0], [False]) == 0)


def test_aux_loss_only_regresses_positive_tokens():
    obj = np.array([0.5, 0.5])
    _, _, g_off = aux_roi_loss(obj, np.array([1.0, 0.0]), np.ones((2, 2)), np.zeros((2, 2)), CFG)
    assert np.all(g_off[1] == 0) and np.all(g_off[0] > 0)


@settings(max_examples=50, deadline=None)
@given(*[st.floats(0, 10)] * 4, st.floats(0, 3), st.floats(0, 3))
def test_joint_loss_is_linear_in_weights(a, b, c, d, lr, la):
    out = joint_loss(a, b, c, d, LossConfig(lambda_rel=lr, lambda_aux=la))
    assert out.total == pytest.approx(a + b + lr * c + la * d)
    double = joint_loss(2 * a, 2 * b, 2 * c, 2 * d, LossConfig(lambda_rel=lr, lambda_aux=la))
    assert double.total == pytest.approx(2 * out.total)


def test_joint_loss_refuses_relevance_gradient_into_embeddings():
    with pytest.raises(AssertionError):
        joint_loss(1.0, 1.0, 1.0, 1.0, CFG, rel_embedding_grad=np.ones(3))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_rel=-1.0)
    with pytest.raises(ValueError):
        LossConfig(focal_gamma=math.nan)
