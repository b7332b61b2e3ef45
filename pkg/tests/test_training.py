import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from store3d.corridor import RelevanceConfig, label_dataset
from store3d.data import SyntheticSpec, gen_synthetic
from store3d.pipeline import ModelConfig, build_model
from store3d.training import (
    TrainConfig,
    anchor_assignment,
    assign_relevance_targets,
    cache_dense,
    make_samples,
    relevance_auc,
    roc_auc,
    train_relevance,
)

SMALL = ModelConfig(grid=(8, 8), query_grid=(8, 16), head_features=16)


def pairwise_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), by enumerating every pair."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_roc_auc_matches_pair_enumeration(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        assert np.isnan(roc_auc(scores, labels))
        return
    assert roc_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


@pytest.fixture(scope="module")
def samples():
    ds = gen_synthetic(SyntheticSpec(n_scenes=1, duration=8.0, seed=0))
    model = build_model(SMALL)
    s = make_samples(ds, SMALL, label_dataset(ds, RelevanceConfig()))
    cache_dense(s, model)
    assign_relevance_targets(s, model)
    return model, s


def test_samples_only_keep_visible_gt(samples):
    _, s = samples
    for x in s:
        assert np.all(np.abs(x.gt_centers[:, 0]) < SMALL.extent_x / 2)
        assert np.all(np.abs(x.gt_centers[:, 1]) < SMALL.extent_y / 2)
        assert len(x.relevant) == len(x.gt_cls)


def test_anchor_assignment_is_one_to_one_and_within_radius(samples):
    _, s = samples
    for x in s:
        asg = anchor_assignment(x, SMALL.cell, 4.0)
        assert len(set(asg.rows)) == len(asg.rows) and len(set(asg.cols)) == len(asg.cols)
        ref = x.dense.queries.reference_points[:, :2]
        for r, c in asg.pairs:
            assert np.linalg.norm(ref[r] - x.gt_params[c, :2] * SMALL.cell) <= 4.0 + 1e-9


def test_plan_targets_only_mark_relevant_agents(samples):
    _, s = samples
    for x in s:
        n_pos = int((x.rel_target > 0).sum())
        assert n_pos <= int(x.relevant.sum())
        assert np.all(x.rel_heatmap >= x.rel_target)


def test_relevance_training_reduces_loss_and_separates_labels(samples):
    model, s = samples
    before = relevance_auc(model, s, 0.5)[0]
    log = train_relevance(model, s, TrainConfig(rel_iters=60, warmup=(0, 30)))
    assert [e["keep_ratio"] for e in log[:2]] == [1.0, pytest.approx(1 - 0.5 / 30)]
    assert log[-1]["keep_ratio"] == 0.5
    assert np.mean([e["loss"] for e in log[-10:]]) < np.mean([e["loss"] for e in log[:10]])
    assert relevance_auc(model, s, 0.5)[0] > max(before, 0.8)
