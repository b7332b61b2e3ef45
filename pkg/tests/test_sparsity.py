import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from store3d.errors import EmptyTopK, IndexCollision, KTooLarge
from store3d.geometry import Point2, SE2Pose
from store3d.numeric import GumbelTopkConfig, finite_diff_check
from store3d.sparsity import (
    QuerySet,
    RelevanceHeadParams,
    ScheduleConfig,
    SparsityTrace,
    StorageBuffer,
    TokenStream,
    keep_count,
    layer_keep_ratio,
    mean_keep_ratio,
    propagate_queries,
    query_relevance,
    reactivate,
    relevance_head_backward,
    relevance_head_forward,
    schedule_ratios,
    select_and_store,
    token_relevance,
    top_query_count,
    training_keep_ratio,
)


def stream(n, d=3, seed=0, start=0):
    rng = np.random.default_rng(seed)
    idx = np.arange(start, start + n)
    return TokenStream(rng.normal(size=(n, d)), idx, np.zeros(n, int), idx // 4, idx % 4)


def test_layer_keep_ratio_fixture_and_endpoints():
    assert layer_keep_ratio(0.5, 6, 12) == pytest.approx(0.625)
    assert layer_keep_ratio(0.3, 0, 6) == 1.0
    assert layer_keep_ratio(0.3, 6, 6) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        layer_keep_ratio(0.3, 7, 6)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(1, 24))
def test_layer_keep_ratio_decays_monotonically(tkr, total):
    r = [layer_keep_ratio(tkr, l, total) for l in range(total + 1)]
    assert all(a >= b - 1e-15 for a, b in zip(r, r[1:]))
    assert all(tkr - 1e-15 <= x <= 1.0 + 1e-15 for x in r)


def test_training_keep_ratio_warmup():
    assert training_keep_ratio(0, (10, 20), 0.4) == 1.0
    assert training_keep_ratio(15, (10, 20), 0.4) == pytest.approx(0.7)
    assert training_keep_ratio(25, (10, 20), 0.4) == 0.4
    # no warmup window: the target ratio from the start
    assert training_keep_ratio(0, (0, 0), 0.4) == 0.4


def test_schedule_ratios_hold_and_reactivate():
    cfg = ScheduleConfig(tkr=0.5, pruning_layers=(2, 4), total_layers=6, reactivation_layer=6)
    r = schedule_ratios(cfg)
    assert r[0] == 1.0
    assert r[1] == r[2] == pytest.approx(layer_keep_ratio(0.5, 2, 6))
    assert r[3] == r[4] == pytest.approx(layer_keep_ratio(0.5, 4, 6))
    assert r[5] == 1.0


def test_per_stream_ratio_overrides():
    cfg = ScheduleConfig(tkr=0.5, pruning_layers=(6,), total_layers=6, tkr_qry=0.2)
    assert schedule_ratios(cfg, "image")[-1] == pytest.approx(0.5)
    assert schedule_ratios(cfg, "query")[-1] == pytest.approx(0.2)


def test_keep_count_guards_floating_point_floor():
    assert keep_count(0.29, 100) == 29
    assert keep_count(0.7, 10) == 7
    assert keep_count(0.999, 10) == 9


def test_mean_keep_ratio_uses_integer_counts():
    cfg = ScheduleConfig(tkr=0.5, pruning_layers=(1,), total_layers=2)
    # layer 1 keeps floor(7 * LKR(0.5,1,2)) = floor(7 * 0.625) = 4, layer 2 holds it
    assert mean_keep_ratio(cfg, 7) == pytest.approx(4 / 7)


@pytest.mark.parametrize(
    "kwargs",
    [dict(tkr=0.0), dict(tkr=1.5), dict(pruning_layers=(3, 2)), dict(pruning_layers=(7,)),
     dict(pruning_layers=(4,), reactivation_layer=3), dict(warmup=(5, 1))],
)
def test_schedule_config_validation(kwargs):
    with pytest.raises(ValueError):
        ScheduleConfig(**kwargs)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 1.0), st.integers(0, 10_000), st.sampled_from(["hard_eval", "straight_through_train"]))
def test_select_store_reactivate_partitions_and_restores(n, ratio, seed, mode):
    s = stream(n, seed=seed)
    scores = np.random.default_rng(seed).random(n)
    k = keep_count(ratio, n)
    if k < 1:
        with pytest.raises(EmptyTopK):
            select_and_store(s, scores, ratio, GumbelTopkConfig(1, 1.0, seed, mode), StorageBuffer("image"))
        return
    active, buf, _ = select_and_store(s, scores, ratio, GumbelTopkConfig(1, 1.0, seed, mode), StorageBuffer("image"))
    assert len(active) == k and len(active) + len(buf) == n
    assert set(active.original_index).isdisjoint(buf.original_index)
    assert np.all(np.diff(active.original_index) > 0)
    back, empty = reactivate(active, buf)
    assert len(empty) == 0
    assert np.array_equal(back.original_index, s.original_index)
    assert np.array_equal(back.embeddings, s.embeddings)


def test_hard_selection_keeps_highest_scores():
    s = stream(6)
    active, buf, _ = select_and_store(s, [0.1, 0.9, 0.3, 0.8, 0.2, 0.7], 0.5, GumbelTopkConfig(1), StorageBuffer("image"))
    assert active.original_index.tolist() == [1, 3, 5]
    assert [i for i, _, st_ in buf.entries()] == [0, 2, 4]


def test_select_errors_and_identity():
    s = stream(4)
    with pytest.raises(KTooLarge):
        select_and_store(s, np.zeros(4), 1.0, GumbelTopkConfig(1), StorageBuffer("image"), keep=5)
    same, buf, res = select_and_store(s, np.zeros(4), 1.0, GumbelTopkConfig(1), StorageBuffer("image"))
    assert same is s and len(buf) == 0 and res is None


def test_buffer_rejects_duplicates_and_counts_bytes():
    buf = StorageBuffer("image")
    buf.store(stream(3), 1)
    with pytest.raises(IndexCollision):
        buf.store(stream(2), 2)
    assert buf.nbytes() == 3 * 3 * 8
    assert buf.nbytes(2) == 3 * 3 * 2
    with pytest.raises(IndexCollision):
        reactivate(stream(3), buf)


def test_streams_reject_duplicate_indices():
    with pytest.raises(IndexCollision):
        TokenStream(np.zeros((2, 1)), [0, 0], [0, 0], [0, 0], [0, 1])


def test_token_relevance_fixtures():
    one_hot = np.zeros((1, 5))
    one_hot[0, 2] = 1.0
    assert token_relevance(one_hot).tolist() == [0, 0, 1, 0, 0]
    assert np.allclose(token_relevance(np.full((3, 4), 0.25)), 0.25)
    fp = np.random.default_rng(0).dirichlet(np.ones(8), size=4)
    assert token_relevance(fp).sum() == pytest.approx(1.0)
    with pytest.raises(EmptyTopK):
        token_relevance(np.zeros((0, 5)))


def test_top_query_count():
    assert top_query_count(900, 0.1) == 90
    assert top_query_count(3, 0.1) == 1
    assert top_query_count(10, 0.3) == 3


def test_propagate_queries_moves_reference_points():
    q = QuerySet(np.eye(2), [[1.0, 0.0, 0.5], [0.0, 2.0, 0.0]], ["initialized"] * 2, [4, 9])
    p = propagate_queries(q, SE2Pose(Point2(-1.0, 0.0), math.pi / 2))
    assert np.allclose(p.reference_points, [[-1.0, 1.0, 0.5], [-3.0, 0.0, 0.0]])
    assert p.original_index.tolist() == [4, 9]
    assert set(p.origin) == {"propagated"}
    assert len(propagate_queries(None, SE2Pose(Point2(0, 0), 0.0), d=2)) == 0


@pytest.mark.parametrize("kind", ["plan", "det"])
def test_relevance_head_scores_and_gradient(kind):
    rng = np.random.default_rng(5)
    # only plan scoring appends the ego embedding
    head = RelevanceHeadParams.init(4, 3, 6, rng, with_ego=kind == "plan")
    q, c, ego = rng.normal(size=(5, 4)), rng.normal(size=(5, 3)), rng.normal(size=3)
    r = query_relevance(QuerySet(q, np.zeros((5, 3)), ["initialized"] * 5, np.arange(5)), c, head, ego, kind).scores
    assert np.all((r > 0) & (r < 1))
    w = rng.normal(size=5)

    def f(theta):
        h = head.with_flat(theta)
        out, cache = relevance_head_forward(h, q, c, ego, kind)
        return float(w @ out), relevance_head_backward(h, cache, w)

    assert finite_diff_check(f, head.flat()) < 1e-4


def test_zero_readout_gives_half():
    rng = np.random.default_rng(0)
    head = RelevanceHeadParams.init(2, 2, 4, rng, with_ego=False)
    head.u[:] = 0.0
    r, _ = relevance_head_forward(head, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    assert np.allclose(r, 0.5)


def test_trace_counts_processed_rows():
    tr = SparsityTrace()
    buf = StorageBuffer("image")
    tr.record("image", 1, stream(5), buf, 5)
    tr.record("image", 2, stream(3), buf, 3)
    tr.record("query", 1, stream(2), buf, 2)
    assert tr.processed_rows("image") == 8
    assert tr.to_dict()["stages"][0] == {"stream": "image", "layer": 1, "active": 5, "buffered": 0, "expected": 5}
